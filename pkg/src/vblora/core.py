"""Vector bank, top-k admixture, and LoRA factor assembly.

Every low-rank factor is tiled from length-``b`` sub-vectors, and every
sub-vector is a sparse convex combination of rows of one shared bank::

    w = softmax(topk(sigma, k))        # sigma: length-h logits
    u = sum_s w_s * bank[s]            # u: length-b sub-vector

Logit tensors have shape ``(d / b, r, h)``. ``A`` (``r x d_in``) and ``B``
(``d_out x r``) are laid out so that ``B @ A`` is the weight increment of a
``d_out x d_in`` matrix. Gradients are derived by hand; there is no autodiff
here.

Arithmetic notes: selection softmax runs in float64; the admixture sum and all
backward reductions accumulate in float64 and cast back to the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

BANK_INIT_BOUND = 0.02
LOGIT_INIT_STD = 0.01

SIDES = ("A", "B")


@dataclass
class VectorBank:
    """``h x b`` matrix of shared basis vectors."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2 or 0 in values.shape:
            raise ValueError(f"bank must be a non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("bank contains non-finite entries")
        self.values = values

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def b(self) -> int:
        return self.values.shape[1]


@dataclass
class LogitTensor:
    """Selection logits for one side of one adapted matrix, shape ``(d/b, r, h)``."""

    values: np.ndarray
    side: str = "A"

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"logits must have shape (d/b, r, h), got {values.shape}")
        if self.side not in SIDES:
            raise ValueError(f"side must be 'A' or 'B', got {self.side!r}")
        self.values = values

    @property
    def num_subvectors(self) -> int:
        return self.values.shape[0]

    @property
    def r(self) -> int:
        return self.values.shape[1]

    @property
    def h(self) -> int:
        return self.values.shape[2]


@dataclass
class SubVector:
    values: np.ndarray
    selected_indices: np.ndarray
    weights: np.ndarray


@dataclass
class ComposedFactors:
    """LoRA factors with ``delta_W = B @ A`` of shape ``(d_out, d_in)``."""

    A: np.ndarray
    B: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ValueError(
                f"incompatible factor shapes A{self.A.shape} and B{self.B.shape}"
            )

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]


@dataclass
class Selection:
    """Which bank rows feed each sub-vector, and how gradients flow back.

    ``weights`` are the forward mixing weights. ``soft`` is the distribution
    whose softmax Jacobian (times ``scale``) carries the logit gradient; for
    plain top-k both coincide up to float rounding.
    """

    indices: np.ndarray
    weights: np.ndarray
    soft: np.ndarray
    scale: float = 1.0


BankLike = Union[VectorBank, np.ndarray]


def _bank_array(bank: BankLike) -> np.ndarray:
    return bank.values if isinstance(bank, VectorBank) else np.asarray(bank)


def _logit_array(logits) -> np.ndarray:
    return logits.values if isinstance(logits, LogitTensor) else np.asarray(logits)


# ---------------------------------------------------------------------------
# initialization


def init_bank(h: int, b: int, seed: int) -> VectorBank:
    if h < 1 or b < 1:
        raise ValueError(f"bank dimensions must be positive, got h={h}, b={b}")
    rng = np.random.default_rng(seed)
    values = rng.uniform(-BANK_INIT_BOUND, BANK_INIT_BOUND, size=(h, b)).astype(np.float32)
    return VectorBank(values)


def init_logits(
    d_dim: int,
    r: int,
    h: int,
    seed: int,
    *,
    b: int,
    side: str = "A",
    std: float = LOGIT_INIT_STD,
) -> LogitTensor:
    """Normal(0, std) logits of shape ``(d_dim // b, r, h)``; ``std`` is a standard deviation."""
    if b < 1 or d_dim < 1 or d_dim % b != 0:
        raise ValueError(f"d_dim={d_dim} is not divisible by sub-vector length b={b}")
    if r < 1 or h < 1:
        raise ValueError(f"rank and bank size must be positive, got r={r}, h={h}")
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, std, size=(d_dim // b, r, h)).astype(np.float32)
    return LogitTensor(values, side=side)


# ---------------------------------------------------------------------------
# selection


def _check_logits(logits: np.ndarray, k: int) -> None:
    h = logits.shape[-1]
    if not 1 <= k <= h:
        raise ValueError(f"k must satisfy 1 <= k <= h={h}, got k={k}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits, descending, ties to the lower index."""
    return np.argsort(-np.asarray(logits), axis=-1, kind="stable")[..., :k]


def complete_weights(head: np.ndarray) -> np.ndarray:
    """Append the implied last weight ``1 - sum(head)`` (clamped at 0).

    ``head`` holds the first ``k - 1`` weights along the last axis. The sum is
    taken left to right in ``head``'s dtype so that export and reconstruction
    produce identical bits.
    """
    head = np.asarray(head)
    acc = np.zeros(head.shape[:-1], dtype=head.dtype)
    for j in range(head.shape[-1]):
        acc = acc + head[..., j]
    last = np.maximum(head.dtype.type(1) - acc, head.dtype.type(0))
    return np.concatenate([head, last[..., None]], axis=-1)


def canonical_weights(weights: np.ndarray, dtype) -> np.ndarray:
    """Cast weights to ``dtype`` and re-derive the last from the others."""
    return complete_weights(np.asarray(weights)[..., :-1].astype(dtype))


def topk_selection(logits, k: int, dtype=None) -> Selection:
    """Top-k selection for a batch of logit vectors (last axis = bank)."""
    logits = _logit_array(logits)
    _check_logits(logits, k)
    dtype = np.dtype(dtype or logits.dtype)
    if not np.issubdtype(dtype, np.floating):
        dtype = np.dtype(np.float64)
    idx = topk_indices(logits, k)
    soft = softmax(np.take_along_axis(logits, idx, axis=-1))
    return Selection(indices=idx, weights=canonical_weights(soft, dtype), soft=soft)


def admix(bank: BankLike, indices: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_j weights[..., j] * bank[indices[..., j]]`` in a fixed order."""
    values = _bank_array(bank)
    rows = values.astype(np.float64)
    out = np.zeros(indices.shape[:-1] + (values.shape[1],), dtype=np.float64)
    for j in range(indices.shape[-1]):
        out += weights[..., j, None].astype(np.float64) * rows[indices[..., j]]
    return out.astype(np.result_type(values.dtype, weights.dtype))


def topk_admix(sigma, bank: BankLike, k: int) -> SubVector:
    sigma = np.asarray(sigma)
    values = _bank_array(bank)
    if sigma.ndim != 1 or sigma.shape[0] != values.shape[0]:
        raise ValueError(f"sigma must have length h={values.shape[0]}, got shape {sigma.shape}")
    sel = topk_selection(sigma, k, dtype=values.dtype)
    return SubVector(
        values=admix(values, sel.indices, sel.weights),
        selected_indices=sel.indices,
        weights=sel.weights,
    )


# ---------------------------------------------------------------------------
# factor assembly


def _check_pair(logits: np.ndarray, values: np.ndarray) -> None:
    if logits.ndim != 3:
        raise ValueError(f"logits must have shape (d/b, r, h), got {logits.shape}")
    if logits.shape[-1] != values.shape[0]:
        raise ValueError(
            f"logits bank dimension {logits.shape[-1]} does not match bank size h={values.shape[0]}"
        )


def compose_subvectors(logits, bank: BankLike, k: int) -> np.ndarray:
    """Sub-vector grid of shape ``(d/b, r, b)``."""
    arr, values = _logit_array(logits), _bank_array(bank)
    _check_pair(arr, values)
    sel = topk_selection(arr, k, dtype=values.dtype)
    return admix(values, sel.indices, sel.weights)


def subvectors_to_A(sub: np.ndarray) -> np.ndarray:
    n, r, b = sub.shape
    return sub.transpose(1, 0, 2).reshape(r, n * b)


def subvectors_to_B(sub: np.ndarray) -> np.ndarray:
    n, r, b = sub.shape
    return sub.transpose(0, 2, 1).reshape(n * b, r)


def A_to_subvectors(A: np.ndarray, b: int) -> np.ndarray:
    r, d = A.shape
    return A.reshape(r, d // b, b).transpose(1, 0, 2)


def B_to_subvectors(B: np.ndarray, b: int) -> np.ndarray:
    d, r = B.shape
    return B.reshape(d // b, b, r).transpose(0, 2, 1)


def compose_A(logits, bank: BankLike, k: int) -> np.ndarray:
    """``r x d_in`` factor; row ``i`` concatenates sub-vectors ``(0, i), (1, i), ...``."""
    return subvectors_to_A(compose_subvectors(logits, bank, k))


def compose_B(logits, bank: BankLike, k: int) -> np.ndarray:
    """``d_out x r`` factor; column ``i`` concatenates sub-vectors ``(0, i), (1, i), ...``."""
    return subvectors_to_B(compose_subvectors(logits, bank, k))


def compose_factors(logits_A, logits_B, bank: BankLike, k: int) -> ComposedFactors:
    A = compose_A(logits_A, bank, k)
    B = compose_B(logits_B, bank, k)
    return ComposedFactors(A, B, provenance={"k": k, "h": _bank_array(bank).shape[0]})


def adapted_forward(x: np.ndarray, W: np.ndarray, factors: ComposedFactors) -> np.ndarray:
    """``x @ W + (x @ A.T) @ B.T`` for ``W`` of shape ``(d_in, d_out)``; never forms ``B @ A``."""
    x, W = np.asarray(x), np.asarray(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"cannot apply W{W.shape} to x{x.shape}")
    if (W.shape[0], W.shape[1]) != (factors.d_in, factors.d_out):
        raise ValueError(
            f"W{W.shape} does not match factors (d_in={factors.d_in}, d_out={factors.d_out})"
        )
    return x @ W + (x @ factors.A.T) @ factors.B.T


def merge_delta(factors: ComposedFactors) -> np.ndarray:
    return factors.B @ factors.A


def merge_weight(W: np.ndarray, factors: ComposedFactors) -> np.ndarray:
    """Base weight in ``(d_in, d_out)`` orientation with the increment folded in."""
    return W + merge_delta(factors).T


# ---------------------------------------------------------------------------
# backward


@dataclass
class TkamGrad:
    grad_sigma: np.ndarray
    rows: np.ndarray
    grad_rows: np.ndarray


def selection_backward(
    grad_sub: np.ndarray, bank: BankLike, sel: Selection
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``admix(bank, sel.indices, sel.weights)``.

    Returns ``(grad_logits, grad_bank)`` with ``grad_logits`` shaped like the
    logits (``grad_sub.shape[:-1] + (h,)``) and ``grad_bank`` like the bank.
    Bank rows outside ``sel.indices`` get exactly zero.
    """
    values = _bank_array(bank)
    h, b = values.shape
    g = np.asarray(grad_sub, dtype=np.float64)
    rows = values.astype(np.float64)[sel.indices]  # (..., m, b)
    fwd = sel.weights.astype(np.float64)

    grad_bank = np.zeros((h, b), dtype=np.float64)
    contrib = fwd[..., None] * g[..., None, :]
    np.add.at(grad_bank, sel.indices.reshape(-1), contrib.reshape(-1, b))

    # d u / d sigma_s = w_s (alpha_s - u) restricted to the support
    dots = np.einsum("...b,...mb->...m", g, rows)
    mean = np.sum(sel.soft * dots, axis=-1, keepdims=True)
    gs = sel.scale * sel.soft * (dots - mean)
    grad_logits = np.zeros(g.shape[:-1] + (h,), dtype=np.float64)
    np.put_along_axis(grad_logits, sel.indices, gs, axis=-1)

    out_dtype = values.dtype
    return grad_logits.astype(out_dtype), grad_bank.astype(out_dtype)


def tkam_backward(grad_u, sigma, bank: BankLike, k: int) -> TkamGrad:
    sigma = np.asarray(sigma)
    values = _bank_array(bank)
    sel = topk_selection(sigma, k, dtype=values.dtype)
    grad_sigma, grad_bank = selection_backward(np.asarray(grad_u), values, sel)
    return TkamGrad(grad_sigma=grad_sigma, rows=sel.indices, grad_rows=grad_bank[sel.indices])


def compose_backward(grad_sub: np.ndarray, logits, bank: BankLike, k: int):
    """``(grad_logits, grad_bank)`` for a ``(d/b, r, b)`` sub-vector gradient."""
    arr, values = _logit_array(logits), _bank_array(bank)
    _check_pair(arr, values)
    return selection_backward(grad_sub, values, topk_selection(arr, k, dtype=values.dtype))


def compose_A_backward(grad_A: np.ndarray, logits, bank: BankLike, k: int):
    b = _bank_array(bank).shape[1]
    return compose_backward(A_to_subvectors(np.asarray(grad_A), b), logits, bank, k)


def compose_B_backward(grad_B: np.ndarray, logits, bank: BankLike, k: int):
    b = _bank_array(bank).shape[1]
    return compose_backward(B_to_subvectors(np.asarray(grad_B), b), logits, bank, k)


def adapted_backward(grad_y: np.ndarray, x: np.ndarray, W: np.ndarray, factors: ComposedFactors):
    """``(grad_x, grad_A, grad_B)`` for :func:`adapted_forward`; ``W`` is frozen."""
    z = x @ factors.A.T
    grad_B = grad_y.T @ z
    grad_z = grad_y @ factors.B
    grad_A = grad_z.T @ x
    grad_x = grad_y @ W.T + grad_z @ factors.A
    return grad_x, grad_A, grad_B


def adapted_linear_backward(grad_y, x, W, bank: BankLike, logits_A, logits_B, k: int) -> dict:
    """Chain the bilinear and admixture backward passes for one adapted layer."""
    factors = compose_factors(logits_A, logits_B, bank, k)
    grad_x, grad_A, grad_B = adapted_backward(grad_y, x, W, factors)
    gl_A, gb_A = compose_A_backward(grad_A, logits_A, bank, k)
    gl_B, gb_B = compose_B_backward(grad_B, logits_B, bank, k)
    return {
        "x": grad_x,
        "bank": gb_A + gb_B,
        "logits_A": gl_A,
        "logits_B": gl_B,
    }
