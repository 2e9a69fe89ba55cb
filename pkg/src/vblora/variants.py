"""Alternative vector-selection mechanisms for ablations.

Each policy has a training path (possibly stochastic) and a noise-free
inference path. Training selections carry the information needed for the
backward pass (:class:`vblora.core.Selection`), so every kind can be trained
through :func:`vblora.core.selection_backward`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Mapping, Optional

import numpy as np

from .core import (
    BankLike,
    Selection,
    SubVector,
    _bank_array,
    admix,
    canonical_weights,
    softmax,
    topk_indices,
    topk_selection,
)


class SelectionKind(str, Enum):
    TOPK = "topk"
    NOISY_TOPK = "noisy_topk"
    GS = "gs"
    ST_GS = "st_gs"
    SELECT_ALL = "select_all"


STOCHASTIC = {SelectionKind.NOISY_TOPK, SelectionKind.GS, SelectionKind.ST_GS}
GUMBEL = {SelectionKind.GS, SelectionKind.ST_GS}


@dataclass(frozen=True)
class SelectionPolicy:
    kind: SelectionKind = SelectionKind.TOPK
    k: int = 2
    tau: float = 1.0 / 3.0
    inference_k: Optional[int] = None
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SelectionKind(self.kind))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.kind in GUMBEL and not self.tau > 0:
            raise ValueError(f"tau must be > 0 for {self.kind.value}, got {self.tau}")
        if self.inference_k is not None and self.inference_k < 1:
            raise ValueError(f"inference_k must be >= 1, got {self.inference_k}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be nonnegative, got {self.noise_scale}")

    @property
    def eval_k(self) -> int:
        return self.inference_k if self.inference_k is not None else self.k

    def validate(self, h: int) -> None:
        if self.kind is not SelectionKind.SELECT_ALL and self.k > h:
            raise ValueError(f"k={self.k} exceeds bank size h={h}")
        if self.eval_k > h and self.kind is not SelectionKind.SELECT_ALL:
            raise ValueError(f"inference_k={self.eval_k} exceeds bank size h={h}")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "SelectionPolicy":
        inference_k = cfg.get("inference_k")
        return cls(
            kind=SelectionKind(str(cfg.get("selection", "topk"))),
            k=int(cfg.get("k", 2)),
            tau=float(cfg.get("tau", 1.0 / 3.0)),
            inference_k=None if inference_k in (None, "", "none") else int(inference_k),
            noise_scale=float(cfg.get("noise_scale", 1.0)),
        )

    def to_config(self) -> dict:
        out = asdict(self)
        out["selection"] = out.pop("kind").value
        return out


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    # open interval (0, 1): keeps both logs finite
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def _dense(p: np.ndarray, dtype, scale: float = 1.0) -> Selection:
    order = np.argsort(-p, axis=-1, kind="stable")
    soft = np.take_along_axis(p, order, axis=-1)
    return Selection(indices=order, weights=canonical_weights(soft, dtype), soft=soft, scale=scale)


def train_selection(
    policy: SelectionPolicy,
    logits: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    dtype=None,
) -> Selection:
    """Training-time selection over the last axis of ``logits``."""
    logits = np.asarray(logits)
    dtype = np.dtype(dtype or logits.dtype)
    h = logits.shape[-1]
    policy.validate(h)
    if policy.kind in STOCHASTIC and rng is None:
        raise ValueError(f"selection '{policy.kind.value}' needs an rng stream")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")

    kind = policy.kind
    if kind is SelectionKind.TOPK:
        return topk_selection(logits, policy.k, dtype)
    if kind is SelectionKind.SELECT_ALL:
        return topk_selection(logits, h, dtype)
    if kind is SelectionKind.NOISY_TOPK:
        noisy = logits + policy.noise_scale * rng.standard_normal(logits.shape)
        chosen = topk_indices(noisy, policy.k)
        # canonical order: clean logit descending, ties to lower index
        clean = np.take_along_axis(logits, chosen, axis=-1)
        order = np.lexsort((chosen, -clean), axis=-1)
        idx = np.take_along_axis(chosen, order, axis=-1)
        soft = softmax(np.take_along_axis(logits, idx, axis=-1))
        return Selection(indices=idx, weights=canonical_weights(soft, dtype), soft=soft)

    g = sample_gumbel(logits.shape, rng)
    p = softmax((logits.astype(np.float64) + g) / policy.tau)
    sel = _dense(p, dtype, scale=1.0 / policy.tau)
    if kind is SelectionKind.ST_GS:
        hard = np.zeros_like(sel.weights)
        hard[..., 0] = 1
        sel.weights = hard
    return sel


def infer_selection(policy: SelectionPolicy, logits: np.ndarray, dtype=None) -> Selection:
    """Deterministic inference-time selection."""
    logits = np.asarray(logits)
    h = logits.shape[-1]
    policy.validate(h)
    if policy.kind is SelectionKind.SELECT_ALL:
        return topk_selection(logits, h, dtype)
    if policy.kind is SelectionKind.TOPK:
        return topk_selection(logits, policy.k, dtype)
    return topk_selection(logits, policy.eval_k, dtype)


def _subvector(sel: Selection, values: np.ndarray, hard: bool = False) -> SubVector:
    idx, w = sel.indices, sel.weights
    if hard:
        idx, w = idx[:1], w[:1]
    return SubVector(values=admix(values, idx, w), selected_indices=idx, weights=w)


def select_train(
    policy: SelectionPolicy,
    sigma,
    bank: BankLike,
    rng: Optional[np.random.Generator] = None,
) -> SubVector:
    values = _bank_array(bank)
    sigma = np.asarray(sigma)
    if sigma.shape != (values.shape[0],):
        raise ValueError(f"sigma must have length h={values.shape[0]}, got shape {sigma.shape}")
    sel = train_selection(policy, sigma, rng, dtype=values.dtype)
    return _subvector(sel, values, hard=policy.kind is SelectionKind.ST_GS)


def select_infer(policy: SelectionPolicy, sigma, bank: BankLike) -> SubVector:
    values = _bank_array(bank)
    sigma = np.asarray(sigma)
    if sigma.shape != (values.shape[0],):
        raise ValueError(f"sigma must have length h={values.shape[0]}, got shape {sigma.shape}")
    return _subvector(infer_selection(policy, sigma, dtype=values.dtype), values)
