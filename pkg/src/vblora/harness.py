"""Desk-scale training of VB-LoRA adapters on a frozen tiny transformer.

The transformer's base weights are random and frozen; the only trainable
tensors are one shared vector bank and the selection logits of every adapted
matrix. Sub-vector composition runs through :mod:`vblora.core` (numpy, hand
derived backward) wrapped in a ``torch.autograd.Function``; torch autograd
handles the frozen backbone.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import adapter_store
from .accounting import ModelGeometry
from .core import Selection, admix, init_bank, init_logits, selection_backward, topk_indices
from .variants import STOCHASTIC, SelectionKind, SelectionPolicy, infer_selection, train_selection

log = logging.getLogger(__name__)

MODULES_QV = ("q", "v")
MODULES_ALL = ("q", "k", "v", "o", "up", "down")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"training diverged: loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TinyTransformerSpec:
    layers: int = 2
    hidden: int = 64
    heads: int = 2
    ffn_factor: int = 4
    vocab: int = 32
    seq_len: int = 16
    seed: int = 0

    def validate(self, b: Optional[int] = None) -> None:
        for name in ("layers", "hidden", "heads", "ffn_factor", "vocab", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if b is not None:
            for dim in (self.hidden, self.ffn_factor * self.hidden):
                if dim % b:
                    raise ValueError(f"dimension {dim} is not divisible by sub-vector length b={b}")

    def module_dims(self, module: str) -> tuple[int, int]:
        """``(d_in, d_out)`` of a named linear map."""
        d, f = self.hidden, self.ffn_factor * self.hidden
        return {"up": (d, f), "down": (f, d)}.get(module, (d, d))


@dataclass(frozen=True)
class AdapterConfig:
    h: int = 32
    b: int = 16
    r: int = 2
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    adapted_modules: str = "qv"
    seed: int = 0
    logits_std: float = 0.01

    @property
    def k(self) -> int:
        return self.policy.k

    def module_names(self) -> tuple[str, ...]:
        if self.adapted_modules == "qv":
            return MODULES_QV
        if self.adapted_modules == "all":
            return MODULES_ALL
        raise ValueError(f"adapted_modules must be 'qv' or 'all', got {self.adapted_modules!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr_bank: float = 1e-3
    lr_logits: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_ratio: float = 0.06
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    footprint_every: int = 1

    def __post_init__(self) -> None:
        if self.lr_bank < 0 or self.lr_logits < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.steps < 0 or self.batch_size < 1 or self.footprint_every < 1:
            raise ValueError("steps, batch_size and footprint_every must be positive")


# ---------------------------------------------------------------------------
# task


class PermutationCopyTask:
    """Next-token prediction on chains of a fixed vocabulary permutation.

    A sequence starts at a random token and every next token is the fixed
    permutation applied to the current one, so the whole task is learning the
    map ``token -> perm[token]`` at every position.
    """

    def __init__(self, vocab: int = 32, seq_len: int = 16, seed: int = 0) -> None:
        self.vocab = vocab
        self.seq_len = seq_len
        self.perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(vocab)

    def batch(self, rng: np.random.Generator, n: int) -> tuple[torch.Tensor, torch.Tensor]:
        seq = np.empty((n, self.seq_len + 1), dtype=np.int64)
        seq[:, 0] = rng.integers(0, self.vocab, size=n)
        for t in range(self.seq_len):
            seq[:, t + 1] = self.perm[seq[:, t]]
        return torch.from_numpy(seq[:, :-1].copy()), torch.from_numpy(seq[:, 1:].copy())


# ---------------------------------------------------------------------------
# model


class _BankAdmix(torch.autograd.Function):
    @staticmethod
    def forward(ctx, bank: torch.Tensor, logits: torch.Tensor, sel: Selection) -> torch.Tensor:
        values = bank.detach().numpy()
        ctx.sel = sel
        ctx.save_for_backward(bank)
        return torch.from_numpy(admix(values, sel.indices, sel.weights))

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (bank,) = ctx.saved_tensors
        grad_logits, grad_bank = selection_backward(
            grad_out.detach().numpy(), bank.detach().numpy(), ctx.sel
        )
        return torch.from_numpy(grad_bank), torch.from_numpy(grad_logits), None


@dataclass(frozen=True)
class LogitEntry:
    layer: int
    module: str
    side: str
    d_dim: int

    @property
    def key(self) -> tuple[int, str, str]:
        return (self.layer, self.module, self.side)

    @property
    def name(self) -> str:
        return f"{self.layer}.{self.module}.{self.side}"


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


class TinyVBLoRAModel(nn.Module):
    """Causal pre-LN transformer with frozen random weights plus VB-LoRA adapters.

    Frozen linear weights are stored in ``(d_in, d_out)`` orientation and
    applied as ``x @ W``; an adapted map computes ``x @ W + (x @ A.T) @ B.T``.
    """

    def __init__(self, spec: TinyTransformerSpec, adapter: AdapterConfig, dtype=torch.float32) -> None:
        super().__init__()
        spec.validate(adapter.b)
        adapter.policy.validate(adapter.h)
        self.spec = spec
        self.adapter = adapter
        self.dtype = dtype
        np_dtype = np.float64 if dtype == torch.float64 else np.float32

        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
        d = spec.hidden
        base = {
            "embed": rng.normal(0.0, 1.0, size=(spec.vocab, d)),
            "pos": rng.normal(0.0, 0.1, size=(spec.seq_len, d)),
            "unembed": rng.normal(0.0, d ** -0.5, size=(d, spec.vocab)),
        }
        for layer in range(spec.layers):
            for module in MODULES_ALL:
                d_in, d_out = spec.module_dims(module)
                base[f"{layer}.{module}"] = rng.normal(0.0, d_in ** -0.5, size=(d_in, d_out))
        self.base_names = list(base)
        for name, arr in base.items():
            self.register_buffer(_buf(name), torch.from_numpy(arr.astype(np_dtype)))

        bank = init_bank(adapter.h, adapter.b, adapter.seed).values.astype(np_dtype)
        self.bank = nn.Parameter(torch.from_numpy(bank))
        self.entries: list[LogitEntry] = []
        self.logits = nn.ParameterList()
        for layer in range(spec.layers):
            for module in adapter.module_names():
                d_in, d_out = spec.module_dims(module)
                for side, d_dim in (("A", d_in), ("B", d_out)):
                    entry = LogitEntry(layer, module, side, d_dim)
                    seed = _derive_seed(adapter.seed, len(self.entries) + 1)
                    lg = init_logits(d_dim, adapter.r, adapter.h, seed, b=adapter.b, side=side,
                                     std=adapter.logits_std)
                    self.entries.append(entry)
                    self.logits.append(nn.Parameter(torch.from_numpy(lg.values.astype(np_dtype))))

    # -- bookkeeping -------------------------------------------------------

    def base_weight(self, name: str) -> torch.Tensor:
        return getattr(self, _buf(name))

    def base_state(self) -> dict[str, np.ndarray]:
        return {name: self.base_weight(name).detach().numpy().copy() for name in self.base_names}

    def base_checksum(self) -> str:
        digest = hashlib.sha256()
        for name in self.base_names:
            digest.update(name.encode())
            digest.update(self.base_weight(name).detach().numpy().tobytes())
        return digest.hexdigest()

    def geometry(self) -> ModelGeometry:
        names = self.adapter.module_names()
        return ModelGeometry(
            L=self.spec.layers, M=len(names), d=self.spec.hidden, N_h=self.spec.heads,
            c=self.spec.ffn_factor, modules=tuple(self.spec.module_dims(m) for m in names),
        )

    def num_subvectors(self) -> int:
        return sum(lg.shape[0] * lg.shape[1] for lg in self.logits)

    def trainable_census(self) -> dict[str, int]:
        bank = self.bank.numel()
        logits = sum(p.numel() for p in self.logits)
        base = sum(self.base_weight(n).numel() for n in self.base_names)
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return {"bank": bank, "logits": logits, "trainable": trainable, "base_frozen": base,
                "base_trainable": 0}

    def logits_state(self) -> dict[tuple[int, str, str], np.ndarray]:
        return {e.key: p.detach().numpy().copy() for e, p in zip(self.entries, self.logits)}

    def flat_logits(self) -> torch.Tensor:
        return torch.cat([p.reshape(-1, self.adapter.h) for p in self.logits])

    def current_selection(self) -> np.ndarray:
        """Noise-free selected indices per sub-vector, shape ``(S, k_eval)``."""
        k = self.adapter.h if self.adapter.policy.kind is SelectionKind.SELECT_ALL else self.adapter.policy.eval_k
        return topk_indices(self.flat_logits().detach().numpy(), k)

    def export(self, config: Optional[dict] = None) -> adapter_store.StoredAdapter:
        k = self.adapter.policy.eval_k
        if self.adapter.policy.kind is SelectionKind.SELECT_ALL:
            k = self.adapter.h
        return adapter_store.export(self.bank.detach().numpy(), self.logits_state(), k, config)

    # -- forward -----------------------------------------------------------

    def compose(self, rng: Optional[np.random.Generator] = None, train: bool = True):
        """``{(layer, module): (A, B)}`` as torch tensors tracking gradients."""
        h, b = self.adapter.h, self.adapter.b
        flat = self.flat_logits()
        np_dtype = self.bank.detach().numpy().dtype
        if train:
            sel = train_selection(self.adapter.policy, flat.detach().numpy(), rng, dtype=np_dtype)
        else:
            sel = infer_selection(self.adapter.policy, flat.detach().numpy(), dtype=np_dtype)
        sub = _BankAdmix.apply(self.bank, flat, sel)
        out: dict[tuple[int, str], dict[str, torch.Tensor]] = {}
        start = 0
        for entry, p in zip(self.entries, self.logits):
            n, r, _ = p.shape
            grid = sub[start:start + n * r].reshape(n, r, b)
            start += n * r
            if entry.side == "A":
                mat = grid.transpose(0, 1).reshape(r, -1)
            else:
                mat = grid.transpose(1, 2).reshape(-1, r)
            out.setdefault((entry.layer, entry.module), {})[entry.side] = mat
        return {key: (v["A"], v["B"]) for key, v in out.items()}

    def _linear(self, x, layer, module, factors):
        y = x @ self.base_weight(f"{layer}.{module}")
        if (layer, module) in factors:
            A, B = factors[(layer, module)]
            y = y + (x @ A.T) @ B.T
        return y

    def forward(self, tokens: torch.Tensor, rng=None, train: bool = True, adapters: bool = True):
        spec = self.spec
        factors = self.compose(rng, train) if adapters else {}
        n, t = tokens.shape
        d, nh = spec.hidden, spec.heads
        hd = d // nh
        x = self.base_weight("embed")[tokens] + self.base_weight("pos")[:t]
        mask = torch.ones(t, t, dtype=torch.bool).tril()
        for layer in range(spec.layers):
            a = F.layer_norm(x, (d,))
            q = self._linear(a, layer, "q", factors).reshape(n, t, nh, hd).transpose(1, 2)
            k = self._linear(a, layer, "k", factors).reshape(n, t, nh, hd).transpose(1, 2)
            v = self._linear(a, layer, "v", factors).reshape(n, t, nh, hd).transpose(1, 2)
            att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
            att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
            ctx = (att @ v).transpose(1, 2).reshape(n, t, d)
            x = x + self._linear(ctx, layer, "o", factors)
            f = F.layer_norm(x, (d,))
            x = x + self._linear(torch.relu(self._linear(f, layer, "up", factors)), layer, "down", factors)
        return F.layer_norm(x, (d,)) @ self.base_weight("unembed")

    def loss(self, tokens, targets, rng=None, train: bool = True, adapters: bool = True) -> torch.Tensor:
        logits = self.forward(tokens, rng=rng, train=train, adapters=adapters)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def _buf(name: str) -> str:
    return "base_" + name.replace(".", "_")


def randomize_adapters(model: TinyVBLoRAModel, seed: int, bank_scale: float = 1.0,
                       logit_scale: float = 1.0) -> None:
    """Overwrite bank and logits with standard-normal draws (scaled).

    Used to build well-conditioned gradient-check instances: at the training
    initialization the bank is so small that logit gradients sit near the
    finite-difference noise floor.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    with torch.no_grad():
        model.bank.copy_(torch.from_numpy(rng.normal(0.0, bank_scale, size=tuple(model.bank.shape))))
        for p in model.logits:
            p.copy_(torch.from_numpy(rng.normal(0.0, logit_scale, size=tuple(p.shape))))


def build_model(spec: TinyTransformerSpec, adapter: AdapterConfig, dtype=torch.float32) -> TinyVBLoRAModel:
    return TinyVBLoRAModel(spec, adapter, dtype=dtype)


# ---------------------------------------------------------------------------
# optimization


def make_optimizer(model: TinyVBLoRAModel, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = [
        {"params": [model.bank], "lr": cfg.lr_bank, "name": "bank"},
        {"params": list(model.logits), "lr": cfg.lr_logits, "name": "logits"},
    ]
    return torch.optim.AdamW(
        groups, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def linear_schedule(steps: int, warmup_ratio: float):
    warmup = int(math.ceil(warmup_ratio * steps))

    def factor(step: int) -> float:
        if warmup and step < warmup:
            return (step + 1) / warmup
        return max(0.0, (steps - step) / max(1, steps - warmup))

    return factor


@contextmanager
def single_threaded() -> Iterator[None]:
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


# ---------------------------------------------------------------------------
# footprints


FOOTPRINT_MAGIC = b"VBFP"
FOOTPRINT_VERSION = 1
_FP_HEADER = struct.Struct("<4sHIIHI")


class FootprintFormatError(ValueError):
    pass


@dataclass
class FootprintLog:
    """Selected bank indices per sub-vector at every recorded step.

    ``selections[i]`` has shape ``(S, k)``; ``new_selections[i]`` counts the
    (sub-vector, bank row) pairs first seen at record ``i`` (record 0 is the
    initialization).
    """

    h: int
    k: int
    steps: list[int] = field(default_factory=list)
    selections: list[np.ndarray] = field(default_factory=list)
    new_selections: list[int] = field(default_factory=list)
    mask: Optional[np.ndarray] = None

    def record(self, step: int, selected: np.ndarray) -> int:
        selected = np.asarray(selected)
        if selected.size and int(selected.max()) >= self.h:
            raise ValueError("selected index out of range")
        current = np.zeros((selected.shape[0], self.h), dtype=bool)
        np.put_along_axis(current, selected.astype(np.intp), True, axis=1)
        if self.mask is None:
            self.mask = np.zeros_like(current)
        fresh = int(np.count_nonzero(current & ~self.mask))
        self.mask |= current
        self.steps.append(int(step))
        self.selections.append(selected.astype(np.uint16))
        self.new_selections.append(fresh)
        return fresh

    @property
    def num_subvectors(self) -> int:
        return 0 if self.mask is None else self.mask.shape[0]

    def selection_sets(self) -> np.ndarray:
        """Boolean ``(T, S, h)`` membership of every record."""
        out = np.zeros((len(self.selections), self.num_subvectors, self.h), dtype=bool)
        for i, sel in enumerate(self.selections):
            np.put_along_axis(out[i], sel.astype(np.intp), True, axis=1)
        return out

    def changed_subvectors(self) -> int:
        """Sub-vectors whose selected set differs from the initial one at some record."""
        sets = self.selection_sets()
        if len(sets) == 0:
            return 0
        return int(np.count_nonzero(np.any(sets != sets[:1], axis=(0, 2))))

    def to_bytes(self) -> bytes:
        S = self.num_subvectors
        parts = [_FP_HEADER.pack(FOOTPRINT_MAGIC, FOOTPRINT_VERSION, S, self.h, self.k, len(self.steps))]
        for step, members in zip(self.steps, self.selection_sets()):
            parts.append(struct.pack("<I", step))
            parts.append(np.packbits(members.reshape(-1), bitorder="little").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "FootprintLog":
        if len(data) < _FP_HEADER.size + 4 or data[:4] != FOOTPRINT_MAGIC:
            raise FootprintFormatError("not a footprint file")
        magic, version, S, h, k, n = _FP_HEADER.unpack_from(data, 0)
        if version != FOOTPRINT_VERSION:
            raise FootprintFormatError(f"unsupported footprint version {version}")
        page = (S * h + 7) // 8
        expected = _FP_HEADER.size + n * (4 + page) + 4
        if len(data) != expected:
            raise FootprintFormatError(f"footprint size {len(data)} != expected {expected}")
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise FootprintFormatError("footprint CRC32 mismatch")
        out = cls(h=h, k=k)
        pos = _FP_HEADER.size
        for _ in range(n):
            (step,) = struct.unpack_from("<I", data, pos)
            bits = np.frombuffer(data, dtype=np.uint8, count=page, offset=pos + 4)
            members = np.unpackbits(bits, count=S * h, bitorder="little").reshape(S, h).astype(bool)
            pos += 4 + page
            counts = members.sum(axis=1)
            if np.any(counts != k):
                raise FootprintFormatError("record does not select exactly k rows per sub-vector")
            out.record(step, np.nonzero(members)[1].reshape(S, k))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "subvector", "indices"])
            for step, sel in zip(self.steps, self.selections):
                for j, row in enumerate(sel):
                    w.writerow([step, j, " ".join(str(int(i)) for i in row)])


def usage_histogram(source, h: Optional[int] = None) -> np.ndarray:
    """Number of sub-vectors selecting each bank row.

    ``source`` is a :class:`FootprintLog` (final record is used), a model, or
    an ``(S, k)`` index array (then ``h`` is required).
    """
    if isinstance(source, FootprintLog):
        selected, h = source.selections[-1], source.h
    elif isinstance(source, TinyVBLoRAModel):
        selected, h = source.current_selection(), source.adapter.h
    else:
        selected = np.asarray(source)
        if h is None:
            raise ValueError("h is required for a raw index array")
    return np.bincount(np.asarray(selected, dtype=np.intp).reshape(-1), minlength=h)


def footprint_density(log: FootprintLog, window: int, include_initial: bool = True) -> list[int]:
    """New-selection counts summed over consecutive windows of ``window`` records."""
    if window < 1:
        raise ValueError("window must be positive")
    counts = log.new_selections if include_initial else log.new_selections[1:]
    return [int(sum(counts[i:i + window])) for i in range(0, len(counts), window)]


def quartile_new_selections(log: FootprintLog) -> tuple[int, int]:
    """New selections in the first and last quarter of training (initialization excluded)."""
    counts = np.asarray(log.new_selections[1:])
    q = len(counts) // 4
    if q == 0:
        return 0, 0
    return int(counts[:q].sum()), int(counts[-q:].sum())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    """Outcome of :func:`train`.

    ``losses`` is the per-step training loss trajectory; ``initial_loss`` and
    ``final_loss`` are measured on a fixed held-out batch with noise-free
    selection, before the first and after the last step.
    """

    losses: list[float]
    initial_loss: float
    final_loss: float
    footprint: FootprintLog
    base_checksum_before: str
    base_checksum_after: str
    metrics: list[dict] = field(default_factory=list)

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "new_selections"])
            w.writeheader()
            for row in self.metrics:
                w.writerow({"step": row["step"], "loss": repr(row["loss"]),
                            "new_selections": row["new_selections"]})


def eval_loss(model: TinyVBLoRAModel, task: PermutationCopyTask, seed: int, batch: int = 256,
              adapters: bool = True) -> float:
    tokens, targets = task.batch(np.random.default_rng(seed), batch)
    with torch.no_grad():
        return float(model.loss(tokens, targets, train=False, adapters=adapters))


def train(
    model: TinyVBLoRAModel,
    task: PermutationCopyTask,
    cfg: TrainConfig,
    eval_batch: int = 256,
) -> TrainResult:
    """Optimize bank and logits with two-group AdamW; the base weights never change."""
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    sel_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    eval_seed = _derive_seed(cfg.seed, 3)
    before = model.base_checksum()
    footprint = FootprintLog(h=model.adapter.h, k=model.current_selection().shape[1])

    with single_threaded():
        opt = make_optimizer(model, cfg)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, linear_schedule(cfg.steps, cfg.warmup_ratio))
        initial = eval_loss(model, task, eval_seed, eval_batch)
        footprint.record(0, model.current_selection())
        losses: list[float] = []
        metrics = [{"step": 0, "loss": initial, "new_selections": footprint.new_selections[0]}]
        for step in range(1, cfg.steps + 1):
            tokens, targets = task.batch(data_rng, cfg.batch_size)
            opt.zero_grad(set_to_none=True)
            loss = model.loss(tokens, targets, rng=sel_rng, train=True)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            loss.backward()
            opt.step()
            sched.step()
            fresh = 0
            if step % cfg.footprint_every == 0 or step == cfg.steps:
                fresh = footprint.record(step, model.current_selection())
            losses.append(value)
            metrics.append({"step": step, "loss": value, "new_selections": fresh})
            if step % 100 == 0:
                log.info("step %d loss %.4f", step, value)
        final = eval_loss(model, task, eval_seed, eval_batch)
    log.info("held-out loss %.4f -> %.4f", initial, final)
    return TrainResult(losses, initial, final, footprint, before, model.base_checksum(), metrics)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Result of :func:`grad_check`.

    A component passes when ``|analytic - fd| <= tolerance * max(|analytic|, |fd|) + floor``
    where ``floor`` is the finite-difference roundoff resolution
    ``16 * eps_machine * |loss| / (2 * step)``. ``max_rel_error`` is taken over
    components whose magnitude is large enough for a relative comparison to
    be meaningful (``max(|a|, |fd|) >= floor / tolerance``).
    """

    max_rel_error: float
    max_abs_error: float
    num_checked: int
    bank_max_rel_error: float
    logit_max_rel_error: float
    unselected_max_analytic: float
    unselected_max_fd: float
    num_unselected: int
    fd_floor: float
    boundary_excluded: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(
    model: TinyVBLoRAModel,
    task: PermutationCopyTask,
    tolerance: float = 1e-6,
    eps: float = 1e-4,
    batch_size: int = 4,
    seed: int = 0,
    unselected_tol: float = 1e-10,
) -> GradCheckReport:
    """Compare autograd (through the hand-derived admixture backward) with central differences.

    Runs in float64. Every bank entry and every logit is perturbed by
    ``eps * max(1, |value|)``; perturbations that change any top-k selection
    are reported and excluded. Selected logits and bank entries are compared
    with the finite differences; unselected logits must have an analytic
    gradient of exactly zero and a finite difference below ``unselected_tol``.
    """
    if model.dtype != torch.float64:
        raise ValueError("grad_check needs a float64 model")
    kind = model.adapter.policy.kind
    if kind is SelectionKind.ST_GS:
        raise ValueError("straight-through gradients are biased by design; nothing to check")
    tokens, targets = task.batch(np.random.default_rng(seed), batch_size)
    sel_seed = _derive_seed(seed, 11)
    eps_machine = float(np.finfo(np.float64).eps)

    def loss_fn() -> torch.Tensor:
        rng = np.random.default_rng(sel_seed) if kind in STOCHASTIC else None
        return model.loss(tokens, targets, rng=rng, train=True)

    def fd(param: torch.Tensor, index: tuple, step: float) -> tuple[float, float]:
        with torch.no_grad():
            orig = float(param[index])
            param[index] = orig + step
            plus = float(loss_fn())
            param[index] = orig - step
            minus = float(loss_fn())
            param[index] = orig
        floor = 16 * eps_machine * max(abs(plus), abs(minus)) / (2 * step)
        return (plus - minus) / (2 * step), floor

    stats = {"bank": 0.0, "logit": 0.0, "abs": 0.0, "floor": 0.0}
    failures: list[str] = []

    def compare(label: str, group: str, a: float, f: float, floor: float) -> None:
        diff = abs(a - f)
        mag = max(abs(a), abs(f))
        stats["abs"] = max(stats["abs"], diff)
        stats["floor"] = max(stats["floor"], floor)
        if mag >= floor / tolerance and mag > 0:
            stats[group] = max(stats[group], diff / mag)
        if diff > tolerance * mag + floor:
            failures.append(f"{label}: analytic {a:.9e} fd {f:.9e}")

    with single_threaded():
        model.zero_grad(set_to_none=True)
        loss_fn().backward()
        bank_grad = model.bank.grad.detach().numpy().copy()
        logit_grads = [p.grad.detach().numpy().copy() for p in model.logits]

        for index in np.ndindex(*bank_grad.shape):
            step = eps * max(1.0, abs(float(model.bank.detach()[index])))
            g, floor = fd(model.bank, index, step)
            compare(f"bank{index}", "bank", float(bank_grad[index]), g, floor)

        h = model.adapter.h
        k_sel = h if kind in (SelectionKind.SELECT_ALL, SelectionKind.GS) else model.adapter.k
        excluded: list[str] = []
        un_a, un_f, n_un, n_checked = 0.0, 0.0, 0, bank_grad.size
        for entry, param, grad in zip(model.entries, model.logits, logit_grads):
            values = param.detach().numpy().copy()
            selected = topk_indices(values, k_sel)
            for j, i in np.ndindex(*values.shape[:2]):
                chosen = set(int(s) for s in selected[j, i])
                for s in range(h):
                    index = (j, i, s)
                    step = eps * max(1.0, abs(float(values[index])))
                    if kind is not SelectionKind.NOISY_TOPK and _crosses_boundary(values[j, i], s, step, k_sel):
                        excluded.append(f"{entry.name}[{j},{i},{s}]")
                        continue
                    g, floor = fd(param, index, step)
                    a = float(grad[index])
                    if s in chosen or kind is SelectionKind.NOISY_TOPK:
                        n_checked += 1
                        compare(f"{entry.name}{index}", "logit", a, g, floor)
                    else:
                        n_un += 1
                        un_a, un_f = max(un_a, abs(a)), max(un_f, abs(g))
                        if a != 0.0 or abs(g) > unselected_tol:
                            failures.append(f"{entry.name}{index}: unselected analytic {a!r} fd {g:.3e}")
    return GradCheckReport(
        max_rel_error=max(stats["bank"], stats["logit"]),
        max_abs_error=stats["abs"],
        num_checked=n_checked,
        bank_max_rel_error=stats["bank"],
        logit_max_rel_error=stats["logit"],
        unselected_max_analytic=un_a,
        unselected_max_fd=un_f,
        num_unselected=n_un,
        fd_floor=stats["floor"],
        boundary_excluded=excluded,
        failures=failures,
    )


def _crosses_boundary(sigma: np.ndarray, s: int, step: float, k: int) -> bool:
    base = set(topk_indices(sigma, k).tolist())
    for delta in (step, -step):
        moved = sigma.copy()
        moved[s] += delta
        if set(topk_indices(moved, k).tolist()) != base:
            return True
    return False
