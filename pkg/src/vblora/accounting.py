"""Trainable and stored parameter counts for full FT, LoRA, VeRA and VB-LoRA.

Stored VB-LoRA parameters are counted as float32 equivalents: bank and
admixture weights are 4-byte floats, indices are packed unsigned integers of
``index_bytes`` each, and the total byte count is divided by 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

FLOAT_BYTES = 4


@dataclass(frozen=True)
class ModelGeometry:
    """Transformer shape as far as adapter counting is concerned.

    ``modules`` lists ``(d_in, d_out)`` for every adapted matrix in one layer.
    When omitted, the layer has ``M`` square ``d x d`` modules.
    """

    L: int
    M: int
    d: int
    N_h: int = 1
    c: int = 4
    modules: Optional[tuple[tuple[int, int], ...]] = None

    def __post_init__(self) -> None:
        if self.modules is not None:
            mods = tuple((int(a), int(b)) for a, b in self.modules)
            object.__setattr__(self, "modules", mods)
            object.__setattr__(self, "M", len(mods))
        for name in ("L", "M", "d", "N_h", "c"):
            if getattr(self, name) < 1:
                raise ValueError(f"geometry field {name} must be a positive integer")
        if any(a < 1 or b < 1 for a, b in self.layer_modules()):
            raise ValueError("module dimensions must be positive")

    def layer_modules(self) -> tuple[tuple[int, int], ...]:
        if self.modules is not None:
            return self.modules
        return ((self.d, self.d),) * self.M

    def check_divisible(self, b: int) -> None:
        for d_in, d_out in self.layer_modules():
            for dim in (d_in, d_out):
                if dim % b:
                    raise ValueError(f"module dimension {dim} is not divisible by b={b}")

    def num_subvectors(self, b: int, r: int) -> int:
        """Sub-vectors over all layers, modules and both factor sides."""
        self.check_divisible(b)
        per_layer = sum(r * (d_in // b + d_out // b) for d_in, d_out in self.layer_modules())
        return self.L * per_layer


@dataclass
class CountReport:
    method: str
    trainable_params: int
    stored_params_float32_equiv: float
    breakdown: dict = field(default_factory=dict)
    note: str = ""

    @property
    def stored(self) -> float:
        return self.stored_params_float32_equiv


def count_full_ft(geom: ModelGeometry) -> CountReport:
    n = geom.L * sum(d_in * d_out for d_in, d_out in geom.layer_modules())
    return CountReport("FT", n, float(n), {"weights": n}, note="adapted matrices only (L*M*d^2)")


def count_lora(geom: ModelGeometry, r: int) -> CountReport:
    if r < 0:
        raise ValueError(f"rank must be nonnegative, got {r}")
    a = geom.L * sum(r * d_in for d_in, _ in geom.layer_modules())
    b = geom.L * sum(r * d_out for _, d_out in geom.layer_modules())
    return CountReport("LoRA", a + b, float(a + b), {"A": a, "B": b})


def count_vera(geom: ModelGeometry, r: int) -> CountReport:
    if r < 0:
        raise ValueError(f"rank must be nonnegative, got {r}")
    out_scale = geom.L * sum(d_out for _, d_out in geom.layer_modules())
    rank_scale = geom.L * geom.M * r
    n = out_scale + rank_scale
    return CountReport("VeRA", n, float(n), {"scale_out": out_scale, "scale_rank": rank_scale})


def default_index_bytes(h: int) -> int:
    if h <= 256:
        return 1
    if h <= 65536:
        return 2
    raise ValueError(f"bank size h={h} exceeds the 16-bit index limit")


def count_vblora_trainable(geom: ModelGeometry, h: int, b: int, r: int) -> CountReport:
    n_sub = geom.num_subvectors(b, r)
    bank = h * b
    logits = n_sub * h
    return CountReport(
        "VB-LoRA",
        bank + logits,
        float(bank + logits),
        {"bank": bank, "logits": logits, "subvectors": n_sub},
    )


def vblora_stored_bytes(
    geom: ModelGeometry, h: int, b: int, r: int, k: int, index_bytes: int
) -> dict:
    """Byte counts of the stored triplet (bank, indices, k-1 weights)."""
    if index_bytes not in (1, 2):
        raise ValueError(f"index_bytes must be 1 or 2, got {index_bytes}")
    if index_bytes == 1 and h > 256:
        raise ValueError(f"index_bytes=1 cannot address a bank of h={h} > 256 vectors")
    if index_bytes == 2 and h > 65536:
        raise ValueError(f"index_bytes=2 cannot address a bank of h={h} > 65536 vectors")
    if not 1 <= k <= h:
        raise ValueError(f"k must satisfy 1 <= k <= h={h}, got k={k}")
    n_sub = geom.num_subvectors(b, r)
    return {
        "bank": FLOAT_BYTES * h * b,
        "indices": n_sub * k * index_bytes,
        "weights": n_sub * (k - 1) * FLOAT_BYTES,
        "subvectors": n_sub,
    }


def count_vblora_stored(
    geom: ModelGeometry, h: int, b: int, r: int, k: int = 2, index_bytes: Optional[int] = None
) -> CountReport:
    if index_bytes is None:
        index_bytes = default_index_bytes(h)
    nbytes = vblora_stored_bytes(geom, h, b, r, k, index_bytes)
    total = nbytes["bank"] + nbytes["indices"] + nbytes["weights"]
    trainable = count_vblora_trainable(geom, h, b, r).trainable_params
    breakdown = {
        "bank": nbytes["bank"] / FLOAT_BYTES,
        "indices": nbytes["indices"] / FLOAT_BYTES,
        "weights": nbytes["weights"] / FLOAT_BYTES,
        "payload_bytes": total,
    }
    return CountReport("VB-LoRA", trainable, total / FLOAT_BYTES, breakdown)


def closed_form_stored(geom: ModelGeometry, h: int, b: int, r: int) -> int:
    """``hb + 3LMr(d/b)`` for square modules: k = 2 with uint8 indices."""
    return h * b + 3 * geom.L * geom.M * r * (geom.d // b)


# ---------------------------------------------------------------------------
# presets


def _llama_modules(d: int, ffn: int) -> tuple[tuple[int, int], ...]:
    return ((d, d),) * 4 + ((d, ffn), (d, ffn), (ffn, d))


def _all_modules(d: int, c: int = 4) -> tuple[tuple[int, int], ...]:
    return ((d, d),) * 4 + ((d, c * d), (c * d, d))


@dataclass(frozen=True)
class Preset:
    name: str
    geometry: ModelGeometry
    h: int
    b: int
    r: int
    k: int = 2
    lora_r: Optional[int] = None
    vera_r: Optional[int] = None
    model_size: str = ""
    # published parameter column, for annotation only
    reported: dict = field(default_factory=dict)


PRESETS: dict[str, Preset] = {
    p.name: p
    for p in [
        Preset(
            "roberta-base-qv", ModelGeometry(L=12, M=2, d=768, N_h=12), h=90, b=256, r=4,
            lora_r=8, vera_r=1024, model_size="125M",
            reported={"LoRA": "0.295M", "VeRA": "0.043M", "VB-LoRA": "0.023M"},
        ),
        Preset(
            "roberta-base-all", ModelGeometry(L=12, M=6, d=768, N_h=12, modules=_all_modules(768)),
            h=90, b=256, r=4, vera_r=1024, model_size="125M",
            reported={"VeRA": "0.157M", "VB-LoRA": "0.027M"},
        ),
        Preset(
            "roberta-large-qv", ModelGeometry(L=24, M=2, d=1024, N_h=16), h=90, b=256, r=4,
            lora_r=8, vera_r=256, model_size="355M",
            reported={"LoRA": "0.786M", "VeRA": "0.061M", "VB-LoRA": "0.024M"},
        ),
        Preset(
            "roberta-large-all",
            ModelGeometry(L=24, M=6, d=1024, N_h=16, modules=_all_modules(1024)),
            h=90, b=256, r=4, vera_r=256, model_size="355M",
            reported={"VeRA": "0.258M", "VB-LoRA": "0.033M"},
        ),
        Preset(
            "gpt2-medium", ModelGeometry(L=24, M=6, d=1024, N_h=16, modules=_all_modules(1024)),
            h=256, b=256, r=4, model_size="354.92M",
            reported={"LoRA": "0.35M", "VeRA": "0.098M", "VB-LoRA": "0.076M"},
        ),
        Preset(
            "gpt2-large", ModelGeometry(L=36, M=6, d=1280, N_h=20, modules=_all_modules(1280)),
            h=350, b=256, r=4, model_size="774.03M",
            reported={"LoRA": "0.77M", "VeRA": "0.17M", "VB-LoRA": "0.13M"},
        ),
        Preset(
            "llama2-7b", ModelGeometry(L=32, M=7, d=4096, N_h=32, modules=_llama_modules(4096, 11008)),
            h=2048, b=256, r=4, lora_r=64, model_size="7B",
            reported={"LoRA": "159.9M", "VeRA": "1.6M", "VB-LoRA": "0.8M"},
        ),
        Preset(
            "llama2-13b",
            ModelGeometry(L=40, M=7, d=5120, N_h=40, modules=_llama_modules(5120, 13824)),
            h=2048, b=256, r=6, lora_r=64, model_size="13B",
            reported={"LoRA": "250.3M", "VeRA": "2.4M", "VB-LoRA": "1.1M"},
        ),
    ]
}


def preset_reports(preset: Preset, index_bytes: Optional[int] = None) -> list[CountReport]:
    geom = preset.geometry
    ft = count_full_ft(geom)
    if preset.model_size:
        ft.note = f"adapted matrices only; reported model size {preset.model_size}"
    reports = [ft]
    if preset.lora_r is not None:
        reports.append(count_lora(geom, preset.lora_r))
    if preset.vera_r is not None:
        reports.append(count_vera(geom, preset.vera_r))
    reports.append(count_vblora_stored(geom, preset.h, preset.b, preset.r, preset.k, index_bytes))
    for rep in reports:
        published = preset.reported.get(rep.method)
        if published:
            mark = "" if matches_reported(rep.stored, published) else " (formula value differs)"
            rep.note = (rep.note + "; " if rep.note else "") + f"reported: {published}{mark}"
    return reports


def matches_reported(value: float, reported: str) -> bool:
    """Whether ``value`` rounds or truncates to a figure like ``"0.295M"``.

    The comparison uses the number of decimals printed in ``reported``.
    """
    text = reported.strip().rstrip("M")
    decimals = len(text.split(".")[1]) if "." in text else 0
    target = round(float(text), decimals)
    millions = value / 1e6
    scale = 10 ** decimals
    rounded = round(millions, decimals)
    truncated = math.floor(millions * scale + 1e-9) / scale
    return math.isclose(rounded, target) or math.isclose(truncated, target)


def format_millions(n: float) -> str:
    return f"{n / 1e6:.3f}M"


def report_table(reports: Sequence[CountReport]) -> str:
    rows = [("method", "trainable", "stored", "breakdown", "note")]
    for rep in reports:
        parts = ", ".join(f"{k}={_fmt(v)}" for k, v in rep.breakdown.items())
        rows.append(
            (rep.method, f"{rep.trainable_params:,}", _fmt(rep.stored), parts, rep.note)
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows
    )


def _fmt(v: float) -> str:
    if float(v).is_integer():
        return f"{int(v):,}"
    return f"{v:,.2f}"
