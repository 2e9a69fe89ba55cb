"""Flat ``key = value`` run configuration.

One file configures model geometry, adapter, selection policy, optimizer and
grad-check settings. Unknown keys and unparsable values raise
:class:`ConfigError` naming the key.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from .harness import AdapterConfig, TinyTransformerSpec, TrainConfig
from .variants import SelectionKind, SelectionPolicy


class ConfigError(ValueError):
    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"config key '{key}': {message}")
        self.key = key


def _optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _modules(raw: str) -> str:
    if raw not in ("qv", "all"):
        raise ValueError("expected 'qv' or 'all'")
    return raw


def _selection(raw: str) -> str:
    return SelectionKind(raw).value


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    # model
    "layers": (int, 2),
    "hidden": (int, 64),
    "heads": (int, 2),
    "ffn_factor": (int, 4),
    "vocab": (int, 32),
    "seq_len": (int, 16),
    # adapter
    "h": (int, 32),
    "b": (int, 16),
    "r": (int, 2),
    "k": (int, 2),
    "selection": (_selection, "topk"),
    "tau": (float, 1.0 / 3.0),
    "inference_k": (_optional_int, None),
    "noise_scale": (float, 1.0),
    "adapted_modules": (_modules, "all"),
    "logits_std": (float, 0.01),
    # optimizer
    "lr_bank": (float, 1e-3),
    "lr_logits": (float, 1e-2),
    "weight_decay": (float, 0.0),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "warmup_ratio": (float, 0.06),
    "steps": (int, 500),
    "batch_size": (int, 32),
    "footprint_every": (int, 1),
    # gradient check
    "grad_eps": (float, 1e-4),
    "grad_tol": (float, 1e-6),
    "grad_batch": (int, 4),
    "grad_bank_scale": (float, 0.1),
    "grad_logit_scale": (float, 1.0),
}

PRESETS: dict[str, dict[str, Any]] = {
    # acceptance-scale training run
    "desk": {},
    # gradient-check scale
    "tiny": {
        "layers": 1, "hidden": 8, "heads": 2, "vocab": 8, "seq_len": 4,
        "h": 6, "b": 4, "r": 2, "k": 2, "steps": 20, "batch_size": 4,
    },
}


def defaults() -> dict[str, Any]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def parse_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not of the form key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        parser, _ = SCHEMA[key]
        try:
            out[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from exc
    return out


def load(path) -> dict[str, Any]:
    return parse_text(Path(path).read_text(encoding="utf-8"))


def resolve(
    path=None, preset: Optional[str] = None, seed: Optional[int] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> dict[str, Any]:
    """Defaults < preset < config file < overrides < ``seed``."""
    cfg = defaults()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if path is not None:
        cfg.update(load(path))
    if overrides:
        cfg.update(overrides)
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    positive = ["layers", "hidden", "heads", "ffn_factor", "vocab", "seq_len", "h", "b", "r", "k",
                "batch_size", "footprint_every", "grad_batch"]
    for key in positive:
        if cfg[key] < 1:
            raise ConfigError(key, f"must be a positive integer, got {cfg[key]}")
    for key in ("lr_bank", "lr_logits"):
        if cfg[key] < 0:
            raise ConfigError(key, "learning rate must be nonnegative")
    if cfg["steps"] < 0:
        raise ConfigError("steps", "must be nonnegative")
    if cfg["hidden"] % cfg["heads"]:
        raise ConfigError("heads", f"hidden={cfg['hidden']} is not divisible by heads={cfg['heads']}")
    for dim in (cfg["hidden"], cfg["ffn_factor"] * cfg["hidden"]):
        if dim % cfg["b"]:
            raise ConfigError("b", f"model dimension {dim} is not divisible by b={cfg['b']}")
    if cfg["k"] > cfg["h"]:
        raise ConfigError("k", f"k={cfg['k']} exceeds bank size h={cfg['h']}")
    if cfg["inference_k"] is not None and cfg["inference_k"] > cfg["h"]:
        raise ConfigError("inference_k", f"exceeds bank size h={cfg['h']}")
    if cfg["selection"] in ("gs", "st_gs") and cfg["tau"] <= 0:
        raise ConfigError("tau", "must be positive for Gumbel selection")
    if cfg["noise_scale"] < 0:
        raise ConfigError("noise_scale", "must be nonnegative")


def policy(cfg: Mapping[str, Any]) -> SelectionPolicy:
    return SelectionPolicy.from_config(cfg)


def model_spec(cfg: Mapping[str, Any]) -> TinyTransformerSpec:
    return TinyTransformerSpec(
        layers=cfg["layers"], hidden=cfg["hidden"], heads=cfg["heads"], ffn_factor=cfg["ffn_factor"],
        vocab=cfg["vocab"], seq_len=cfg["seq_len"], seed=cfg["seed"],
    )


def adapter_config(cfg: Mapping[str, Any]) -> AdapterConfig:
    return AdapterConfig(
        h=cfg["h"], b=cfg["b"], r=cfg["r"], policy=policy(cfg),
        adapted_modules=cfg["adapted_modules"], seed=cfg["seed"], logits_std=cfg["logits_std"],
    )


def train_config(cfg: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(
        lr_bank=cfg["lr_bank"], lr_logits=cfg["lr_logits"], weight_decay=cfg["weight_decay"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"], warmup_ratio=cfg["warmup_ratio"],
        steps=cfg["steps"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        footprint_every=cfg["footprint_every"],
    )


def dumps(cfg: Mapping[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        lines.append(f"{key} = {'none' if value is None else repr(value) if isinstance(value, float) else value}")
    return "\n".join(lines) + "\n"
