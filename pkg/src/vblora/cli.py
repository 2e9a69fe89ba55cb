"""``vblora`` command line: train, grad-check, count, export, merge, inspect, footprint.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure
(divergence, I/O, corrupted files). Every command writes
``resolved-config.txt`` to ``--out`` before doing any work.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import zipfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import accounting, adapter_store, config, harness
from .core import ComposedFactors, merge_weight

log = logging.getLogger("vblora")

COMMANDS = ("train", "grad-check", "count", "export", "merge", "inspect", "footprint")
DEFAULT_OUT = "vblora-out"
LOG_FILE = "vblora.log"
# fixed zip member timestamp keeps state files byte-identical across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path(DEFAULT_OUT), help="output directory")
    common.add_argument("--preset", help="named preset")
    common.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")

    parser = _Parser(prog="vblora", description="VB-LoRA adapters over a shared vector bank.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train adapters on the desk-scale task")
    sub.add_parser("grad-check", parents=[common], help="analytic vs finite-difference gradients")
    sub.add_parser("count", parents=[common], help="parameter accounting")
    p = sub.add_parser("export", parents=[common], help="freeze a training state into a .vbla file")
    p.add_argument("state", type=Path)
    p = sub.add_parser("merge", parents=[common], help="fold an adapter into dense base weights")
    p.add_argument("adapter", type=Path)
    p = sub.add_parser("inspect", parents=[common], help="print a .vbla header and per-module stats")
    p.add_argument("adapter", type=Path)
    p = sub.add_parser("footprint", parents=[common], help="selection footprint analysis")
    p.add_argument("footprint", type=Path)
    p.add_argument("--window", type=int, default=50, help="records per density window")
    return parser


# ---------------------------------------------------------------------------
# plumbing


def _setup_logging(out: Path) -> logging.Handler:
    level = os.environ.get("VBLORA_LOG", "warning").upper()
    handler = logging.FileHandler(out / LOG_FILE, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("vblora")
    root.setLevel(getattr(logging, level, logging.WARNING))
    root.addHandler(handler)
    return handler


def _resolve(args, preset_is_config: bool = True, overrides: Optional[dict] = None) -> dict:
    preset = args.preset if preset_is_config else None
    return config.resolve(args.config, preset=preset, seed=args.seed, overrides=overrides)


def _write_snapshot(out: Path, cfg: dict, extra: Optional[dict] = None) -> None:
    text = config.dumps(cfg)
    if extra:
        text += "".join(f"# {k} = {v}\n" for k, v in sorted(extra.items()))
    (out / "resolved-config.txt").write_text(text, encoding="utf-8")


def _model(cfg: dict, dtype=torch.float32) -> harness.TinyVBLoRAModel:
    return harness.build_model(config.model_spec(cfg), config.adapter_config(cfg), dtype=dtype)


def _task(cfg: dict) -> harness.PermutationCopyTask:
    return harness.PermutationCopyTask(cfg["vocab"], cfg["seq_len"], seed=cfg["seed"])


def save_state(path: Path, model: harness.TinyVBLoRAModel, cfg: dict) -> None:
    """Bank, logits and the resolved config in an ``.npz`` with fixed timestamps."""
    arrays = {"bank": model.bank.detach().numpy()}
    for entry, p in zip(model.entries, model.logits):
        arrays[f"logits/{entry.layer}.{entry.module}.{entry.side}"] = p.detach().numpy()
    arrays["config_json"] = np.frombuffer(json.dumps(cfg, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH), buf.getvalue())


def load_state(path: Path) -> tuple[np.ndarray, dict, dict]:
    """``(bank, {(layer, module, side): logits}, config)``."""
    with np.load(path, allow_pickle=False) as data:
        bank = data["bank"]
        cfg = json.loads(bytes(data["config_json"]).decode()) if "config_json" in data.files else {}
        logits = {}
        for name in data.files:
            if name.startswith("logits/"):
                layer, module, side = name[len("logits/"):].split(".")
                logits[(int(layer), module, side)] = data[name]
    return bank, logits, cfg


def _load_state_into(model: harness.TinyVBLoRAModel, bank: np.ndarray, logits: dict) -> None:
    if tuple(bank.shape) != tuple(model.bank.shape):
        raise ValueError(f"state bank shape {bank.shape} does not match config {tuple(model.bank.shape)}")
    with torch.no_grad():
        model.bank.copy_(torch.from_numpy(bank))
        for entry, p in zip(model.entries, model.logits):
            if entry.key not in logits:
                raise ValueError(f"state lacks logits for {entry.name}")
            if logits[entry.key].shape != tuple(p.shape):
                raise ValueError(f"logits for {entry.name} have shape {logits[entry.key].shape}")
            p.copy_(torch.from_numpy(logits[entry.key]))


def _num(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _emit_table(rows: list[dict], as_csv: bool, out=None) -> None:
    out = out or sys.stdout
    if as_csv:
        w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return
    keys = list(rows[0])
    table = [keys] + [[str(r[k]) for k in keys] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(keys))]
    for row in table:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip(), file=out)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _write_snapshot(args.out, cfg)
    model = _model(cfg)
    result = harness.train(model, _task(cfg), config.train_config(cfg))
    result.write_metrics(args.out / "metrics.csv")
    (args.out / "footprint.vbfp").write_bytes(result.footprint.to_bytes())
    result.footprint.write_csv(args.out / "footprint.csv")
    save_state(args.out / "state.npz", model, cfg)
    adapter_store.save(model.export(cfg), args.out / "adapter.vbla")
    first, last = harness.quartile_new_selections(result.footprint)
    print(f"held-out loss {result.initial_loss:.6f} -> {result.final_loss:.6f}")
    print(f"sub-vectors with changed selection {result.footprint.changed_subvectors()}"
          f"/{result.footprint.num_subvectors}")
    print(f"new selections first quarter {first} last quarter {last}")
    print(f"base weights unchanged {result.base_checksum_before == result.base_checksum_after}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _resolve(args)
    _write_snapshot(args.out, cfg)
    model = _model(cfg, dtype=torch.float64)
    harness.randomize_adapters(model, cfg["seed"], cfg["grad_bank_scale"], cfg["grad_logit_scale"])
    rep = harness.grad_check(model, _task(cfg), tolerance=cfg["grad_tol"], eps=cfg["grad_eps"],
                             batch_size=cfg["grad_batch"], seed=cfg["seed"])
    print(f"max-rel-error {rep.max_rel_error:.3e} (bank {rep.bank_max_rel_error:.3e}, "
          f"logits {rep.logit_max_rel_error:.3e}) over {rep.num_checked} components")
    print(f"unselected logits {rep.num_unselected}: max |analytic| {rep.unselected_max_analytic:.1e} "
          f"max |fd| {rep.unselected_max_fd:.1e}")
    print(f"boundary-crossing perturbations excluded {len(rep.boundary_excluded)}")
    if not rep.ok:
        for line in rep.failures[:20]:
            print(f"FAIL {line}", file=sys.stderr)
        print(f"gradient check failed on {len(rep.failures)} components", file=sys.stderr)
        return 2
    print("gradient check passed")
    return 0


def cmd_count(args) -> int:
    if args.preset is not None:
        if args.preset not in accounting.PRESETS:
            raise config.ConfigError(
                "preset", f"unknown count preset {args.preset!r}; choose from {sorted(accounting.PRESETS)}"
            )
        cfg = _resolve(args, preset_is_config=False)
        _write_snapshot(args.out, cfg, {"count_preset": args.preset})
        reports = accounting.preset_reports(accounting.PRESETS[args.preset])
    else:
        cfg = _resolve(args)
        _write_snapshot(args.out, cfg)
        model = _model(cfg)
        geom = model.geometry()
        reports = [
            accounting.count_full_ft(geom),
            accounting.count_lora(geom, cfg["r"]),
            accounting.count_vera(geom, cfg["r"]),
            accounting.count_vblora_stored(geom, cfg["h"], cfg["b"], cfg["r"], model.export().k),
        ]
    rows = [
        {
            "method": rep.method,
            "trainable": rep.trainable_params,
            "stored": int(rep.stored) if float(rep.stored).is_integer() else rep.stored,
            "breakdown": ";".join(f"{k}={_num(v)}" for k, v in rep.breakdown.items()),
        }
        for rep in reports
    ]
    with open(args.out / "count.csv", "w", newline="") as fh:
        _emit_table(rows, True, fh)
    if args.csv:
        _emit_table(rows, True)
    else:
        print(accounting.report_table(reports))
    return 0


def cmd_export(args) -> int:
    bank, logits, embedded = load_state(args.state)
    if args.config is not None or args.preset is not None:
        cfg = _resolve(args)
    else:
        cfg = config.resolve(overrides={k: v for k, v in embedded.items() if k in config.SCHEMA},
                             seed=args.seed)
    _write_snapshot(args.out, cfg)
    model = _model(cfg)
    _load_state_into(model, bank, logits)
    target = args.out / (args.state.stem + ".vbla")
    adapter_store.save(model.export(cfg), target)
    print(f"wrote {target}")
    return 0


def cmd_merge(args) -> int:
    adapter = adapter_store.load(args.adapter)
    if args.config is not None or args.preset is not None:
        cfg = _resolve(args)
    else:
        cfg = config.resolve(overrides={k: v for k, v in adapter.config.items() if k in config.SCHEMA},
                             seed=args.seed)
    _write_snapshot(args.out, cfg)
    model = _model(cfg)
    base = model.base_state()
    factors: dict[tuple[int, str], ComposedFactors] = adapter_store.reconstruct(adapter)
    for (layer, module), f in factors.items():
        name = f"{layer}.{module}"
        if name not in base:
            raise ValueError(f"adapter module {name} does not exist in the configured model")
        if base[name].shape != (f.d_in, f.d_out):
            raise ValueError(f"adapter module {name} has shape {(f.d_in, f.d_out)}, base {base[name].shape}")
        base[name] = merge_weight(base[name].astype(np.float64), f)
    path, sidecar = adapter_store.write_tensor_container(args.out / "merged.bin", base)
    print(f"merged {len(factors)} modules into {path} (manifest {sidecar.name})")
    return 0


def cmd_inspect(args) -> int:
    adapter = adapter_store.load(args.adapter)
    _write_snapshot(args.out, config.defaults(), {"inspect": str(args.adapter)})
    print(adapter_store.describe(adapter))
    return 0


def cmd_footprint(args) -> int:
    if args.window < 1:
        raise config.ConfigError("window", "must be a positive integer")
    fp = harness.FootprintLog.from_bytes(args.footprint.read_bytes())
    _write_snapshot(args.out, config.defaults(), {"footprint": str(args.footprint), "window": args.window})
    density = harness.footprint_density(fp, args.window)
    first, last = harness.quartile_new_selections(fp)
    hist = harness.usage_histogram(fp)
    print(f"records {len(fp.steps)} sub-vectors {fp.num_subvectors} h {fp.h} k {fp.k}")
    print(f"sub-vectors with changed selection {fp.changed_subvectors()}")
    print(f"new selections first quarter {first} last quarter {last}")
    rows = [{"window_start": fp.steps[i * args.window], "new_selections": d} for i, d in enumerate(density)]
    _emit_table(rows, args.csv)
    print("bank row usage (final record)")
    _emit_table([{"row": i, "subvectors": int(c)} for i, c in enumerate(hist)], args.csv)
    return 0


HANDLERS = {
    "train": cmd_train,
    "grad-check": cmd_grad_check,
    "count": cmd_count,
    "export": cmd_export,
    "merge": cmd_merge,
    "inspect": cmd_inspect,
    "footprint": cmd_footprint,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    handler = None
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        handler = _setup_logging(args.out)
        log.info("command %s argv %s", args.command, list(argv) if argv is not None else sys.argv[1:])
        return HANDLERS[args.command](args)
    except (adapter_store.AdapterError, harness.TrainingDivergedError,
            harness.FootprintFormatError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logging.getLogger("vblora").removeHandler(handler)
            handler.close()


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
