"""Command-line entry point: ``mgst gen|train|eval|gradcheck|export-mask|ablate``.

Failures print one JSON line ``{"error": <code>, "message": ...}`` to stderr
and exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plotting
from .checks import CHECKS
from .codec import FormatError, save_tensor
from .data import DatasetSpec, as_arrays, load_records, load_spec, read_sequence, write_corpus
from .model import ABLATIONS, ConfigError, MGSTModel
from .ops import ShapeError
from .train import evaluate, load_run_config, model_from_checkpoint, train


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _load(manifest):
    return as_arrays(load_records(manifest))


def _default_val(data: Path) -> Optional[Path]:
    cand = data.with_name("val.txt")
    return cand if data.name == "train.txt" and cand.exists() else None


def _spec_for(manifest: Path) -> Optional[DatasetSpec]:
    path = Path(manifest).resolve().parent / "spec.yaml"
    return load_spec(path) if path.exists() else None


def _group_scores(model, videos, labels, spec: Optional[DatasetSpec]) -> dict[str, float]:
    out = {"all": evaluate(model, videos, labels)[0]}
    if spec is not None:
        for group in ("texture", "motion"):
            classes = spec.subset(group)
            if classes and np.isin(labels, classes).any():
                out[group] = evaluate(model, videos, labels, classes)[0]
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    spec = load_spec(args.spec) if args.spec else DatasetSpec()
    spec.check()
    manifests = write_corpus(spec, args.out)
    _emit({"train": str(manifests["train"]), "val": str(manifests["val"]), "classes": spec.k})


def _run_config(args):
    model_cfg, train_cfg = load_run_config(args.config)
    overrides = {"schedule": args.schedule, "seed": args.seed, "epochs": args.epochs,
                 "stage_epochs": args.stage_epochs}
    for key, value in overrides.items():
        if value is not None:
            setattr(train_cfg, key, value)
    if args.no_time:
        train_cfg.record_time = False
    return model_cfg, train_cfg.check()


def _train_one(model_cfg, train_cfg, data, val, out: Path, resume=None, quiet=False):
    model = MGSTModel(model_cfg, train_cfg.seed)

    def log(m):
        if not quiet:
            print(f"epoch {m.epoch} loss {m.train_loss:.4f} train_acc {m.train_acc:.4f} "
                  f"val_acc {m.val_acc:.4f} {m.seconds:.1f}s", flush=True)

    trainer = train(model, train_cfg, data[0], data[1], val, out_dir=out, resume=resume, log=log)
    plotting.learning_curve(trainer.history, out / "learning_curve.png", f"{model_cfg.ablation}, seed {train_cfg.seed}")
    return trainer


def cmd_train(args):
    model_cfg, train_cfg = _run_config(args)
    data = _load(args.data)
    val_path = args.val or _default_val(Path(args.data))
    val = _load(val_path) if val_path else None
    out = Path(args.out)
    trainer = _train_one(model_cfg, train_cfg, data, val, out, resume=args.resume)
    last = trainer.history[-1] if trainer.history else None
    _emit({"checkpoint": str(out / "model.ckpt"), "metrics": str(out / "metrics.csv"),
           "epochs": trainer.epoch, "val_acc": None if last is None else last.val_acc})


def cmd_eval(args):
    model = model_from_checkpoint(args.ckpt)
    videos, labels = _load(args.data)
    acc, cm = evaluate(model, videos, labels)
    result = {"accuracy": acc, "samples": int(cm.sum())}
    spec = _spec_for(Path(args.data))
    if spec is not None:
        result.update({f"{k}_accuracy": v for k, v in _group_scores(model, videos, labels, spec).items() if k != "all"})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / "confusion.csv", cm, fmt="%d", delimiter=",")
        plotting.confusion(cm, out / "confusion.png")
        result["confusion"] = str(out / "confusion.csv")
    _emit(result)


def cmd_gradcheck(args):
    names = [args.module] if args.module else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise CLIError("unknown_module", f"no check named {unknown[0]!r}; choose from {sorted(CHECKS)}")
    failed = []
    for name in names:
        report = CHECKS[name]()
        worst = max(report.values())
        ok = worst < args.tol
        print(f"{'PASS' if ok else 'FAIL'} {name} max_rel_err={worst:.3e}", flush=True)
        if not ok:
            failed.append(name)
    if failed:
        raise CLIError("gradcheck_failed", f"modules above tolerance {args.tol}: {', '.join(failed)}")


def cmd_export_mask(args):
    model = model_from_checkpoint(args.ckpt)
    rec = read_sequence(args.sample)
    mask = model.export_mask(rec.frames)
    save_tensor(args.out, mask)
    _emit({"mask": str(args.out), "shape": list(mask.shape), "mean": float(mask.mean())})


def cmd_ablate(args):
    model_cfg, train_cfg = _run_config(args)
    modes = [m.strip() for m in args.grid.split(",") if m.strip()]
    bad = [m for m in modes if m not in ABLATIONS]
    if bad:
        raise CLIError("bad_grid", f"unknown ablation {bad[0]!r}; choose from {ABLATIONS}")
    seeds = [int(s) for s in args.seeds.split(",")]
    data = _load(args.data)
    val_path = args.val or _default_val(Path(args.data))
    if not val_path:
        raise CLIError("missing_val", "ablate needs a validation manifest (--val)")
    val = _load(val_path)
    spec = _spec_for(Path(val_path))
    out = Path(args.out)
    rows = []
    scores: dict[str, dict[str, list[float]]] = {}
    for mode in modes:
        for seed in seeds:
            cfg = dataclasses.replace(train_cfg, seed=seed)
            run_dir = out / mode / f"seed{seed}"
            trainer = _train_one(model_cfg.with_ablation(mode), cfg, data, val, run_dir, quiet=True)
            g = _group_scores(trainer.model, val[0], val[1], spec)
            rows.append({"mode": mode, "seed": seed, **g})
            for k, v in g.items():
                scores.setdefault(mode, {}).setdefault(k, []).append(v)
            print(f"{mode} seed {seed} " + " ".join(f"{k}={v:.4f}" for k, v in g.items()), flush=True)
    fields = ["mode", "seed"] + [k for k in ("all", "texture", "motion") if k in rows[0]]
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    chance = None
    if spec is not None:
        chance = {"all": 1 / spec.k, "texture": 1 / len(spec.subset("texture")),
                  "motion": 1 / len(spec.subset("motion"))}
    plotting.ablation_bars(scores, out / "ablation.png", chance)
    _emit({"summary": str(out / "summary.csv"), "figure": str(out / "ablation.png")})


# ---------------------------------------------------------------------------


def _add_run_args(p):
    p.add_argument("--config", required=True, help="YAML with model and train sections")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--val", help="validation manifest (default: val.txt next to train.txt)")
    p.add_argument("--schedule", choices=("end2end", "two-stage"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--stage-epochs", type=int, dest="stage_epochs", help="per-branch epochs for two-stage")
    p.add_argument("--no-time", action="store_true", help="write 0 in the seconds column")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write the synthetic corpus")
    p.add_argument("--spec", help="dataset spec YAML (default spec if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    _add_run_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for confusion.csv and confusion.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks")
    p.add_argument("--module", help=f"one of {', '.join(CHECKS)}")
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-mask", help="save the fusion mask of one sample as an MGT1 tensor")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mask)

    p = sub.add_parser("ablate", help="train a grid of ablation modes over several seeds")
    _add_run_args(p)
    p.add_argument("--grid", default="full,2d-only,3d-only", help="comma-separated ablation modes")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)
    return parser


def _error_code(exc: Exception) -> str:
    if isinstance(exc, CLIError):
        return exc.code
    if isinstance(exc, FormatError):
        return exc.code
    if isinstance(exc, ShapeError):
        return "shape_mismatch"
    if isinstance(exc, ConfigError):
        return "config_error"
    if isinstance(exc, FileNotFoundError):
        return "file_not_found"
    if isinstance(exc, FloatingPointError):
        return getattr(exc, "code", "numeric_error")
    if isinstance(exc, ValueError):
        return "invalid_input"
    return "internal_error"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        print(json.dumps({"error": _error_code(exc), "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
