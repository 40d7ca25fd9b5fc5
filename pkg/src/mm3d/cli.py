"""Command-line entry point: generate, train, eval, transfer, param-check, sweep.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config
from .detector import (CheckpointFormatError, Detector, FUSIONS, manifest_diff,
                       model_from_checkpoint, param_manifest, parse_checkpoint,
                       save_checkpoint)
from .metrics import EvalReport
from .numerics import NonFiniteError
from .phantom import DatasetFormatError, read_dataset, write_dataset
from .training.loop import TrainingDiverged, transfer_weights

log = logging.getLogger("mm3d")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SPLITS = ("train", "val", "test")


class CommandError(ValueError):
    """A command-level validation failure (exit code 1)."""


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig().validate()
    overrides = {}
    if getattr(args, "fusion", None):
        overrides["model.fusion"] = args.fusion
    if getattr(args, "mode", None):
        overrides["model.mode"] = args.mode
    return cfg.replace(**overrides) if overrides else cfg


def _check_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CommandError(f"{path} exists; pass --force to overwrite")


def dataset_digest(path) -> str:
    """sha256 over the index and every volume file, in a fixed order."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _load_splits(path) -> dict[str, list]:
    cases = read_dataset(path)
    return {s: [c for c in cases if c.split == s] for s in SPLITS}


# -- commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"data.base_seed": args.seed})
    out = Path(args.out)
    _check_out(out, args.force)
    if out.exists():
        shutil.rmtree(out)
    splits = ex.benchmark_cases(cfg)
    cases = [c for s in SPLITS for c in splits[s]]
    write_dataset(cases, out, extra={"config": cfg.to_dict()})
    bench = ex.Benchmark(splits, {})
    print(f"{'split':<6} {'malignant':>9} {'annotated':>9} {'benign':>7} {'negative':>8} {'total':>6}")
    for s, row in bench.counts().items():
        print(f"{s:<6} {row['malignant']:>9} {row['annotated_malignant']:>9} {row['benign']:>7} "
              f"{row['negative']:>8} {row['total']:>6}")
    print(f"dataset sha256 {dataset_digest(out)}")
    return EXIT_OK


def _bench_from_disk(path, cfg: ExperimentConfig) -> ex.Benchmark:
    return ex.build_benchmark(cfg, _load_splits(path))


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"seed": args.seed, "train.seed": args.seed})
    out = Path(args.out)
    _check_out(out, args.force)
    bench = _bench_from_disk(args.dataset, cfg)
    if not bench.cases["train"]:
        raise CommandError("dataset has no train split")
    init = Path(args.init).read_bytes() if args.init else None
    mode = cfg.model.mode
    if mode == "3d":
        method = f"3d:{cfg.model.fusion}"
    elif mode == "slicewise":
        method = f"slicewise:{args.slice_mode}"
    elif mode == "2d":
        method = "slicewise:annotated-only"
    else:
        method = "mip"
    ckpt = ex.train_method(cfg, bench, method, init, use_cache=False,
                           on_epoch=lambda r: log.info(json.dumps(r, sort_keys=True)))
    # record the inference mode alongside the weights
    c = parse_checkpoint(ckpt)
    model = model_from_checkpoint(c)
    save_checkpoint(model, out, {**c.meta, "mode": mode})
    print(f"wrote {out} ({out.stat().st_size} bytes, sha256 {hashlib.sha256(out.read_bytes()).hexdigest()})")
    return EXIT_OK


def _fmt(v: Optional[float]) -> str:
    return "N/A" if v is None else f"{v:.4f}"


def format_report(reports: dict[str, EvalReport], title: str) -> str:
    lines = [f"== {title} =="]
    for proto, label in (("2d", "2D localization"), ("3d", "3D localization")):
        r = reports[proto]
        lines.append(f"[{label}] volumes={r.n_volumes} findings={r.n_findings} cases={r.n_cases}")
        lines.append(f"  R@0.25 {_fmt(r.r_at_025)} (SE {_fmt(r.se_r025)})   "
                     f"R@0.5 {_fmt(r.r_at_05)} (SE {_fmt(r.se_r05)})   "
                     f"AUC {_fmt(r.auc)} (SE {_fmt(r.se_auc)})")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    cfg = _config(args)
    raw = Path(args.checkpoint).read_bytes()
    mode = args.mode or parse_checkpoint(raw, args.checkpoint).meta.get("mode", "3d")
    if args.split not in SPLITS:
        raise CommandError(f"split must be one of {SPLITS}")
    splits = _load_splits(args.dataset)
    bench = ex.build_benchmark(cfg, {args.split: splits[args.split]})
    if not bench.cases[args.split]:
        raise CommandError(f"dataset has no {args.split!r} cases")
    reports, _ = ex.evaluate_checkpoint(raw, bench, mode, cfg, split=args.split)
    text = format_report(reports, f"{Path(args.checkpoint).name} on {args.split} ({mode})")
    print(text)
    if args.out:
        payload = {proto: r.summary() for proto, r in reports.items()}
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        for proto, r in reports.items():
            if r.curve:
                Path(args.out).with_suffix(f".froc_{proto}.csv").write_text(r.curve_csv())
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config(args)
    model = Detector(cfg.model_config(), seed=cfg.seed)
    report = transfer_weights(Path(args.checkpoint).read_bytes(), model)
    print(json.dumps({"missing": report.missing, "unexpected": report.unexpected}, indent=2))
    if not report.clean and not args.allow_partial:
        names = ", ".join(report.missing + report.unexpected)
        raise CommandError(f"manifest mismatch: {names}")
    if args.out:
        out = Path(args.out)
        _check_out(out, args.force)
        save_checkpoint(model, out, {"model": model.cfg.to_dict(), "mode": cfg.model.mode,
                                     "transferred_from": Path(args.checkpoint).name})
    return EXIT_OK


def cmd_param_check(args) -> int:
    cfg_a, cfg_b = load_config(args.config_a), load_config(args.config_b)
    if args.fusion_a:
        cfg_a = cfg_a.replace(**{"model.fusion": args.fusion_a})
    if args.fusion_b:
        cfg_b = cfg_b.replace(**{"model.fusion": args.fusion_b})
    ma = param_manifest(Detector(cfg_a.model_config()))
    mb = param_manifest(Detector(cfg_b.model_config()))
    diff = manifest_diff(ma, mb)
    print(json.dumps(diff, indent=2))
    same = ma == mb
    print("manifests identical" if same else "manifests differ")
    return EXIT_OK if same else EXIT_INVALID


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"seed": args.seed, "train.seed": args.seed})
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError:
        raise CommandError(f"bad --values {args.values!r}") from None
    methods = args.methods.split(",") if args.methods else list(ex.SWEEP_METHODS)
    cells = ex.run_sweep(cfg, args.axis, values, methods)
    tables = ex.sweep_tables(cells, args.axis)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for metric, csv_text in tables.items():
        print(f"# {metric}")
        print(csv_text, end="")
        if out:
            (out / f"{args.axis}_{metric}.csv").write_text(csv_text)
    failed = [c for c in cells if c.error]
    for c in failed:
        print(f"failed cell {c.method} @ {c.value}: {c.error}", file=sys.stderr)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mm3d", description="Two-view 3D detector on synthetic tomosynthesis phantoms")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        if seed:
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    g = sub.add_parser("generate", help="generate and split a phantom dataset")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset's train split")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--mode", choices=("2d", "3d", "slicewise", "mip"))
    t.add_argument("--fusion", choices=FUSIONS)
    t.add_argument("--slice-mode", default="random-slice", choices=("random-slice", "annotated-only"))
    t.add_argument("--init", help="2D checkpoint to transfer before training")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under 2D and 3D localization")
    common(e, seed=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=("2d", "3d", "slicewise", "mip"))
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("transfer", help="load a 2D checkpoint into the configured 3D model")
    common(tr, seed=False)
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--fusion", choices=FUSIONS)
    tr.add_argument("--allow-partial", action="store_true", help="write the model even if names mismatch")
    tr.set_defaults(func=cmd_transfer)

    pc = sub.add_parser("param-check", help="compare the parameter manifests of two configs")
    pc.add_argument("config_a")
    pc.add_argument("config_b")
    pc.add_argument("--fusion-a", choices=FUSIONS)
    pc.add_argument("--fusion-b", choices=FUSIONS)
    pc.set_defaults(func=cmd_param_check)

    sw = sub.add_parser("sweep", help="train/evaluate methods over data or annotation fractions")
    common(sw)
    sw.add_argument("--axis", required=True, choices=("data_fraction", "annotation_fraction"))
    sw.add_argument("--values", required=True, help="comma-separated fractions in (0, 1]")
    sw.add_argument("--methods", help=f"comma-separated subset of {','.join(ex.SWEEP_METHODS)}")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, int(os.environ.get("MM3D_THREADS", "1"))))
    try:
        return args.func(args)
    except (NonFiniteError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, CommandError, DatasetFormatError, CheckpointFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
