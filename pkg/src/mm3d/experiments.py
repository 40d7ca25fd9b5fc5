"""Benchmark construction, cached training runs, evaluation and sweeps.

Trained checkpoints are cached on disk under a key derived from everything
that determines them (configuration, method, upstream checkpoint digest and
CACHE_VERSION), so repeated experiments and the acceptance suite reuse them.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines.pipelines import AggregationConfig, run_mip, run_slicewise, train_slicewise
from .config import ExperimentConfig
from .detector import VARIANT_FUSIONS, Detector, model_from_checkpoint, parse_checkpoint
from .inference import CasePrediction, predict_3d
from .metrics import DegenerateSample, EvalReport, evaluate_predictions, iou_2d
from .numerics import seeded_stream
from .phantom import VIEWS, Case, generate_cases, set_annotation_fraction, split_dataset
from .training.data import Sample, prepare_sample
from .training.loop import train, transfer_weights

log = logging.getLogger(__name__)

# bump when a code change alters what a cached checkpoint would contain
CACHE_VERSION = 1

SWEEP_METHODS = {"mm3d": "weighted", "timesform": "timesform",
                 "querysummary": "querysummary", "mlpregress": "mlpregress"}


def cache_dir() -> Path:
    d = Path(os.environ.get("MM3D_CACHE", Path.home() / ".cache" / "mm3d"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def _cached(key: dict, fn: Callable[[], tuple[bytes, list]], use_cache: bool = True) -> bytes:
    name = _digest({"v": CACHE_VERSION, **key})
    path = cache_dir() / f"{key.get('kind', 'run')}-{name}.ckpt"
    if use_cache and path.exists():
        log.info("cache hit %s", path.name)
        return path.read_bytes()
    ckpt, history = fn()
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(ckpt)
    tmp.replace(path)
    path.with_suffix(".json").write_text(json.dumps({"key": key, "log": history}, indent=1, default=str))
    return ckpt


# -- data -------------------------------------------------------------------

def subsample(cases: Sequence[Case], fraction: float, rng: np.random.Generator) -> list[Case]:
    """Label-stratified subset of round(fraction * n) cases, keeping at least one per label."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(cases)
    by_label: dict[str, list[int]] = {}
    for i, c in enumerate(cases):
        by_label.setdefault(c.label, []).append(i)
    keep = []
    for label in sorted(by_label):
        idx = by_label[label]
        k = max(1, int(round(fraction * len(idx))))
        keep += [idx[j] for j in rng.permutation(len(idx))[:k]]
    return [cases[i] for i in sorted(keep)]


@dataclass
class Benchmark:
    cases: dict[str, list[Case]]
    samples: dict[str, list[Sample]]

    def counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for split, cs in self.cases.items():
            row = {lab: sum(c.label == lab for c in cs) for lab in ("malignant", "benign", "negative")}
            row["annotated_malignant"] = sum(c.label == "malignant" and c.annotated for c in cs)
            row["total"] = len(cs)
            out[split] = row
        return out


def benchmark_cases(cfg: ExperimentConfig) -> dict[str, list[Case]]:
    """Generate and split the phantom set, then apply annotation and data fractions to train."""
    cases = generate_cases(cfg.data.n_cases, cfg.phantom, base_seed=cfg.data.base_seed)
    splits = split_dataset(cases, cfg.data.fractions, seeded_stream(cfg.data.split_seed))
    train_cases = set_annotation_fraction(splits["train"], cfg.annotation_fraction,
                                          seeded_stream(cfg.data.split_seed + 1))
    train_cases = subsample(train_cases, cfg.data_fraction, seeded_stream(cfg.data.split_seed + 2))
    splits["train"] = train_cases
    for split in ("val", "test"):  # held-out splits are fully annotated for evaluation
        splits[split] = set_annotation_fraction(splits[split], 1.0, seeded_stream(0))
    return splits


def build_benchmark(cfg: ExperimentConfig, cases: Optional[dict[str, list[Case]]] = None) -> Benchmark:
    cases = cases if cases is not None else benchmark_cases(cfg)
    samples = {k: [prepare_sample(c, cfg.model.s_target) for c in v] for k, v in cases.items()}
    return Benchmark(cases, samples)


def pretrain_cases(cfg: ExperimentConfig) -> list[Case]:
    pcfg = dataclasses.replace(cfg.phantom, unannotated_fraction=0.0)
    return generate_cases(cfg.pretrain.n_cases, pcfg, base_seed=cfg.pretrain.base_seed, prefix="ffdm")


# -- prediction and evaluation ---------------------------------------------

def predict(model: Detector, sample: Sample, mode: str, agg: Optional[AggregationConfig] = None) -> CasePrediction:
    if mode == "3d":
        return predict_3d(model, sample)
    if mode in ("2d", "slicewise"):
        return run_slicewise(model, sample, agg)
    if mode == "mip":
        return run_mip(model, sample)
    raise ValueError(f"unknown mode {mode!r}")


def predict_all(model: Detector, samples: Sequence[Sample], mode: str,
                agg: Optional[AggregationConfig] = None) -> dict[str, CasePrediction]:
    model.eval()
    return {s.case_id: predict(model, s, mode, agg) for s in samples}


def evaluate(preds, cases, cfg: ExperimentConfig, seed: int = 0) -> dict[str, EvalReport]:
    """Both localization protocols: '2d' (IoU only) and '3d' (IoU + slice in visibility range)."""
    return {proto: evaluate_predictions(preds, cases, require_z=(proto == "3d"), xs=cfg.eval.xs,
                                        B=cfg.eval.bootstrap, seed=seed,
                                        restrict_fp_to_nonbenign=cfg.eval.restrict_fp_to_nonbenign)
            for proto in ("2d", "3d")}


def z_accuracy(preds, cases, iou_threshold: float = 0.25) -> tuple[float, int, int]:
    """Fraction of malignant findings whose best-scoring overlapping detection sits in the visibility range.

    Findings with no detection at IoU >= threshold are skipped; returns
    (accuracy, n_scored, n_skipped).
    """
    hits = scored = skipped = 0
    for c in cases:
        p = preds[c.case_id]
        for view in VIEWS:
            for f in c.findings(view):
                if not f.malignant:
                    continue
                over = [d for d in p.detections[view] if d.z is not None and iou_2d(d.box, f.box) >= iou_threshold]
                if not over:
                    skipped += 1
                    continue
                best = max(over, key=lambda d: (d.score, tuple(-v for v in d.box)))
                scored += 1
                hits += f.z_range[0] <= best.z <= f.z_range[1]
    if scored == 0:
        raise DegenerateSample("no finding has an overlapping detection")
    return hits / scored, scored, skipped


def _validator(bench: Benchmark, mode: str, cfg: ExperimentConfig):
    """Checkpoint-selection score on the validation split: 3D R@0.25 + AUC."""
    agg = AggregationConfig(cfg.eval.nms_iou)
    proto_3d = mode != "mip"

    def validate(model: Detector) -> dict:
        preds = predict_all(model, bench.samples["val"], mode, agg)
        rep = evaluate_predictions(preds, bench.cases["val"], require_z=proto_3d, xs=(0.25,), B=100)
        r = rep.r_at_025 or 0.0
        auc = rep.auc if rep.auc is not None else 0.5
        return {"score": r + auc, "val_r025": r, "val_auc": auc}
    return validate


# -- training runs ----------------------------------------------------------

def _mip_sample(s: Sample) -> Sample:
    return Sample(s.case_id, s.volumes.amax(dim=1), s.boxes, s.z_gt, s.y, s.annotated, s.zmap, dict(s.extra))


def pretrain_2d(cfg: ExperimentConfig, bench: Benchmark, use_cache: bool = True,
                on_epoch=None) -> Optional[bytes]:
    """2D model trained on most-visible slices of a separate, fully annotated phantom set."""
    if not cfg.pretrain.enabled:
        return None
    pre = cfg.pretrain
    # z-loss settings have no effect on 2D training, so they are pinned out of the key
    tc = dataclasses.replace(cfg.train, lr=pre.lr, epochs=pre.epochs, z_loss=True, new_lr=None,
                             weights=dataclasses.replace(cfg.train.weights, z=1.0))
    key = {"kind": "pretrain2d", "model": cfg.model_config("weighted").to_dict(),
           "phantom": dataclasses.asdict(cfg.phantom), "pretrain": dataclasses.asdict(pre),
           "train": _train_key(tc),
           "val": _split_key(cfg), "seed": cfg.seed, "s_target": cfg.model.s_target}

    def run():
        samples = [prepare_sample(c, cfg.model.s_target) for c in pretrain_cases(cfg)]
        model = Detector(cfg.model_config("weighted"), seed=cfg.seed)
        res = train_slicewise(model, samples, "annotated-only", tc, validate=_validator(bench, "2d", cfg),
                              meta={"method": "pretrain2d"}, on_epoch=on_epoch)
        return res.checkpoint, res.log
    return _cached(key, run, use_cache)


def _split_key(cfg: ExperimentConfig) -> dict:
    return {"data": dataclasses.asdict(cfg.data), "phantom": dataclasses.asdict(cfg.phantom),
            "s_target": cfg.model.s_target}


def _train_key(tc) -> dict:
    d = dataclasses.asdict(tc)
    if d["new_lr"] is None:  # keeps keys of runs that predate the option
        del d["new_lr"]
    return d


def train_method(cfg: ExperimentConfig, bench: Benchmark, method: str, init: Optional[bytes],
                 use_cache: bool = True, on_epoch=None) -> bytes:
    """Train one method on the benchmark's train split.

    ``method`` is ``3d:<fusion>``, ``slicewise:<random-slice|annotated-only>`` or ``mip``.
    ``init`` is a 2D checkpoint transferred by name (extra variant parameters stay random).
    """
    kind, _, arg = method.partition(":")
    fusion = arg if kind == "3d" else "weighted"
    mcfg = cfg.model_config(fusion)
    key = {"kind": kind, "method": method, "model": mcfg.to_dict(),
           "train": _train_key(cfg.train if fusion in VARIANT_FUSIONS else dataclasses.replace(cfg.train, new_lr=None)),
           "split": _split_key(cfg), "data_fraction": cfg.data_fraction,
           "annotation_fraction": cfg.annotation_fraction, "seed": cfg.seed, "nms": cfg.eval.nms_iou,
           "init": hashlib.sha256(init).hexdigest() if init else None}

    def run():
        model = Detector(mcfg, seed=cfg.seed)
        if init is not None:
            rep = transfer_weights(init, model)
            log.info("%s: transfer missing=%d unexpected=%d", method, len(rep.missing), len(rep.unexpected))
        fresh = rep.missing if init is not None else ()
        meta = {"method": method}
        if kind == "3d":
            res = train(model, bench.samples["train"], cfg.train, "3d",
                        validate=_validator(bench, "3d", cfg), meta=meta, on_epoch=on_epoch, fresh=fresh)
        elif kind == "slicewise":
            res = train_slicewise(model, bench.samples["train"], arg, cfg.train,
                                  validate=_validator(bench, "slicewise", cfg), meta=meta, on_epoch=on_epoch)
        elif kind == "mip":
            res = train(model, [_mip_sample(s) for s in bench.samples["train"]], cfg.train, "2d",
                        validate=_validator(bench, "mip", cfg), meta=meta, on_epoch=on_epoch)
        else:
            raise ValueError(f"unknown method {method!r}")
        return res.checkpoint, res.log
    return _cached(key, run, use_cache)


def method_mode(method: str) -> str:
    kind = method.partition(":")[0]
    return {"3d": "3d", "slicewise": "slicewise", "mip": "mip"}[kind]


def evaluate_checkpoint(ckpt: bytes, bench: Benchmark, mode: str, cfg: ExperimentConfig,
                        split: str = "test") -> tuple[dict[str, EvalReport], dict[str, CasePrediction]]:
    model = model_from_checkpoint(parse_checkpoint(ckpt))
    preds = predict_all(model, bench.samples[split], mode, AggregationConfig(cfg.eval.nms_iou))
    return evaluate(preds, bench.cases[split], cfg, seed=cfg.seed), preds


# -- sweeps -----------------------------------------------------------------

@dataclass
class SweepCell:
    method: str
    value: float
    r_at_025: Optional[float] = None
    auc: Optional[float] = None
    se_r025: Optional[float] = None
    se_auc: Optional[float] = None
    n_train: Optional[int] = None
    error: Optional[str] = None


def run_sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float],
              methods: Sequence[str] = tuple(SWEEP_METHODS), use_cache: bool = True) -> list[SweepCell]:
    """One model per (method, value); a failing cell is recorded and the sweep continues.

    Both axes reuse the same generated benchmark: ``data_fraction`` subsamples
    train cases, ``annotation_fraction`` only withdraws box annotations.
    """
    if axis not in ("data_fraction", "annotation_fraction"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    if not values or any(not 0 < v <= 1 for v in values):
        raise ValueError("sweep values must lie in (0, 1]")
    unknown = [m for m in methods if m not in SWEEP_METHODS]
    if unknown:
        raise ValueError(f"unknown sweep method(s) {unknown}")
    init = pretrain_2d(cfg, build_benchmark(cfg), use_cache)
    cells = []
    for value in values:
        vcfg = cfg.replace(**{axis: value})
        bench = build_benchmark(vcfg)
        log.info("sweep %s=%s: %d train cases, %d annotated malignant", axis, value,
                 len(bench.cases["train"]), bench.counts()["train"]["annotated_malignant"])
        for m in methods:
            cell = SweepCell(m, value, n_train=len(bench.cases["train"]))
            try:
                ckpt = train_method(vcfg, bench, f"3d:{SWEEP_METHODS[m]}", init, use_cache)
                rep = evaluate_checkpoint(ckpt, bench, "3d", vcfg)[0]["3d"]
                cell.r_at_025, cell.auc, cell.se_r025, cell.se_auc = rep.r_at_025, rep.auc, rep.se_r025, rep.se_auc
            except Exception as e:  # noqa: BLE001  a failed cell must not stop the sweep
                log.exception("sweep cell %s @ %s failed", m, value)
                cell.error = f"{type(e).__name__}: {e}"
            cells.append(cell)
    return cells


def sweep_tables(cells: Sequence[SweepCell], axis: str) -> dict[str, str]:
    """CSV per metric: one row per value, one column per method."""
    methods = list(dict.fromkeys(c.method for c in cells))
    values = list(dict.fromkeys(c.value for c in cells))
    lookup = {(c.method, c.value): c for c in cells}
    out = {}
    for metric in ("r_at_025", "auc"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([axis] + methods)
        for v in values:
            row = [v]
            for m in methods:
                c = lookup[(m, v)]
                val = getattr(c, metric)
                row.append("failed" if c.error else ("NA" if val is None else f"{val:.4f}"))
            w.writerow(row)
        out[metric] = buf.getvalue()
    return out


def margin(a: float, b: float, se_a: float, se_b: float) -> tuple[float, float]:
    """(a - b, reference SE) where the reference SE is the larger of the two estimates' SEs."""
    se = max(se_a, se_b)
    if math.isnan(se):
        raise ValueError("standard error is undefined")
    return a - b, se


# -- standard runs ------------------------------------------------------------

# name -> (config overrides, method); every run starts from the 2D pretrained checkpoint
STANDARD_RUNS = {
    "mm3d": ({}, "3d:weighted"),
    "fuse-mean": ({}, "3d:mean"),
    "fuse-max": ({}, "3d:max"),
    "slicewise-random": ({}, "slicewise:random-slice"),
    "slicewise-annotated": ({}, "slicewise:annotated-only"),
    "mip": ({}, "mip"),
    "zloss-on": ({"annotation_fraction": 1.0}, "3d:weighted"),
    "zloss-off": ({"annotation_fraction": 1.0, "train.z_loss": False}, "3d:weighted"),
}


@dataclass
class RunResult:
    name: str
    method: str
    checkpoint: bytes
    reports: dict[str, EvalReport]
    preds: dict[str, CasePrediction]
    bench: Benchmark


def standard_run(cfg: ExperimentConfig, name: str, use_cache: bool = True, on_epoch=None) -> RunResult:
    """Train (or load from cache) and evaluate one named run on the test split."""
    overrides, method = STANDARD_RUNS[name]
    rcfg = cfg.replace(**overrides) if overrides else cfg
    bench = build_benchmark(rcfg)
    init = pretrain_2d(rcfg, bench, use_cache, on_epoch)
    ckpt = train_method(rcfg, bench, method, init, use_cache, on_epoch)
    reports, preds = evaluate_checkpoint(ckpt, bench, method_mode(method), rcfg)
    return RunResult(name, method, ckpt, reports, preds, bench)


def inference_only(cfg: ExperimentConfig, init: Optional[bytes], fusion: str = "weighted") -> dict[str, EvalReport]:
    """3D test-split evaluation without any 3D training; ``init=None`` keeps the random init."""
    bench = build_benchmark(cfg)
    model = Detector(cfg.model_config(fusion), seed=cfg.seed)
    if init is not None:
        rep = transfer_weights(init, model)
        if not rep.clean:
            raise ValueError(f"transfer left parameters unmatched: {rep.missing + rep.unexpected}")
    preds = predict_all(model, bench.samples["test"], "3d")
    return evaluate(preds, bench.cases["test"], cfg, seed=cfg.seed)
