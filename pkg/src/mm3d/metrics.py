"""Detection (recall at X false positives per volume) and classification metrics."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

IOU_THRESHOLD = 0.25


class DegenerateSample(ValueError):
    """A (re)sample on which the statistic is undefined."""


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    z: Optional[int] = None


def iou_2d(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _det_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, tuple(dets[i].box)))


def match_tp(dets: Sequence[Detection], findings, require_z: bool,
             iou_threshold: float = IOU_THRESHOLD) -> tuple[list[bool], list[bool]]:
    """Greedy claim in descending score order.

    Returns (is_tp per detection in input order, hit per finding). A detection
    claims the unclaimed finding with the highest IoU among those passing the
    IoU threshold and, when ``require_z``, containing its slice in the
    visibility range. Detections without z are FP under ``require_z``.
    """
    is_tp = [False] * len(dets)
    hit = [False] * len(findings)
    for i in _det_order(dets):
        d = dets[i]
        if require_z and d.z is None:
            continue
        best, best_iou = -1, -1.0
        for j, f in enumerate(findings):
            if hit[j]:
                continue
            if require_z and not (f.z_range[0] <= d.z <= f.z_range[1]):
                continue
            iou = iou_2d(d.box, f.box)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            hit[best] = True
            is_tp[i] = True
    return is_tp, hit


@dataclass
class VolumeResult:
    volume_id: str
    scores: np.ndarray
    is_tp: np.ndarray
    n_findings: int
    counts_fp: bool = True  # False excludes the volume from FP counting and the denominator


def score_volume(volume_id: str, dets: Sequence[Detection], findings, require_z: bool,
                 counts_fp: bool = True) -> VolumeResult:
    is_tp, _ = match_tp(dets, findings, require_z)
    return VolumeResult(volume_id, np.array([d.score for d in dets], dtype=np.float64),
                        np.array(is_tp, dtype=bool), len(findings), counts_fp)


def froc_curve(volumes: Sequence[VolumeResult]) -> list[tuple[float, float, float]]:
    """(threshold, FP per volume, recall) at every distinct score, descending thresholds."""
    n_vol = sum(v.counts_fp for v in volumes)
    n_find = sum(v.n_findings for v in volumes)
    if not volumes or n_find == 0:
        raise DegenerateSample("recall needs at least one volume and one finding")
    if n_vol == 0:
        raise DegenerateSample("no volume counts toward false positives")
    scores = np.concatenate([v.scores for v in volumes]) if volumes else np.zeros(0)
    tp = np.concatenate([v.is_tp for v in volumes])
    fp_mask = np.concatenate([~v.is_tp & v.counts_fp for v in volumes])
    thresholds = np.unique(scores)[::-1]
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    ctp = np.cumsum(tp[order])
    cfp = np.cumsum(fp_mask[order])
    pts = [(math.inf, 0.0, 0.0)]
    for t in thresholds:
        k = np.searchsorted(-s_sorted, -t, side="right")  # number of scores >= t
        pts.append((float(t), float(cfp[k - 1]) / n_vol, float(ctp[k - 1]) / n_find))
    return pts


def recall_at_fp(volumes: Sequence[VolumeResult], x: float) -> float:
    """Max recall over thresholds whose FP-per-volume is at most x (step function)."""
    return max(r for _, fp, r in froc_curve(volumes) if fp <= x)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateSample("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def delong_se(scores, labels) -> float:
    """Standard error of the AUC from DeLong's structural components."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    m, n = len(pos), len(neg)
    if m == 0 or n == 0:
        raise DegenerateSample("DeLong needs both classes")
    psi = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    v10 = psi.mean(axis=1)
    v01 = psi.mean(axis=0)
    s10 = v10.var(ddof=1) if m > 1 else 0.0
    s01 = v01.var(ddof=1) if n > 1 else 0.0
    return float(math.sqrt(s10 / m + s01 / n))


def bootstrap_se(statistic: Callable[[list], float], data: Sequence, B: int,
                 rng: np.random.Generator) -> float:
    """Std of ``statistic`` over B resamples (with replacement) of ``data``.

    Resamples on which the statistic raises DegenerateSample are skipped and
    reported with a warning.
    """
    if B < 100:
        raise ValueError(f"need B >= 100 bootstrap replicates, got {B}")
    data = list(data)
    n = len(data)
    vals, skipped = [], 0
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        try:
            vals.append(statistic([data[i] for i in idx]))
        except DegenerateSample:
            skipped += 1
    if skipped:
        warnings.warn(f"bootstrap: skipped {skipped}/{B} degenerate resamples", RuntimeWarning)
    if len(vals) < 2:
        return math.nan
    return float(np.std(vals, ddof=1))


@dataclass
class EvalReport:
    protocol: str  # "2d" or "3d" localization
    r_at_025: Optional[float]
    r_at_05: Optional[float]
    auc: Optional[float]
    se_r025: Optional[float]
    se_r05: Optional[float]
    se_auc: Optional[float]
    n_volumes: int
    n_findings: int
    n_cases: int
    curve: list[tuple[float, float, float]] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("curve")
        return d

    def to_text(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fp_per_volume", "recall"])
        for t, fp, r in self.curve:
            w.writerow([repr(t), repr(fp), repr(r)])
        return buf.getvalue()


def evaluate_predictions(preds, cases, require_z: bool, xs=(0.25, 0.5), B: int = 200,
                         seed: int = 0, restrict_fp_to_nonbenign: bool = False) -> EvalReport:
    """Score case predictions against ground truth.

    ``preds`` maps case_id to an object with ``detections`` ({view: [Detection]})
    and ``score`` (breast malignancy score). Ground truth = malignant findings;
    benign findings are not targets, so detections on them are false positives.
    """
    from .phantom import VIEWS

    volumes = []
    labels, scores = [], []
    for c in cases:
        p = preds[c.case_id]
        labels.append(c.y)
        scores.append(float(p.score))
        counts_fp = not (restrict_fp_to_nonbenign and c.label == "benign")
        for view in VIEWS:
            gts = [f for f in c.findings(view) if f.malignant]
            volumes.append(score_volume(f"{c.case_id}/{view}", p.detections[view], gts, require_z, counts_fp))

    rng = np.random.Generator(np.random.Philox(seed))
    n_find = sum(v.n_findings for v in volumes)
    r = {x: None for x in xs}
    se = {x: None for x in xs}
    curve = []
    if n_find > 0:
        curve = froc_curve(volumes)
        for x in xs:
            r[x] = recall_at_fp(volumes, x)
            se[x] = bootstrap_se(lambda vs, x=x: recall_at_fp(vs, x), volumes, B, rng)
    auc = se_auc = None
    if 0 < sum(labels) < len(labels):
        auc = roc_auc(scores, labels)
        se_auc = delong_se(scores, labels)
    return EvalReport("3d" if require_z else "2d", r.get(0.25), r.get(0.5), auc,
                      se.get(0.25), se.get(0.5), se_auc, len(volumes), n_find, len(cases), curve)
