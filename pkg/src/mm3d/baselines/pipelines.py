"""2D-model pipelines on volumes: projection and slice-by-slice with NMS."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..detector import Detector, forward_2d
from ..features import map_z_back
from ..inference import CasePrediction, _to_detections
from ..metrics import Detection, iou_2d
from ..phantom import VIEWS
from ..training.data import Sample, slice_sample
from ..training.losses import breast_score, noisy_or
from ..training.loop import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

SLICE_MODES = ("random-slice", "annotated-only")


@dataclass
class AggregationConfig:
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


@torch.no_grad()
def run_mip(model_2d: Detector, sample: Sample) -> CasePrediction:
    """2D model on the maximum intensity projection of each view; detections carry no z."""
    images = sample.volumes.amax(dim=1)  # max over z-pooled slices == max over all slices
    last = forward_2d(model_2d, images).heads[-1]
    dets = {view: _to_detections(last.boxes[v], torch.sigmoid(last.logits[v]))
            for v, view in enumerate(VIEWS)}
    score = breast_score(noisy_or(last.logits[0]), noisy_or(last.logits[1]))
    return CasePrediction(sample.case_id, dets, float(score))


def nms(candidates: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy NMS: keep a candidate if its IoU with every kept box is below the threshold.

    A threshold of 1.0 disables suppression (identical boxes are kept too).
    """
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, tuple(candidates[i].box),
                                                          candidates[i].z if candidates[i].z is not None else -1))
    if iou_threshold >= 1.0:
        return [candidates[i] for i in order]
    kept: list[Detection] = []
    for i in order:
        c = candidates[i]
        if all(iou_2d(c.box, k.box) < iou_threshold for k in kept):
            kept.append(c)
    return kept


@torch.no_grad()
def run_slicewise(model_2d: Detector, sample: Sample, agg: AggregationConfig | None = None) -> CasePrediction:
    """2D model on every z-pooled slice, candidates merged across slices by NMS.

    Slice s of the CC view is paired with slice s of the MLO view. The breast
    score is the mean over views of the max per-slice noisy-or image score.
    """
    agg = agg or AggregationConfig()
    images = sample.volumes.transpose(0, 1)  # (S', 2, H, W)
    last = forward_2d(model_2d, images).heads[-1]
    probs = torch.sigmoid(last.logits)  # (S', 2, N)
    s_count = images.shape[0]
    dets, image_scores = {}, []
    for v, view in enumerate(VIEWS):
        cands = []
        for s in range(s_count):
            z = map_z_back(sample.zmap, s) if sample.zmap is not None else s
            cands += _to_detections(last.boxes[s, v], probs[s, v], [z] * probs.shape[-1])
        dets[view] = nms(cands, agg.iou_threshold)
        image_scores.append(noisy_or(last.logits[:, v]).max())
    return CasePrediction(sample.case_id, dets, float(breast_score(*image_scores)))


def slicewise_training_set(samples: Sequence[Sample], mode: str) -> list[Sample]:
    if mode not in SLICE_MODES:
        raise ValueError(f"mode must be one of {SLICE_MODES}, got {mode!r}")
    if mode == "random-slice":
        out = list(samples)
    else:
        out = [s for s in samples if not (s.y and not s.annotated)]
    n_mal = sum(s.y for s in out)
    if n_mal == 0:
        n_before = sum(s.y for s in samples)
        raise ValueError(f"no malignant cases left for slice-level training "
                         f"({n_before} malignant before filtering, {len(out)} cases kept)")
    return out


def pick_training_slices(s: Sample, rng: np.random.Generator) -> Sample:
    """Most-visible slice of the annotated finding, else a random slice per view."""
    n_slices = s.volumes.shape[1]
    if s.y and s.annotated:
        slices = tuple(int(s.z_gt[v][0]) for v in range(2))
        return slice_sample(s, slices, keep_boxes=True)
    slices = (int(rng.integers(n_slices)), int(rng.integers(n_slices)))
    return slice_sample(s, slices, keep_boxes=False)


def train_slicewise(model_2d: Detector, samples: Sequence[Sample], mode: str, cfg: TrainConfig,
                    validate=None, meta=None, on_epoch=None) -> TrainResult:
    """Slice-level training: annotated malignant cases contribute their most visible slice;
    other cases a random slice (``random-slice``), or unannotated malignant cases are
    dropped altogether (``annotated-only``)."""
    train_set = slicewise_training_set(samples, mode)
    log.info("slicewise training (%s): %d cases, %d malignant", mode, len(train_set),
             sum(s.y for s in train_set))
    return train(model_2d, train_set, cfg, mode="2d", validate=validate,
                 sample_fn=pick_training_slices, meta=meta, on_epoch=on_epoch)
