"""Turning model outputs into scored detections and case-level scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .detector import Detector, forward_3d
from .features import map_z_back
from .metrics import Detection
from .phantom import VIEWS
from .training.data import Sample
from .training.losses import breast_score, noisy_or


@dataclass
class CasePrediction:
    case_id: str
    detections: dict[str, list[Detection]]
    score: float
    extra: dict = field(default_factory=dict)


def _to_detections(boxes, scores, zs=None) -> list[Detection]:
    out = []
    for i in range(len(scores)):
        z = None if zs is None else int(zs[i])
        out.append(Detection(tuple(float(v) for v in boxes[i]), float(scores[i]), z))
    return out


@torch.no_grad()
def predict_3d(model: Detector, sample: Sample) -> CasePrediction:
    """Final-head boxes, sigmoid scores and slice indices mapped to the original volume."""
    out = forward_3d(model, sample.volumes)
    last = out.heads[-1]
    dets = {}
    for v, view in enumerate(VIEWS):
        zs = [map_z_back(sample.zmap, int(j)) for j in last.z[v]]
        dets[view] = _to_detections(last.boxes[v], torch.sigmoid(last.logits[v]), zs)
    score = breast_score(noisy_or(last.logits[0]), noisy_or(last.logits[1]))
    extra = {"w": None if last.w is None else last.w.numpy().copy(), "z_ds": last.z.numpy().copy()}
    return CasePrediction(sample.case_id, dets, float(score), extra)
