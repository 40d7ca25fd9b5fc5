"""Set-prediction matching between proposals and ground-truth findings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

COST_IOU = 2.0
COST_L1 = 1.0
COST_CLS = 2.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (proposal, ground truth)
    unmatched: list[int] = field(default_factory=list)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def match_cost(boxes, logits, gts, image_size) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    height, width = image_size
    scale = np.array([width, height, width, height], dtype=np.float64)
    l1 = np.abs(boxes[:, None, :] / scale - gts[None, :, :] / scale).sum(-1)
    prob = 1.0 / (1.0 + np.exp(-logits))
    return (COST_IOU * (1.0 - box_iou_matrix(boxes, gts)) + COST_L1 * l1
            + COST_CLS * (1.0 - prob)[:, None])


def hungarian_match(boxes, logits, gts, image_size) -> MatchResult:
    """Minimum-cost one-to-one assignment of every ground truth to a proposal."""
    gts = np.asarray([getattr(g, "box", g) for g in gts], dtype=np.float64).reshape(-1, 4)
    n = len(np.asarray(logits).reshape(-1))
    if len(gts) > n:
        raise ValueError(f"{len(gts)} ground truths cannot be matched to {n} proposals")
    if len(gts) == 0:
        return MatchResult([], list(range(n)))
    rows, cols = linear_sum_assignment(match_cost(boxes, logits, gts, image_size))
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    used = {p for p, _ in pairs}
    return MatchResult(pairs, [i for i in range(n) if i not in used])
