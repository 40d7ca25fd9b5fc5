"""Finding-level, MIL and slice-localization losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import math
import torch
import torch.nn.functional as F

from ..detector import HeadOutput3D
from ..numerics import as_tensor
from .matching import MatchResult, hungarian_match


@dataclass
class LossWeights:
    box: float = 2.0
    finding: float = 1.0
    image: float = 1.0
    breast: float = 1.0
    z: float = 1.0


@dataclass
class LossBreakdown:
    l_box: torch.Tensor
    l_cls_finding: torch.Tensor
    l_cls_image: torch.Tensor
    l_cls_breast: torch.Tensor
    l_z: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).detach().item() for k in
                ("l_box", "l_cls_finding", "l_cls_image", "l_cls_breast", "l_z", "total")}


def generalized_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise gIoU of xyxy boxes (..., 4)."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    eh = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def box_pair_loss(pred: torch.Tensor, gt: torch.Tensor, image_size) -> torch.Tensor:
    """Normalized L1 + (1 - gIoU) per pair; pred, gt (P, 4)."""
    height, width = image_size
    scale = pred.new_tensor([width, height, width, height])
    l1 = ((pred - gt).abs() / scale).sum(-1)
    return l1 + (1.0 - generalized_iou(pred, gt))


def loss_box(matches: Sequence[MatchResult], head_boxes: Sequence[torch.Tensor],
             gts: torch.Tensor, image_size, annotated: bool = True) -> torch.Tensor:
    """Mean over all heads' matched pairs of L1 + (1 - gIoU)."""
    terms = []
    if annotated:
        for m, boxes in zip(matches, head_boxes):
            if m.pairs:
                p = torch.tensor([i for i, _ in m.pairs])
                g = torch.tensor([j for _, j in m.pairs])
                terms.append(box_pair_loss(boxes[p], gts[g], image_size))
    if not terms:
        return torch.zeros((), dtype=gts.dtype)
    return torch.cat(terms).mean()


def log1m_noisy_or(logits: torch.Tensor) -> torch.Tensor:
    """log(1 - noisy_or) = sum_n log(1 - sigmoid(l_n)) over the last axis."""
    return -F.softplus(logits).sum(-1)


def noisy_or(logits) -> torch.Tensor:
    """Image score 1 - prod_n (1 - sigmoid(l_n)), computed in log space."""
    logits = logits if isinstance(logits, torch.Tensor) else as_tensor(logits)
    return -torch.expm1(log1m_noisy_or(logits))


def breast_score(score_cc, score_mlo):
    return 0.5 * (score_cc + score_mlo)


def bce_image(logits: torch.Tensor, y: int) -> torch.Tensor:
    """BCE of the noisy-or image score; logits (..., N)."""
    s = log1m_noisy_or(logits)
    if y:
        return -torch.log(-torch.expm1(s))
    return -s


def bce_breast(logits_cc: torch.Tensor, logits_mlo: torch.Tensor, y: int) -> torch.Tensor:
    """BCE of the mean of the two views' noisy-or scores."""
    s = torch.stack([log1m_noisy_or(logits_cc), log1m_noisy_or(logits_mlo)])
    log1m = torch.logsumexp(s, dim=0) - math.log(2.0)  # log(1 - breast score)
    if y:
        return -torch.log(-torch.expm1(log1m))
    return -log1m


def loss_z(ws: Sequence[torch.Tensor], matches: Sequence[MatchResult], z_gt, annotated: bool = True) -> torch.Tensor:
    """Sum over heads and matched pairs of -log w[z_gt, m]. Each w is (S', N)."""
    z_gt = torch.as_tensor(z_gt, dtype=torch.long).reshape(-1)
    total = torch.zeros((), dtype=torch.float64)
    if not annotated:
        return total
    for w, m in zip(ws, matches):
        s = w.shape[0]
        for p, g in m.pairs:
            z = int(z_gt[g])
            if not 0 <= z < s:
                raise ValueError(f"z_gt {z} outside [0, {s})")
            total = total - torch.log(w[z, p])
    return total


def loss_z_regress(z_preds: Sequence[torch.Tensor], matches: Sequence[MatchResult], z_gt) -> torch.Tensor:
    z_gt = torch.as_tensor(z_gt, dtype=torch.float64).reshape(-1)
    total = torch.zeros((), dtype=torch.float64)
    for zp, m in zip(z_preds, matches):
        for p, g in m.pairs:
            total = total + (zp[p] - z_gt[g]).abs()
    return total


def finding_cls_loss(logits: torch.Tensor, match: MatchResult) -> torch.Tensor:
    target = torch.zeros_like(logits)
    for p, _ in match.pairs:
        target[p] = 1.0
    return F.binary_cross_entropy_with_logits(logits, target)


def compute_matches(outputs, sample) -> list[list[MatchResult]]:
    """Per view, per head Hungarian matches of the sample's findings."""
    return [[hungarian_match(h.boxes[v].detach().numpy(), h.logits[v].detach().numpy(),
                             sample.boxes[v].numpy(), sample.image_size) for h in outputs.heads]
            for v in range(2)]


def total_loss(outputs, sample, weights: LossWeights | None = None, z_loss: bool = True,
               matches: Sequence[Sequence[MatchResult]] | None = None) -> LossBreakdown:
    """Full training objective for one two-view case.

    Works on 2D and 3D forward outputs. Finding-level terms (box, proposal
    classification, z) are deep-supervised over all heads and disabled when
    the case carries no annotation; image and breast BCE use the last head.
    ``matches`` (from ``compute_matches``) pins the assignment.
    """
    weights = weights or LossWeights()
    heads = outputs.heads
    image_size = sample.image_size
    zero = torch.zeros((), dtype=torch.float64)
    l_box, l_find, l_z = zero, zero, zero
    if sample.annotated:
        box_terms, find_terms = [], []
        all_matches = compute_matches(outputs, sample) if matches is None else matches
        for v in range(2):
            gts = sample.boxes[v]
            vm = all_matches[v]
            box_terms.append(loss_box(vm, [h.boxes[v] for h in heads], gts, image_size))
            box_terms[-1] = box_terms[-1] * sum(len(m.pairs) for m in vm)
            find_terms += [finding_cls_loss(h.logits[v], m) for h, m in zip(heads, vm)]
            if z_loss and isinstance(heads[0], HeadOutput3D):
                if heads[0].z_pred is not None:
                    l_z = l_z + loss_z_regress([h.z_pred[v] for h in heads], vm, sample.z_gt[v])
                elif heads[0].w is not None:
                    l_z = l_z + loss_z([h.w[v] for h in heads], vm, sample.z_gt[v])
        n_pairs = len(heads) * sum(len(b) for b in sample.boxes)
        if n_pairs:
            l_box = sum(box_terms) / n_pairs
        l_find = torch.stack(find_terms).mean()
    last = heads[-1].logits
    l_img = 0.5 * (bce_image(last[0], sample.y) + bce_image(last[1], sample.y))
    l_breast = bce_breast(last[0], last[1], sample.y)
    total = (weights.box * l_box + weights.finding * l_find + weights.image * l_img
             + weights.breast * l_breast + weights.z * l_z)
    return LossBreakdown(l_box, l_find, l_img, l_breast, l_z, total)
