"""Turning phantom cases into training samples (z-pooled tensors + targets)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ..features import ZMap, zpool
from ..numerics import DTYPE
from ..phantom import VIEWS, Case


@dataclass
class Sample:
    case_id: str
    volumes: torch.Tensor          # (2, S', H, W)
    boxes: list[torch.Tensor]      # per view (G, 4) malignant finding boxes
    z_gt: list[torch.Tensor]       # per view (G,) downsampled z of the most visible slice
    y: int
    annotated: bool
    zmap: Optional[ZMap] = None
    extra: dict = field(default_factory=dict)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.volumes.shape[-2:])


def prepare_sample(case: Case, s_target: int) -> Sample:
    vols, boxes, zs = [], [], []
    zmap = None
    for view in VIEWS:
        pooled, zmap = zpool(case.volume(view).voxels, s_target)
        vols.append(pooled)
        mal = [f for f in case.findings(view) if f.malignant]
        boxes.append(torch.tensor([f.box for f in mal], dtype=DTYPE).reshape(-1, 4))
        zs.append(torch.tensor([zmap.window_of(f.z_best) for f in mal], dtype=torch.long))
    return Sample(case.case_id, torch.as_tensor(np.stack(vols), dtype=DTYPE), boxes, zs,
                  case.y, case.annotated, zmap)


def flip_sample(s: Sample, horizontal: bool, vertical: bool) -> Sample:
    """Spatial flips of both views; boxes follow, z is untouched."""
    if not (horizontal or vertical):
        return s
    height, width = s.image_size
    vol = s.volumes
    boxes = [b.clone() for b in s.boxes]
    if horizontal:
        vol = vol.flip(-1)
        boxes = [torch.stack([width - b[:, 2], b[:, 1], width - b[:, 0], b[:, 3]], 1) for b in boxes]
    if vertical:
        vol = vol.flip(-2)
        boxes = [torch.stack([b[:, 0], height - b[:, 3], b[:, 2], height - b[:, 1]], 1) for b in boxes]
    return Sample(s.case_id, vol, boxes, s.z_gt, s.y, s.annotated, s.zmap, dict(s.extra))


def slice_sample(s: Sample, slices: tuple[int, int], keep_boxes: bool) -> Sample:
    """Two-view 2D sample made of one (downsampled) slice per view."""
    imgs = torch.stack([s.volumes[v, slices[v]] for v in range(2)])
    boxes = s.boxes if keep_boxes else [b[:0] for b in s.boxes]
    zs = s.z_gt if keep_boxes else [z[:0] for z in s.z_gt]
    # a slice without boxes is still fully labelled when the case has no malignant finding
    annotated = s.annotated if keep_boxes else not s.y
    return Sample(s.case_id, imgs, boxes, zs, s.y, annotated, s.zmap, {"slices": slices})
