"""Per-slice backbone, RoI pooling and z-axis downsampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

STRIDE = 4


class Backbone(nn.Module):
    """Three conv3x3 -> GroupNorm -> GELU blocks, stride 4 overall.

    Input (B, H, W) or (B, 1, H, W); output (B, D, ceil(H/4), ceil(W/4)).
    Slices and views are just batch entries, so the parameters are shared.
    """

    def __init__(self, dim: int, width: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(1, width, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(4, width)
        self.conv2 = nn.Conv2d(width, dim, 3, stride=2, padding=1)
        self.norm2 = nn.GroupNorm(4, dim)
        self.conv3 = nn.Conv2d(dim, dim, 3, stride=1, padding=1)
        self.norm3 = nn.GroupNorm(4, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        x = F.gelu(self.norm1(self.conv1(x - 0.5)))
        x = F.gelu(self.norm2(self.conv2(x)))
        return F.gelu(self.norm3(self.conv3(x)))


def clamp_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Clamp xyxy boxes into the image, keeping at least a 1-pixel extent."""
    x1 = boxes[..., 0].clamp(0, width - 1)
    y1 = boxes[..., 1].clamp(0, height - 1)
    x2 = torch.maximum(boxes[..., 2].clamp(max=width), x1 + 1)
    y2 = torch.maximum(boxes[..., 3].clamp(max=height), y1 + 1)
    return torch.stack([x1, y1, x2, y2], dim=-1)


def roi_align(fm: torch.Tensor, boxes: torch.Tensor, k: int, image_size: tuple[int, int],
              stride: int = STRIDE) -> torch.Tensor:
    """Single bilinear sample at each of k*k bin centres.

    fm: (..., D, Hf, Wf); boxes: (..., N, 4) image-pixel xyxy, leading dims
    broadcast against fm's. Returns (..., N, k*k, D), bins in row-major order.
    """
    if k < 1:
        raise ValueError("pool size k must be >= 1")
    height, width = image_size
    if bool(((boxes[..., 2] <= boxes[..., 0]) | (boxes[..., 3] <= boxes[..., 1])).any()):
        raise ValueError("boxes must satisfy x1 < x2 and y1 < y2")
    b = clamp_boxes(boxes, height, width)
    if log.isEnabledFor(logging.DEBUG):
        clipped = (b != boxes).any(-1)
        if bool(clipped.any()):
            log.debug("roi_align: %d boxes clamped to image bounds", int(clipped.sum()))

    d, hf, wf = fm.shape[-3:]
    lead = torch.broadcast_shapes(fm.shape[:-3], b.shape[:-2])
    fm = fm.expand(*lead, d, hf, wf)
    b = b.expand(*lead, *b.shape[-2:])
    n = b.shape[-2]

    t = (torch.arange(k, dtype=b.dtype) + 0.5) / k
    x1, y1, x2, y2 = (b[..., i:i + 1] for i in range(4))
    xs = (x1 + t * (x2 - x1)) / stride  # (..., N, k)
    ys = (y1 + t * (y2 - y1)) / stride
    xs = xs.clamp(0, wf - 1)
    ys = ys.clamp(0, hf - 1)
    gx = xs[..., None, :].expand(*lead, n, k, k)  # [.., n, row, col]
    gy = ys[..., :, None].expand(*lead, n, k, k)
    return _bilinear(fm, gx.reshape(*lead, n * k * k), gy.reshape(*lead, n * k * k)) \
        .reshape(*lead, d, n, k * k).movedim(-3, -1)


def _bilinear(fm: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample fm (..., D, Hf, Wf) at points (..., P) inside [0, Wf-1] x [0, Hf-1]."""
    d, hf, wf = fm.shape[-3:]
    x0 = x.detach().floor().clamp(0, max(wf - 2, 0))
    y0 = y.detach().floor().clamp(0, max(hf - 2, 0))
    ax, ay = x - x0, y - y0
    x0, y0 = x0.long(), y0.long()
    x1 = (x0 + 1).clamp(max=wf - 1)
    y1 = (y0 + 1).clamp(max=hf - 1)
    flat = fm.reshape(*fm.shape[:-2], hf * wf)

    def take(yy, xx):
        idx = (yy * wf + xx).unsqueeze(-2).expand(*flat.shape[:-1], yy.shape[-1])
        return torch.gather(flat, -1, idx)

    ax, ay = ax.unsqueeze(-2), ay.unsqueeze(-2)
    return (take(y0, x0) * (1 - ax) * (1 - ay) + take(y0, x1) * ax * (1 - ay)
            + take(y1, x0) * (1 - ax) * ay + take(y1, x1) * ax * ay)


@dataclass(frozen=True)
class ZMap:
    s_orig: int
    s_target: int
    windows: tuple[tuple[int, int], ...]  # inclusive (lo, hi) per downsampled slice

    def window_of(self, s: int) -> int:
        if not 0 <= s < self.s_orig:
            raise ValueError(f"slice {s} outside [0, {self.s_orig})")
        for j, (lo, hi) in enumerate(self.windows):
            if lo <= s <= hi:
                return j
        raise AssertionError("windows do not partition the volume")


def make_zmap(s_orig: int, s_target: int) -> ZMap:
    if not 1 <= s_target <= s_orig:
        raise ValueError(f"need 1 <= S_target <= S, got S_target={s_target}, S={s_orig}")
    q, r = divmod(s_orig, s_target)
    windows, lo = [], 0
    for j in range(s_target):
        size = q + (1 if j < r else 0)
        windows.append((lo, lo + size - 1))
        lo += size
    return ZMap(s_orig, s_target, tuple(windows))


def zpool(voxels, s_target: int) -> tuple[np.ndarray, ZMap]:
    """Max-pool a (S, H, W) volume down to s_target near-equal contiguous windows."""
    vox = np.asarray(getattr(voxels, "voxels", voxels))
    zmap = make_zmap(vox.shape[0], s_target)
    out = np.stack([vox[lo:hi + 1].max(axis=0) for lo, hi in zmap.windows])
    return out, zmap


def map_z_back(zmap: ZMap, j: int) -> int:
    if not 0 <= j < zmap.s_target:
        raise ValueError(f"downsampled index {j} outside [0, {zmap.s_target})")
    lo, hi = zmap.windows[j]
    return (lo + hi) // 2
