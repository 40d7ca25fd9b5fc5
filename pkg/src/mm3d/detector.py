"""Sparse-proposal cascade detector in 2D (two-view mammography) and 3D mode.

The 3D mode reuses every 2D parameter: proposals become volumetric, each
head runs its dynamic convolution once per slice, and the per-slice features
are fused back into one feature per proposal using the head's own
classification logits as slice weights. Nothing is added to the parameter set
unless one of the parameter-heavy fusion variants is selected.

Tensor layout: views sit on axis -3 of proposal tensors (V=2, N, D), slices
on the axis just before the views' proposal axis in 3D, i.e. (V, S', N, D).
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .features import Backbone, roi_align
from .numerics import DTYPE, seeded_stream, softmax

PARAM_FREE_FUSIONS = ("weighted", "mean", "max")
VARIANT_FUSIONS = ("timesform", "querysummary", "mlpregress")
FUSIONS = PARAM_FREE_FUSIONS + VARIANT_FUSIONS

# deltas are (dcx, dcy, dlogw, dlogh); centre deltas are scaled down by these
DELTA_WEIGHTS = (2.0, 2.0, 1.0, 1.0)
MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass
class ModelConfig:
    n_proposals: int = 8
    dim: int = 32
    pool: int = 3
    n_heads: int = 6
    attn_heads: int = 4
    dyn_dim: Optional[int] = None
    ffn_dim: Optional[int] = None
    backbone_width: int = 16
    image_size: tuple[int, int] = (32, 32)
    fusion: str = "weighted"
    n_slices: int = 16  # only binds the mlpregress variant
    detach_boxes: bool = True

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.dyn_dim is None:
            self.dyn_dim = self.dim // 4
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.dim

    def validate(self) -> "ModelConfig":
        if self.n_proposals < 1:
            raise ValueError("n_proposals must be >= 1")
        if self.dim < 8 or self.dim % self.attn_heads or self.dim % 4:
            raise ValueError(f"dim must be >= 8 and divisible by attn_heads and 4, got {self.dim}")
        if self.pool < 1 or self.n_heads < 1:
            raise ValueError("pool and n_heads must be >= 1")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if min(self.image_size) < 8:
            raise ValueError("image extent must be >= 8")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


# -- building blocks --------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        *lead, nq, d = x.shape
        nk = ctx.shape[-2]
        dh = d // self.heads
        q = self.q(x).reshape(*lead, nq, self.heads, dh).transpose(-2, -3)
        k = self.k(ctx).reshape(*lead, nk, self.heads, dh).transpose(-2, -3)
        v = self.v(ctx).reshape(*lead, nk, self.heads, dh).transpose(-2, -3)
        attn = softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        y = (attn @ v).transpose(-2, -3).reshape(*lead, nq, d)
        return self.out(y), attn


class SelfAttn(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, h):
        return self.norm(h + self.attn(h, h)[0])


class CrossAttn(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, h, h_alt):
        return self.norm(h + self.attn(h, h_alt)[0])


class DynamicConv(nn.Module):
    """Per-proposal kernels generated from the proposal feature, applied to its RoI features."""

    def __init__(self, dim: int, dyn_dim: int, pool: int, ffn_dim: int):
        super().__init__()
        self.dim, self.dyn_dim = dim, dyn_dim
        self.dynamic_layer = nn.Linear(dim, 2 * dim * dyn_dim)
        self.norm1 = nn.LayerNorm(dyn_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.out_layer = nn.Linear(pool * pool * dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.norm_res = nn.LayerNorm(dim)
        self.ffn1 = nn.Linear(dim, ffn_dim)
        self.ffn2 = nn.Linear(ffn_dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(self, h: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        """h: (..., N, D); f: (..., N, k*k, D) with leading dims broadcastable."""
        d, dd = self.dim, self.dyn_dim
        params = self.dynamic_layer(h)
        p1 = params[..., : d * dd].reshape(*params.shape[:-1], d, dd)
        p2 = params[..., d * dd:].reshape(*params.shape[:-1], dd, d)
        x = F.gelu(self.norm1(f @ p1))
        x = F.gelu(self.norm2(x @ p2))
        x = F.gelu(self.norm3(self.out_layer(x.flatten(-2))))
        out = self.norm_res(h + x)
        return self.norm_ffn(out + self.ffn2(F.gelu(self.ffn1(out))))


class Head(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.self_attn = SelfAttn(d, cfg.attn_heads)
        self.cross_attn = CrossAttn(d, cfg.attn_heads)
        self.dynamic_conv = DynamicConv(d, cfg.dyn_dim, cfg.pool, cfg.ffn_dim)
        self.cls = nn.Linear(d, 1)
        self.reg = nn.Linear(d, 4)
        if cfg.fusion in VARIANT_FUSIONS:
            from .baselines import variants
            self.fusion = variants.build(cfg)


# -- functional surface -----------------------------------------------------

def self_attn(head: Head, h):
    return head.self_attn(h)


def cross_attn(head: Head, h, h_alt):
    return head.cross_attn(h, h_alt)


def dynamic_conv(head: Head, h_tilde, f):
    return head.dynamic_conv(h_tilde, f)


def cls_module(head: Head, h) -> torch.Tensor:
    return head.cls(h).squeeze(-1)


def apply_deltas(boxes: torch.Tensor, deltas: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """Apply (dcx, dcy, dlogw, dlogh) deltas to xyxy boxes; clamp to the image."""
    height, width = image_size
    wx, wy, ww, wh = DELTA_WEIGHTS
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    cx = cx + deltas[..., 0] / wx * w
    cy = cy + deltas[..., 1] / wy * h
    w = w * torch.exp((deltas[..., 2] / ww).clamp(max=MAX_LOG_SCALE))
    h = h * torch.exp((deltas[..., 3] / wh).clamp(max=MAX_LOG_SCALE))
    cx, cy = cx.clamp(0, width), cy.clamp(0, height)
    w, h = w.clamp(1.0, width), h.clamp(1.0, height)
    out = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)
    lo = out.new_zeros(4)
    hi = out.new_tensor([width, height, width, height])
    return torch.maximum(torch.minimum(out, hi), lo)


def reg_module(head: Head, h, b, image_size) -> torch.Tensor:
    return apply_deltas(b, head.reg(h), image_size)


def fuse_weighted(h_slices: torch.Tensor, m_slices: torch.Tensor):
    """h_slices (..., S', N, D), m_slices (..., S', N) -> (h (..., N, D), w (..., S', N))."""
    w = softmax(m_slices, dim=-2)
    return (w.unsqueeze(-1) * h_slices).sum(dim=-3), w


def fuse_mean(h_slices: torch.Tensor, m_slices: torch.Tensor):
    s = h_slices.shape[-3]
    w = torch.full_like(m_slices, 1.0 / s)
    return (w.unsqueeze(-1) * h_slices).sum(dim=-3), w


def fuse_max(h_slices: torch.Tensor, m_slices: torch.Tensor):
    # torch.argmax returns the first maximal index: ties go to the lowest slice
    idx = torch.argmax(m_slices.detach(), dim=-2)
    w = F.one_hot(idx, m_slices.shape[-2]).movedim(-1, -2).to(h_slices.dtype)
    return (w.unsqueeze(-1) * h_slices).sum(dim=-3), w


FUSE = {"weighted": fuse_weighted, "mean": fuse_mean, "max": fuse_max}


@dataclass
class HeadOutput2D:
    boxes: torch.Tensor   # (..., V, N, 4)
    feats: torch.Tensor   # (..., V, N, D)
    logits: torch.Tensor  # (..., V, N)


@dataclass
class HeadOutput3D:
    boxes: torch.Tensor                      # (V, N, 4)
    feats: torch.Tensor                      # (V, N, D)
    logits: torch.Tensor                     # (V, N) fused-feature logits
    w: Optional[torch.Tensor]                # (V, S', N) finding-slice scores
    m_slices: Optional[torch.Tensor]         # (V, S', N) per-slice logits
    z: torch.Tensor                          # (V, N) downsampled slice index
    fusion_w: Optional[torch.Tensor] = None  # (V, S', N) weights used to fuse features
    z_pred: Optional[torch.Tensor] = None    # (V, N) continuous z (mlpregress)


def head_forward_2d(head: Head, boxes, feats, fm, cfg: ModelConfig) -> HeadOutput2D:
    """One cascade head. fm: (..., V, D, Hf, Wf)."""
    hp = self_attn(head, feats)
    ht = cross_attn(head, hp, hp.flip(-3))
    f = roi_align(fm, boxes, cfg.pool, cfg.image_size)
    h = dynamic_conv(head, ht, f)
    return HeadOutput2D(reg_module(head, h, boxes, cfg.image_size), h, cls_module(head, h))


def head_forward_3d(head: Head, boxes, feats, fms, cfg: ModelConfig) -> HeadOutput3D:
    """One 3D head. fms: (V, S', D, Hf, Wf); boxes (V, N, 4); feats (V, N, D)."""
    hp = self_attn(head, feats)
    ht = cross_attn(head, hp, hp.flip(-3))
    f = roi_align(fms, boxes.unsqueeze(-3), cfg.pool, cfg.image_size)  # (V, S', N, k*k, D)
    fusion_w = m_slices = z_pred = None
    if cfg.fusion == "timesform":
        f_fused, w = head.fusion(f)
        h = dynamic_conv(head, ht, f_fused)
        fusion_w = w
    else:
        h_slices = dynamic_conv(head, ht.unsqueeze(-3), f)  # (V, S', N, D)
        m_slices = cls_module(head, h_slices)
        if cfg.fusion in FUSE:
            h, fusion_w = FUSE[cfg.fusion](h_slices, m_slices)
            w = softmax(m_slices, dim=-2)
        elif cfg.fusion == "querysummary":
            h, w = head.fusion(h_slices)
            fusion_w = w
        else:  # mlpregress
            h, z_pred = head.fusion(h_slices)
            w = None
    if w is not None:
        z = torch.argmax(w.detach(), dim=-2)
    else:
        s = cfg.n_slices
        z = torch.round(z_pred.detach().clamp(0, s - 1)).long()  # round half to even
    if w is not None and CONTRACT_CHECKS["enabled"]:
        check_slice_weights(w, z)
        CONTRACT_CHECKS["count"] += 1
    m = cls_module(head, h)
    return HeadOutput3D(reg_module(head, h, boxes, cfg.image_size), h, m, w, m_slices, z,
                        fusion_w, z_pred)


# opt-in runtime check of the slice-weight contract (the test suite turns it on)
CONTRACT_CHECKS = {"enabled": False, "count": 0}


def check_slice_weights(w: torch.Tensor, z: torch.Tensor, tol: float = 1e-9) -> None:
    """Every w column sums to 1 within tol, w > 0 and z is its argmax."""
    w = w.detach()
    err = float((w.sum(dim=-2) - 1).abs().max())
    if err > tol:
        raise AssertionError(f"slice weights do not sum to 1 (max error {err:.3g})")
    if not bool((w > 0).all()):
        raise AssertionError("slice weights must be strictly positive")
    if not torch.equal(z, torch.argmax(w, dim=-2)):
        raise AssertionError("z is not the argmax of the slice weights")


# -- model ------------------------------------------------------------------

class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        self.backbone = Backbone(cfg.dim, cfg.backbone_width)
        self.init_boxes = nn.Parameter(torch.empty(cfg.n_proposals, 4))
        self.init_feats = nn.Parameter(torch.empty(cfg.n_proposals, cfg.dim))
        self.heads = nn.ModuleList([Head(cfg) for _ in range(cfg.n_heads)])
        self.to(DTYPE)
        init_parameters(self, seed)

    def initial_state(self, lead: tuple[int, ...] = ()) -> tuple[torch.Tensor, torch.Tensor]:
        height, width = self.cfg.image_size
        cx, cy, w, h = self.init_boxes.unbind(-1)
        b = torch.stack([(cx - w / 2) * width, (cy - h / 2) * height,
                         (cx + w / 2) * width, (cy + h / 2) * height], dim=-1)
        shape_b = (*lead, 2, *b.shape)
        shape_h = (*lead, 2, *self.init_feats.shape)
        return b.expand(shape_b), self.init_feats.expand(shape_h)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Fill all parameters from a Philox stream, in manifest order."""
    rng = seeded_stream(seed)
    owners = {}
    for mname, mod in model.named_modules():
        for pname, _ in mod.named_parameters(recurse=False):
            owners[f"{mname}.{pname}" if mname else pname] = mod
    with torch.no_grad():
        for name, p in model.named_parameters():
            mod = owners[name]
            leaf = name.rsplit(".", 1)[-1]
            if name == "init_boxes":
                vals = np.tile([0.5, 0.5, 1.0, 1.0], (p.shape[0], 1))
            elif name == "init_feats" or leaf == "query":
                vals = 0.02 * rng.standard_normal(p.shape)
            elif isinstance(mod, (nn.LayerNorm, nn.GroupNorm)):
                vals = np.ones(p.shape) if leaf == "weight" else np.zeros(p.shape)
            elif leaf == "bias":
                vals = np.zeros(p.shape)
                if name.endswith("cls.bias"):
                    vals[:] = -math.log(99.0)  # prior probability 0.01
            else:
                fan_out = p.shape[0] * int(np.prod(p.shape[2:]))
                fan_in = int(np.prod(p.shape[1:]))
                a = math.sqrt(6.0 / (fan_in + fan_out))
                if name.endswith("reg.weight"):
                    a *= 0.1
                vals = rng.uniform(-a, a, size=p.shape)
            p.copy_(torch.as_tensor(vals, dtype=p.dtype))


def build_model(cfg: ModelConfig, seed: int = 0) -> Detector:
    return Detector(cfg, seed)


def init_proposals(model: Detector) -> tuple[torch.Tensor, torch.Tensor]:
    """(b0 in image pixels xyxy, h0) for a single view."""
    b, h = model.initial_state()
    return b[0], h[0]


def _check_images(model: Detector, x: torch.Tensor, what: str) -> None:
    if tuple(x.shape[-2:]) != tuple(model.cfg.image_size):
        raise ValueError(f"{what} spatial size {tuple(x.shape[-2:])} does not match "
                         f"model image_size {model.cfg.image_size}")


@dataclass
class Forward2D:
    heads: list[HeadOutput2D]


@dataclass
class Forward3D:
    heads: list[HeadOutput3D]


def forward_2d(model: Detector, images) -> Forward2D:
    """images: (..., 2, H, W), CC then MLO. Leading dims are independent batches."""
    x = torch.as_tensor(images, dtype=DTYPE)
    if x.dim() < 3 or x.shape[-3] != 2:
        raise ValueError(f"expected (..., 2, H, W) two-view images, got {tuple(x.shape)}")
    _check_images(model, x, "images")
    lead = tuple(x.shape[:-3])
    fm = model.backbone(x.reshape(-1, *x.shape[-2:]))
    fm = fm.reshape(*lead, 2, *fm.shape[-3:])
    b, h = model.initial_state(lead)
    outs = []
    for head in model.heads:
        o = head_forward_2d(head, b, h, fm, model.cfg)
        outs.append(o)
        b = o.boxes.detach() if model.cfg.detach_boxes else o.boxes
        h = o.feats
    return Forward2D(outs)


def forward_3d(model: Detector, volumes) -> Forward3D:
    """volumes: (2, S', H, W), CC then MLO, already z-pooled."""
    x = torch.as_tensor(volumes, dtype=DTYPE)
    if x.dim() != 4 or x.shape[0] != 2:
        raise ValueError(f"expected (2, S', H, W) two-view volumes, got {tuple(x.shape)}")
    _check_images(model, x, "volumes")
    if model.cfg.fusion == "mlpregress" and x.shape[1] != model.cfg.n_slices:
        raise ValueError(f"mlpregress model was built for {model.cfg.n_slices} slices, got {x.shape[1]}")
    s = x.shape[1]
    fm = model.backbone(x.reshape(-1, *x.shape[-2:]))
    fm = fm.reshape(2, s, *fm.shape[-3:])
    b, h = model.initial_state()
    outs = []
    for head in model.heads:
        o = head_forward_3d(head, b, h, fm, model.cfg)
        outs.append(o)
        b = o.boxes.detach() if model.cfg.detach_boxes else o.boxes
        h = o.feats
    return Forward3D(outs)


# -- parameter manifest and checkpoints -------------------------------------

CKPT_MAGIC = b"MM3DCKPT1"
_LEN = struct.Struct("<Q")


class CheckpointFormatError(ValueError):
    pass


def param_manifest(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def manifest_diff(a, b) -> dict[str, list]:
    da, db = dict(a), dict(b)
    return {
        "only_in_a": [n for n in da if n not in db],
        "only_in_b": [n for n in db if n not in da],
        "shape_mismatch": [n for n in da if n in db and tuple(da[n]) != tuple(db[n])],
    }


def checkpoint_bytes(model: nn.Module, meta: Optional[dict] = None) -> bytes:
    manifest = param_manifest(model)
    header = json.dumps({"manifest": [[n, list(s)] for n, s in manifest], "meta": meta or {}},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(_LEN.pack(len(header)))
    buf.write(header)
    for _, p in model.named_parameters():
        buf.write(np.ascontiguousarray(p.detach().numpy(), dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: nn.Module, path, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


@dataclass
class Checkpoint:
    manifest: list[tuple[str, tuple[int, ...]]]
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    m = len(CKPT_MAGIC)
    if raw[:m] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic at byte offset 0")
    if len(raw) < m + _LEN.size:
        raise CheckpointFormatError(f"{source}: truncated header length at byte offset {m}")
    (hlen,) = _LEN.unpack_from(raw, m)
    start = m + _LEN.size
    if len(raw) < start + hlen:
        raise CheckpointFormatError(f"{source}: truncated manifest at byte offset {len(raw)}, "
                                    f"expected {start + hlen}")
    try:
        header = json.loads(raw[start:start + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{source}: unreadable manifest at byte offset {start}: {e}") from None
    manifest = [(n, tuple(s)) for n, s in header["manifest"]]
    offset = start + hlen
    tensors = {}
    for name, shape in manifest:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(raw) < offset + nbytes:
            raise CheckpointFormatError(
                f"{source}: payload for {name!r} truncated at byte offset {len(raw)}, "
                f"expected {offset + nbytes}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{source}: {len(raw) - offset} trailing bytes at byte offset {offset}")
    return Checkpoint(manifest, tensors, header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def load_state(model: nn.Module, ckpt: Checkpoint, strict: bool = True) -> tuple[list[str], list[str]]:
    """Copy parameters by name. Returns (missing, unexpected)."""
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in ckpt.tensors]
    unexpected = [n for n in ckpt.tensors if n not in params]
    for name, arr in ckpt.tensors.items():
        if name not in params:
            continue
        if tuple(params[name].shape) != tuple(arr.shape):
            raise CheckpointFormatError(f"shape mismatch for parameter {name!r}: "
                                        f"model {tuple(params[name].shape)} vs checkpoint {tuple(arr.shape)}")
    with torch.no_grad():
        for name, arr in ckpt.tensors.items():
            if name in params:
                params[name].copy_(torch.as_tensor(np.array(arr), dtype=params[name].dtype))
    if strict and (missing or unexpected):
        raise CheckpointFormatError(f"missing={missing} unexpected={unexpected}")
    return missing, unexpected


def model_from_checkpoint(ckpt: Checkpoint, **overrides) -> Detector:
    cfg_d = dict(ckpt.meta.get("model", {}))
    cfg_d.update(overrides)
    model = Detector(ModelConfig(**cfg_d))
    load_state(model, ckpt, strict=True)
    return model
