"""Fusion variants that add learnable parameters on top of the 2D detector.

Each is attached to a cascade head as ``head.fusion``; their parameters are
the ones a 2D checkpoint cannot supply.
"""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from ..numerics import softmax


class TimeSformFusion(nn.Module):
    """Joint space-depth attention pooling RoI features over all S'*k*k tokens.

    One query per spatial bin (its depth-averaged feature) attends over every
    token of the proposal's slice stack. The per-slice attention mass, averaged
    over the k*k queries, is the proposal's slice distribution.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.norm_in = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm_out = nn.LayerNorm(dim)

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """f: (V, S', N, P, D) -> (fused (V, N, P, D), w (V, S', N))."""
        v_, s, n, p, d = f.shape
        tokens = f.permute(0, 2, 1, 3, 4).reshape(v_, n, s * p, d)
        query = f.mean(dim=1)  # (V, N, P, D)
        t = self.norm_in(tokens)
        q = self.q(self.norm_in(query))
        attn = softmax(q @ self.k(t).transpose(-1, -2) / math.sqrt(d), dim=-1)  # (V, N, P, S'P)
        fused = self.norm_out(query + self.out(attn @ self.v(t)))
        w = attn.reshape(v_, n, p, s, p).sum(-1).mean(-2)  # (V, N, S')
        return fused, w.permute(0, 2, 1)


class QuerySummaryFusion(nn.Module):
    """Learnable per-proposal queries attending over the proposal's slice features."""

    def __init__(self, n_proposals: int, dim: int):
        super().__init__()
        self.query = nn.Parameter(torch.empty(n_proposals, dim))
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, h_slices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """h_slices: (V, S', N, D) -> (h (V, N, D), w (V, S', N))."""
        d = h_slices.shape[-1]
        q = self.q(self.query)  # (N, D)
        logits = (self.k(h_slices) * q).sum(-1) / math.sqrt(d)  # (V, S', N)
        w = softmax(logits, dim=-2)
        pooled = (w.unsqueeze(-1) * self.v(h_slices)).sum(dim=-3)
        return self.norm(self.out(pooled)), w


class MLPRegressFusion(nn.Module):
    """Concatenate the slice features of a proposal and summarise them with an MLP.

    Also regresses a continuous central slice. The input width binds S'.
    """

    def __init__(self, n_slices: int, dim: int):
        super().__init__()
        self.n_slices = n_slices
        self.fc1 = nn.Linear(n_slices * dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.z_head = nn.Linear(dim, 1)

    def forward(self, h_slices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        v_, s, n, d = h_slices.shape
        if s != self.n_slices:
            raise ValueError(f"MLP-Regress fusion was built for {self.n_slices} slices, got {s}")
        x = h_slices.permute(0, 2, 1, 3).reshape(v_, n, s * d)
        h = self.norm(self.fc2(F.gelu(self.fc1(x))))
        z_pred = 0.5 * (s - 1) + self.z_head(h).squeeze(-1)
        return h, z_pred


def build(cfg) -> nn.Module:
    if cfg.fusion == "timesform":
        return TimeSformFusion(cfg.dim)
    if cfg.fusion == "querysummary":
        return QuerySummaryFusion(cfg.n_proposals, cfg.dim)
    if cfg.fusion == "mlpregress":
        return MLPRegressFusion(cfg.n_slices, cfg.dim)
    raise ValueError(f"no variant module for fusion {cfg.fusion!r}")


def round_slice(z: float) -> int:
    """Nearest slice, ties to even (2.5 -> 2)."""
    return int(round(z))
