"""Float64 tensor substrate, seeded randomness and gradient checking.

Reverse-mode differentiation is provided by torch autograd running on CPU in
double precision. Everything here is single-threaded so that repeated
evaluations are bit-identical.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64

torch.set_num_threads(1)


class NonFiniteError(ValueError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax with explicit max subtraction. Rejects non-finite input."""
    if not isinstance(x, torch.Tensor):
        x = as_tensor(x)
    check_finite(x.detach(), "softmax input")
    shifted = x - x.detach().amax(dim=dim, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def seeded_stream(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x,
    eps: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences.

    For each coordinate the error is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = x.detach().clone().to(DTYPE) if isinstance(x, torch.Tensor) else as_tensor(x)

    xg = x0.clone().requires_grad_(True)
    out = f(xg)
    if out.numel() != 1:
        raise ValueError(f"f must return a scalar, got shape {tuple(out.shape)}")
    (analytic,) = torch.autograd.grad(out.reshape(()), xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xp[i] += eps
            xm = flat.clone()
            xm[i] -= eps
            fp = float(f(xp.reshape(x0.shape)))
            fm = float(f(xm.reshape(x0.shape)))
            numeric[i] = (fp - fm) / (2.0 * eps)

    err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
    worst = float(err.max()) if err.numel() else 0.0
    if math.isnan(worst):
        raise NonFiniteError("gradient check produced NaN")
    return worst
