"""Optimization loop, checkpoint selection and weight transfer."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import torch

from ..detector import (Checkpoint, Detector, checkpoint_bytes, forward_2d, forward_3d,
                        load_checkpoint, load_state, parse_checkpoint)
from ..numerics import seeded_stream
from .data import Sample, flip_sample
from .losses import LossWeights, total_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2.5e-5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 10
    seed: int = 0
    flips: bool = True
    z_loss: bool = True
    grad_clip: Optional[float] = 1.0
    # "constant" or "cosine" (per-step decay to 0 over the epoch budget)
    schedule: str = "constant"
    # lr for parameters a transferred checkpoint did not supply (None: same as lr)
    new_lr: Optional[float] = None
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def validate(self) -> "TrainConfig":
        if not (self.lr > 0 and self.weight_decay >= 0 and self.epochs >= 0):
            raise ValueError("lr must be > 0, weight_decay >= 0, epochs >= 0")
        if self.new_lr is not None and not self.new_lr > 0:
            raise ValueError("new_lr must be > 0 when set")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        return self


@dataclass
class TrainResult:
    checkpoint: bytes
    best_epoch: int
    best_score: float
    log: list[dict]
    initial_loss: float
    final_loss: float


def run_forward(model: Detector, inputs: torch.Tensor, mode: str):
    if mode == "3d":
        return forward_3d(model, inputs)
    if mode == "2d":
        return forward_2d(model, inputs)
    raise ValueError(f"unknown forward mode {mode!r}")


def train(model: Detector, samples: Sequence[Sample], cfg: TrainConfig, mode: str = "3d",
          validate: Optional[Callable[[Detector], dict]] = None,
          sample_fn: Optional[Callable] = None,
          on_epoch: Optional[Callable[[dict], None]] = None,
          meta: Optional[dict] = None, fresh: Sequence[str] = ()) -> TrainResult:
    """Per-case AdamW steps over a fixed epoch budget.

    ``sample_fn(sample, rng)`` may replace each sample before the step (e.g. to
    pick a training slice). ``validate(model)`` returns a dict with at least
    ``score``; the best-scoring trained epoch's weights are kept. The initial
    weights are validated and logged as epoch 0 but never selected. Parameters
    named in ``fresh`` train at ``cfg.new_lr`` when it is set.
    """
    cfg.validate()
    if not samples:
        raise ValueError("training set is empty")
    rng = seeded_stream(cfg.seed)
    fresh = set(fresh) if cfg.new_lr is not None else set()
    named = list(model.named_parameters())
    groups = [{"params": [p for n, p in named if n not in fresh], "lr": cfg.lr}]
    if fresh:
        groups.append({"params": [p for n, p in named if n in fresh], "lr": cfg.new_lr})
    opt = torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay, eps=1e-8)
    total_steps = max(1, cfg.epochs * len(samples))
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: 0.5 * (1 + math.cos(math.pi * t / total_steps)))
    else:
        sched = None
    meta = dict(meta or {})
    meta["model"] = model.cfg.to_dict()

    history: list[dict] = []
    best = (checkpoint_bytes(model, meta), 0, -math.inf)
    if validate is not None:
        history.append({"epoch": 0, **validate(model)})
    initial_loss = final_loss = math.nan
    last_ok = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sums: dict[str, float] = {}
        order = rng.permutation(len(samples))
        for step, idx in enumerate(order):
            s = samples[int(idx)]
            if sample_fn is not None:
                s = sample_fn(s, rng)
            if cfg.flips:
                hf, vf = rng.random() < 0.5, rng.random() < 0.5
                s = flip_sample(s, hf, vf)
            out = run_forward(model, s.volumes, mode)
            lb = total_loss(out, s, cfg.weights, z_loss=cfg.z_loss)
            if not torch.isfinite(lb.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step} "
                                       f"(case {s.case_id}); last finite step: {last_ok}")
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            last_ok = {"epoch": epoch, "step": step, "loss": lb.total.item()}
            for k, val in lb.as_floats().items():
                sums[k] = sums.get(k, 0.0) + val
        n = len(order)
        rec = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        if epoch == 1:
            initial_loss = rec["total"]
        final_loss = rec["total"]
        if validate is not None:
            model.eval()
            v = validate(model)
            rec.update(v)
            if v["score"] > best[2]:
                best = (checkpoint_bytes(model, meta), epoch, v["score"])
        else:
            best = (checkpoint_bytes(model, meta), epoch, math.nan)
        rec["wall_s"] = round(time.perf_counter() - t0, 3)
        history.append(rec)
        log.info(json.dumps(rec, sort_keys=True))
        if on_epoch is not None:
            on_epoch(rec)
    model.eval()
    return TrainResult(best[0], best[1], best[2], history, initial_loss, final_loss)


@dataclass
class TransferReport:
    missing: list[str]
    unexpected: list[str]

    @property
    def clean(self) -> bool:
        return not self.missing and not self.unexpected


def transfer_weights(ckpt, model: Detector) -> TransferReport:
    """Load a checkpoint into a model by parameter name; shape clashes are hard errors."""
    if isinstance(ckpt, (bytes, bytearray)):
        ckpt = parse_checkpoint(bytes(ckpt))
    elif not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    missing, unexpected = load_state(model, ckpt, strict=False)
    return TransferReport(missing, unexpected)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
