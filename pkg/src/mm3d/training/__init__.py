"""Losses, matching, data preparation and the optimization loop."""
from .data import Sample, flip_sample, prepare_sample, slice_sample
from .losses import (LossBreakdown, LossWeights, breast_score, generalized_iou, loss_box, loss_z,
                     noisy_or, total_loss, compute_matches)
from .loop import TrainConfig, TrainResult, TrainingDiverged, TransferReport, train, transfer_weights
from .matching import MatchResult, hungarian_match

__all__ = ["Sample", "flip_sample", "prepare_sample", "slice_sample", "LossBreakdown", "LossWeights",
           "breast_score", "compute_matches", "generalized_iou", "loss_box", "loss_z", "noisy_or", "total_loss",
           "TrainConfig", "TrainResult", "TrainingDiverged", "TransferReport", "train",
           "transfer_weights", "MatchResult", "hungarian_match"]
