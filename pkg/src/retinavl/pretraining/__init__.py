"""Contrastive pretraining objectives, LR/EMA schedule, and training loop."""

from retinavl.pretraining.losses import (
    DemographicHeads,
    GramPair,
    LossWeights,
    SimilarityMatrix,
    align_loss,
    clip_loss,
    demographic_losses,
    gram_pair,
    similarity_matrix,
    total_loss,
)
from retinavl.pretraining.schedule import EmaTracker, ema_update, lr_at_step
from retinavl.pretraining.train import (
    LossRecord,
    TrainConfig,
    TrainState,
    init_train_state,
    train_loop,
    train_step,
)

__all__ = [
    "DemographicHeads",
    "EmaTracker",
    "GramPair",
    "LossRecord",
    "LossWeights",
    "SimilarityMatrix",
    "TrainConfig",
    "TrainState",
    "align_loss",
    "clip_loss",
    "demographic_losses",
    "ema_update",
    "gram_pair",
    "init_train_state",
    "lr_at_step",
    "similarity_matrix",
    "total_loss",
    "train_loop",
    "train_step",
]
