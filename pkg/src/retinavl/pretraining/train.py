"""Optimizer state, the single training step, and the manifest-driven loop.

Determinism contract: with a fixed seed and single-worker loading, two runs
produce identical loss-record streams. All stochastic choices (parameter
init, batch order, augmentation draws) come from seeded generators.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from PIL import Image

from retinavl.data.augment import AugmentationPolicy, augment
from retinavl.data.records import DatasetManifest
from retinavl.encoders.checkpoint import save_checkpoint
from retinavl.encoders.models import (
    DualEncoder,
    TextEncoderConfig,
    VisionEncoderConfig,
    build_dual_encoder,
    images_to_tensor,
)
from retinavl.encoders.tokenizer import Tokenizer
from retinavl.pretraining.losses import (
    DemographicHeads,
    LossWeights,
    align_loss,
    clip_loss,
    demographic_losses,
    gram_pair,
    similarity_matrix,
    total_loss,
)
from retinavl.pretraining.schedule import EmaTracker, lr_at_step


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3e-5
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.98)
    epsilon: float = 1e-6
    batch_size: int = 512
    total_steps: int = 486_400
    warmup_steps: int = 200
    ema_decay: float = 0.995
    temperature_init: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be positive")


@dataclass(frozen=True)
class LossRecord:
    step: int
    lr: float
    tau: float
    l_clip: float
    l_align: float
    l_sex: float | None
    l_age: float | None
    total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class NonFiniteLossError(RuntimeError):
    """Aborts training when the objective stops being finite."""

    def __init__(self, record: LossRecord):
        super().__init__(f"non-finite loss at step {record.step}: {record.to_json()}")
        self.record = record


@dataclass
class TrainBatch:
    images: torch.Tensor  # N x 3 x S x S
    tokens: torch.Tensor  # N x L
    sex: torch.Tensor | None = None
    age: torch.Tensor | None = None


@dataclass
class TrainState:
    model: DualEncoder
    optimizer: torch.optim.Optimizer
    ema: EmaTracker
    config: TrainConfig
    weights: LossWeights
    heads: DemographicHeads | None = None
    step: int = 0
    records: list[LossRecord] = field(default_factory=list)


def init_train_state(
    model: DualEncoder,
    config: TrainConfig,
    weights: LossWeights,
    heads: DemographicHeads | None = None,
) -> TrainState:
    """AdamW over all trainable parameters, with the usual no-decay split
    for 1-d tensors (norms, biases, temperature)."""
    if weights.variant == "demographic" and heads is None:
        raise ValueError("demographic variant needs DemographicHeads")
    params = list(model.parameters()) + (list(heads.parameters()) if heads else [])
    decay = [p for p in params if p.ndim > 1]
    no_decay = [p for p in params if p.ndim <= 1]
    optimizer = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.peak_lr,
        betas=config.betas,
        eps=config.epsilon,
    )
    return TrainState(
        model=model,
        optimizer=optimizer,
        ema=EmaTracker(model, config.ema_decay),
        config=config,
        weights=weights,
        heads=heads,
    )


def train_step(batch: TrainBatch, state: TrainState) -> tuple[TrainState, LossRecord]:
    """One gradient update (all parameters incl. temperature), EMA, LR advance."""
    model, weights = state.model, state.weights
    lr = lr_at_step(state.step, state.config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    out = model(batch.images, batch.tokens)
    sim = similarity_matrix(out.image_embeddings, out.text_embeddings, model.tau)
    l_clip = clip_loss(sim)
    l_align = align_loss(gram_pair(out.image_embeddings, out.text_embeddings))
    l_sex = l_age = None
    if weights.variant == "demographic":
        if batch.sex is None or batch.age is None:
            raise ValueError("demographic variant needs sex and age in every batch")
        l_sex, l_age = demographic_losses(out.image_features, state.heads, batch.sex, batch.age)
    loss = total_loss(l_clip, l_align, l_sex, l_age, weights)

    record = LossRecord(
        step=state.step,
        lr=lr,
        tau=float(model.tau.detach()),
        l_clip=float(l_clip.detach()),
        l_align=float(l_align.detach()),
        l_sex=None if l_sex is None else float(l_sex.detach()),
        l_age=None if l_age is None else float(l_age.detach()),
        total=float(loss.detach()),
    )
    if not torch.isfinite(loss):
        raise NonFiniteLossError(record)

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.ema.update(model)
    state.step += 1
    state.records.append(record)
    return state, record


def _load_image(path: str, side: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img)


def train_loop(
    manifest: DatasetManifest,
    config: TrainConfig,
    weights: LossWeights,
    *,
    tokenizer: Tokenizer,
    vision_cfg: VisionEncoderConfig,
    text_cfg: TextEncoderConfig,
    embed_dim: int = 768,
    out_dir: str | os.PathLike,
    policy: AugmentationPolicy | None = None,
    checkpoint_every: int | None = None,
    model: DualEncoder | None = None,
) -> list[str]:
    """Train over a manifest; emit periodic raw+EMA checkpoints and a loss log.

    Returns the checkpoint paths. The demographic variant keeps only
    records carrying both sex and age and refuses to run when none do.
    """
    records = list(manifest.records)
    if weights.variant == "demographic":
        records = [r for r in records if r.sex is not None and r.age is not None]
        if not records:
            raise ValueError(
                "demographic variant: manifest has no records with sex and age"
            )
    if not records:
        raise ValueError("manifest has no trainable records")

    if model is None:
        model = build_dual_encoder(
            vision_cfg,
            text_cfg,
            embed_dim,
            seed=config.seed,
            pad_id=tokenizer.pad_id,
            end_id=tokenizer.end_id,
        )
    heads = DemographicHeads(vision_cfg.width) if weights.variant == "demographic" else None
    state = init_train_state(model, config, weights, heads)

    rng = np.random.default_rng(config.seed)
    side = vision_cfg.image_side
    images = [_load_image(r.image_path, side) for r in records]
    token_seqs = [tokenizer.tokenize(r.report.text, text_cfg.max_tokens) for r in records]

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(os.fspath(out_dir), "loss_log.jsonl")
    every = checkpoint_every or config.total_steps
    paths: list[str] = []

    def save_pair(step: int) -> None:
        paths.append(save_checkpoint(model, step, out_dir, ema=False))
        twin = DualEncoder(
            vision_cfg, text_cfg, embed_dim, pad_id=tokenizer.pad_id, end_id=tokenizer.end_id
        )
        state.ema.copy_to(twin)
        paths.append(save_checkpoint(twin, step, out_dir, ema=True))

    order: list[int] = []
    with open(log_path, "w", encoding="utf-8") as log:
        for _ in range(config.total_steps):
            while len(order) < config.batch_size:
                epoch = list(rng.permutation(len(records)))
                order.extend(epoch)
            take, order = order[: config.batch_size], order[config.batch_size :]
            imgs = []
            for i in take:
                arr = images[i]
                if policy is not None:
                    arr = augment(arr, policy, rng)
                imgs.append(arr)
            batch = TrainBatch(
                images=images_to_tensor(np.stack(imgs)),
                tokens=model.pad_batch([token_seqs[i] for i in take]),
                sex=(
                    torch.tensor([float(records[i].sex) for i in take])
                    if weights.variant == "demographic"
                    else None
                ),
                age=(
                    torch.tensor([float(records[i].age) for i in take])
                    if weights.variant == "demographic"
                    else None
                ),
            )
            _, record = train_step(batch, state)
            log.write(record.to_json() + "\n")
            if state.step % every == 0 or state.step == config.total_steps:
                save_pair(state.step)
    return paths
