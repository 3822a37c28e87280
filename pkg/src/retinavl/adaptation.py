"""Downstream adaptation of a pretrained dual encoder.

Covers the four transfer recipes: linear probing (frozen encoder, trained
head), full fine-tuning (separate encoder/head learning rates), label-fraction
subsampling for data-efficiency curves, and dense segmentation through a
multi-tap decoder head on top of the frozen vision transformer.

Checkpoint selection is shared by all trainers: the epoch maximizing
``AUROC + 0.5 * AUPR`` on the validation split wins, earliest epoch on ties.
Probing must leave the encoder bit-identical; :func:`parameter_checksum`
exists so callers (and tests) can hold us to that.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .metrics import MetricUndefinedError, aupr_macro, auroc_macro, dice_iou


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the log up to the failing step."""

    def __init__(self, message: str, log: list):
        super().__init__(message)
        self.log = log


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# --------------------------------------------------------------------------
# classification: probing and fine-tuning
# --------------------------------------------------------------------------

_SELECTION_METRIC = "auroc+0.5*aupr"


@dataclass(frozen=True)
class ProbeConfig:
    """Hyperparameters for classification transfer.

    ``encoder_lr == 0`` *is* probing mode: the encoder stays out of the
    optimizer entirely. Defaults follow the reference recipe (batch 16,
    20 epochs, head lr 5e-4, weight decay 1e-2); fine-tuning runs typically
    lower ``betas`` to (0.9, 0.98) and set ``encoder_lr`` to 5e-7 (ocular)
    or 5e-6 (systemic-health targets).
    """

    epochs: int = 20
    batch_size: int = 16
    head_lr: float = 5e-4
    encoder_lr: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    mixup_alpha: float = 0.0
    mixup_when_probing: bool = False  # by default Mixup is a fine-tuning tool
    selection_metric: str = _SELECTION_METRIC
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.head_lr <= 0:
            raise ValueError("head_lr must be positive")
        if self.encoder_lr < 0:
            raise ValueError("encoder_lr cannot be negative")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay cannot be negative")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha cannot be negative")
        if self.selection_metric != _SELECTION_METRIC:
            raise ValueError(
                f"unsupported selection metric {self.selection_metric!r}; "
                f"only {_SELECTION_METRIC!r} is implemented"
            )

    @property
    def probing(self) -> bool:
        return self.encoder_lr == 0.0


def checkpoint_score(auroc_value: float, aupr_value: float) -> float:
    """Validation selection score: AUROC plus half the AUPR."""
    for name, v in (("auroc", auroc_value), ("aupr", aupr_value)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    return auroc_value + 0.5 * aupr_value


def select_best_epoch(trace: Sequence[tuple[float, float]]) -> int:
    """0-based index of the (AUROC, AUPR) pair with the best score.

    Ties go to the earliest epoch.
    """
    if len(trace) == 0:
        raise ValueError("empty validation trace")
    best_idx = 0
    best = checkpoint_score(*trace[0])
    for i, (a, p) in enumerate(trace[1:], start=1):
        score = checkpoint_score(a, p)
        if score > best:
            best, best_idx = score, i
    return best_idx


def subsample_labels(
    labels: Sequence,
    fraction: float,
    seed: int,
    *,
    classes: Sequence | None = None,
) -> list[int]:
    """Stratified indices keeping max(1, round(fraction * n_c)) per class.

    Returned indices are sorted ascending, so ``fraction=1.0`` reproduces the
    original order. Sampling is without replacement and deterministic per
    seed. ``classes``, when given, pins the set of classes that must appear.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if len(labels) == 0:
        raise ValueError("empty training set")
    by_class: dict = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    if classes is not None:
        missing = [c for c in classes if c not in by_class]
        if missing:
            raise ValueError(f"classes with no samples: {missing}")
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for lab in sorted(by_class, key=str):
        idx = by_class[lab]
        keep = max(1, round(fraction * len(idx)))
        chosen.extend(rng.choice(idx, size=keep, replace=False).tolist())
    return sorted(chosen)


def classification_features(model, mode: str) -> nn.Module:
    """Feature extractor over the vision tower for classification heads.

    ``"projected"`` returns the shared-space embedding (ocular-disease
    recipe); ``"pooled"`` returns the pre-projection class-token feature
    (systemic-health recipe).
    """
    if mode not in ("projected", "pooled"):
        raise ValueError(f"unknown feature mode {mode!r}")
    visual = model.visual if hasattr(model, "visual") else model

    class _Features(nn.Module):
        def __init__(self):
            super().__init__()
            self.visual = visual

        def forward(self, images):
            global_emb, pooled, _, _ = self.visual(images)
            return global_emb if mode == "projected" else pooled

    return _Features()


class LinearHead(nn.Module):
    """The classification head: a single linear layer over features."""

    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.linear = nn.Linear(in_dim, n_classes)

    def forward(self, features):
        return self.linear(features)


def mixup_batch(
    inputs: torch.Tensor,
    targets_onehot: torch.Tensor,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Convex combination of the batch with a shuffled copy of itself."""
    if alpha <= 0:
        return inputs, targets_onehot
    lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(inputs.shape[0]))
    mixed_x = lam * inputs + (1 - lam) * inputs[perm]
    mixed_t = lam * targets_onehot + (1 - lam) * targets_onehot[perm]
    return mixed_x, mixed_t


@dataclass(frozen=True)
class EpochRecord:
    """One classification epoch: training loss and validation metrics."""

    epoch: int
    train_loss: float
    val_auroc: float
    val_aupr: float
    score: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "val_auroc": self.val_auroc,
                "val_aupr": self.val_aupr,
                "score": self.score,
            }
        )


@dataclass
class AdaptationResult:
    best_epoch: int  # 0-based index into `log`
    log: list[EpochRecord] = field(default_factory=list)
    head_state: dict | None = None
    encoder_state: dict | None = None


def _soft_cross_entropy(logits: torch.Tensor, soft_targets: torch.Tensor) -> torch.Tensor:
    return -(soft_targets * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start : start + batch_size].copy())


def _predict_probs(feature_fn, head, images, batch_size: int) -> np.ndarray:
    head.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats = feature_fn(images[start : start + batch_size])
            outs.append(torch.softmax(head(feats), dim=1))
    head.train()
    return torch.cat(outs).double().numpy()


def _onehot(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    return nn.functional.one_hot(labels, n_classes).double().numpy()


def train_classifier(
    encoder: nn.Module,
    head: LinearHead,
    train_data: tuple[torch.Tensor, torch.Tensor],
    val_data: tuple[torch.Tensor, torch.Tensor],
    config: ProbeConfig,
    *,
    augment_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> AdaptationResult:
    """Train the head (and optionally the encoder) on labeled samples.

    ``encoder`` maps inputs to feature vectors — pass the wrapper from
    :func:`classification_features`, or any module (identity included) when
    the inputs already are features. In probing mode the encoder is never
    handed to the optimizer and runs under ``no_grad``, so its parameters
    are bit-identical afterwards. The best-scoring epoch's weights are
    loaded back into ``head`` (and the encoder, when fine-tuning) before
    returning.
    """
    train_x, train_y = train_data
    val_x, val_y = val_data
    n_classes = head.linear.out_features
    rng = np.random.default_rng(config.seed)

    groups = [{"params": list(head.parameters()), "lr": config.head_lr}]
    encoder_params = list(encoder.parameters())
    if not config.probing and encoder_params:
        groups.append({"params": encoder_params, "lr": config.encoder_lr})
    optimizer = torch.optim.AdamW(
        groups, betas=config.betas, weight_decay=config.weight_decay
    )

    use_mixup = config.mixup_alpha > 0 and (not config.probing or config.mixup_when_probing)
    result = AdaptationResult(best_epoch=0)
    best_score = -math.inf
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for idx in _batches(train_x.shape[0], config.batch_size, rng):
            x, y = train_x[idx], train_y[idx]
            if augment_fn is not None:
                x = augment_fn(x)
            optimizer.zero_grad()
            if config.probing:
                with torch.no_grad():
                    feats = encoder(x)
            else:
                feats = encoder(x)
            if use_mixup:
                onehot = nn.functional.one_hot(y, n_classes).to(feats.dtype)
                feats, soft = mixup_batch(feats, onehot, config.mixup_alpha, rng)
                loss = _soft_cross_entropy(head(feats), soft)
            else:
                loss = nn.functional.cross_entropy(head(feats), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch}", log=result.log
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1

        probs = _predict_probs(encoder, head, val_x, config.batch_size)
        targets = _onehot(val_y, n_classes)
        val_auroc = auroc_macro(probs, targets)
        val_aupr = aupr_macro(probs, targets)
        score = checkpoint_score(val_auroc, val_aupr)
        result.log.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / max(n_batches, 1),
                val_auroc=val_auroc,
                val_aupr=val_aupr,
                score=score,
            )
        )
        if score > best_score:
            best_score = score
            result.best_epoch = epoch
            result.head_state = {k: v.clone() for k, v in head.state_dict().items()}
            if not config.probing:
                result.encoder_state = {
                    k: v.clone() for k, v in encoder.state_dict().items()
                }

    head.load_state_dict(result.head_state)
    if result.encoder_state is not None:
        encoder.load_state_dict(result.encoder_state)
    return result


# --------------------------------------------------------------------------
# segmentation: multi-tap decoder over the frozen encoder
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SegHeadConfig:
    """Decoder shape and loss mix for dense segmentation.

    The reference setup taps transformer layers 6/12/18/24 at 448 px input;
    each fusion stage doubles resolution, and a final bilinear resize closes
    any remaining gap to the image size (patch sides need not be powers of
    two). Loss is soft Dice plus binary focal, weighted 1:1 by default.
    """

    tap_layers: tuple[int, ...] = (6, 12, 18, 24)
    decoder_channels: tuple[int, ...] = (256, 128, 64)
    input_side: int = 448
    n_classes: int = 1
    dice_weight: float = 1.0
    focal_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if len(self.tap_layers) < 2:
            raise ValueError("need at least two tap layers to fuse")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ValueError("tap_layers must be strictly increasing")
        if any(t < 1 for t in self.tap_layers):
            raise ValueError("tap layers are 1-based and must be >= 1")
        if len(self.decoder_channels) != len(self.tap_layers) - 1:
            raise ValueError(
                f"{len(self.tap_layers)} taps need "
                f"{len(self.tap_layers) - 1} decoder stages, "
                f"got {len(self.decoder_channels)}"
            )
        if any(c < 1 for c in self.decoder_channels):
            raise ValueError("decoder channels must be positive")
        if self.input_side < 1 or self.n_classes < 1:
            raise ValueError("input_side and n_classes must be positive")
        if self.dice_weight < 0 or self.focal_weight < 0:
            raise ValueError("loss weights cannot be negative")
        if self.focal_gamma < 0 or not 0 <= self.focal_alpha <= 1:
            raise ValueError("focal parameters out of range")


def _fuse_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
    )


class SegmentationHead(nn.Module):
    """Fuses multi-layer patch features into full-resolution logits.

    Deepest tap first: project, then for each shallower tap upsample 2x,
    concatenate the (resized) skip projection, and fuse with convolutions.
    A last bilinear resize plus 1x1 conv lands exactly on the input dims.
    """

    def __init__(self, vision_cfg, cfg: SegHeadConfig):
        super().__init__()
        unknown = [t for t in cfg.tap_layers if t not in vision_cfg.tap_layers]
        if unknown:
            raise ValueError(
                f"encoder does not expose tap layers {unknown}; "
                f"available: {vision_cfg.tap_layers}"
            )
        if cfg.input_side != vision_cfg.image_side:
            raise ValueError(
                f"config input side {cfg.input_side} != encoder image side "
                f"{vision_cfg.image_side}"
            )
        if cfg.input_side % vision_cfg.patch_side != 0:
            raise ValueError("input side must be divisible by the patch side")
        self.cfg = cfg
        self.grid_side = vision_cfg.grid_side
        width = vision_cfg.width
        chans = cfg.decoder_channels
        self.deep_proj = nn.Conv2d(width, chans[0], kernel_size=1)
        self.skip_projs = nn.ModuleList(
            nn.Conv2d(width, chans[i], kernel_size=1) for i in range(len(chans))
        )
        self.fusers = nn.ModuleList(
            _fuse_block(chans[i] + chans[i], chans[min(i + 1, len(chans) - 1)])
            for i in range(len(chans))
        )
        last = chans[-1]
        self.out_conv = nn.Conv2d(last, cfg.n_classes, kernel_size=1)

    def _to_grid(self, tap: torch.Tensor) -> torch.Tensor:
        n, p, c = tap.shape
        g = self.grid_side
        if p != g * g:
            raise ValueError(f"expected {g * g} patch tokens, got {p}")
        return tap.transpose(1, 2).reshape(n, c, g, g)

    def forward(self, layer_features: dict[int, torch.Tensor]) -> torch.Tensor:
        taps = []
        for layer in self.cfg.tap_layers:
            if layer not in layer_features:
                raise ValueError(f"missing features for tap layer {layer}")
            taps.append(self._to_grid(layer_features[layer]))
        x = self.deep_proj(taps[-1])
        for i, shallow in enumerate(reversed(taps[:-1])):
            x = nn.functional.interpolate(
                x, scale_factor=2, mode="bilinear", align_corners=False
            )
            skip = self.skip_projs[i](shallow)
            skip = nn.functional.interpolate(
                skip, size=x.shape[2:], mode="bilinear", align_corners=False
            )
            x = self.fusers[i](torch.cat([x, skip], dim=1))
        side = self.cfg.input_side
        x = nn.functional.interpolate(
            x, size=(side, side), mode="bilinear", align_corners=False
        )
        return self.out_conv(x)


def segmentation_forward(
    head: SegmentationHead, layer_features: dict[int, torch.Tensor]
) -> torch.Tensor:
    """Contract alias: per-pixel logits with spatial dims = input dims."""
    return head(layer_features)


def _flatten_masks(logits: torch.Tensor, gt: torch.Tensor):
    if logits.ndim == 4 and logits.shape[1] == 1:
        logits = logits[:, 0]
    if gt.ndim == 4 and gt.shape[1] == 1:
        gt = gt[:, 0]
    if logits.shape != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs mask {tuple(gt.shape)}")
    return logits.reshape(logits.shape[0], -1), gt.reshape(gt.shape[0], -1).to(logits.dtype)


def soft_dice_loss(logits: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - soft Dice, averaged per sample: 1 - (2*sum(p*g)+s)/(sum(p)+sum(g)+s)."""
    p, g = _flatten_masks(logits, gt)
    p = torch.sigmoid(p)
    inter = (p * g).sum(dim=1)
    dice = (2 * inter + smooth) / (p.sum(dim=1) + g.sum(dim=1) + smooth)
    return (1 - dice).mean()


def focal_loss(
    logits: torch.Tensor, gt: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25
) -> torch.Tensor:
    """Binary focal loss, mean over pixels, with stable log-sigmoid forms."""
    x, g = _flatten_masks(logits, gt)
    p = torch.sigmoid(x)
    log_p = nn.functional.logsigmoid(x)
    log_not_p = nn.functional.logsigmoid(-x)
    pos = -alpha * (1 - p) ** gamma * log_p
    neg = -(1 - alpha) * p**gamma * log_not_p
    return (g * pos + (1 - g) * neg).mean()


def seg_loss(
    logits: torch.Tensor,
    gt: torch.Tensor,
    *,
    dice_weight: float = 1.0,
    focal_weight: float = 1.0,
    focal_gamma: float = 2.0,
    focal_alpha: float = 0.25,
) -> torch.Tensor:
    """Weighted soft-Dice + focal objective for mask training."""
    total = dice_weight * soft_dice_loss(logits, gt)
    if focal_weight != 0:
        total = total + focal_weight * focal_loss(logits, gt, focal_gamma, focal_alpha)
    return total


@dataclass(frozen=True)
class SegTrainConfig:
    """Segmentation-head training loop settings (reference: 100 epochs,
    batch 32, AdamW at 1e-3 on the head only)."""

    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    val_threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("bad optimizer settings")


@dataclass(frozen=True)
class SegEpochRecord:
    epoch: int
    train_loss: float
    val_dice: float

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "train_loss": self.train_loss, "val_dice": self.val_dice}
        )


@dataclass
class SegResult:
    best_epoch: int
    log: list[SegEpochRecord] = field(default_factory=list)
    head_state: dict | None = None


def _encoder_taps(visual, images: torch.Tensor) -> dict[int, torch.Tensor]:
    with torch.no_grad():
        _, _, _, taps = visual(images)
    return taps


def mean_val_dice(
    visual, head: SegmentationHead, images: torch.Tensor, masks: torch.Tensor, threshold: float
) -> float:
    """Mean per-image Dice of thresholded sigmoid predictions."""
    head.eval()
    dices = []
    with torch.no_grad():
        for start in range(0, images.shape[0], 8):
            logits = head(_encoder_taps(visual, images[start : start + 8]))
            pred = (torch.sigmoid(logits[:, 0]) >= threshold).numpy()
            gt = masks[start : start + 8].numpy()
            for p, g in zip(pred, gt):
                try:
                    dices.append(dice_iou(p, g)[0])
                except MetricUndefinedError:
                    continue  # empty-empty pair carries no signal
    head.train()
    if not dices:
        raise MetricUndefinedError("no scorable validation masks")
    return float(np.mean(dices))


def train_segmenter(
    encoder,
    head: SegmentationHead,
    train_data: tuple[torch.Tensor, torch.Tensor],
    val_data: tuple[torch.Tensor, torch.Tensor],
    config: SegTrainConfig,
) -> SegResult:
    """Optimize the segmentation head over a frozen vision encoder.

    ``encoder`` may be the dual model or its vision tower; features are
    extracted under ``no_grad`` so encoder parameters cannot move. Returns
    the best-validation-Dice epoch, with those weights loaded into ``head``.
    """
    visual = encoder.visual if hasattr(encoder, "visual") else encoder
    train_x, train_y = train_data
    val_x, val_y = val_data
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(
        head.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    cfg = head.cfg
    result = SegResult(best_epoch=0)
    best = -math.inf
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for idx in _batches(train_x.shape[0], config.batch_size, rng):
            optimizer.zero_grad()
            logits = head(_encoder_taps(visual, train_x[idx]))
            loss = seg_loss(
                logits,
                train_y[idx],
                dice_weight=cfg.dice_weight,
                focal_weight=cfg.focal_weight,
                focal_gamma=cfg.focal_gamma,
                focal_alpha=cfg.focal_alpha,
            )
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", log=result.log)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        val_dice = mean_val_dice(visual, head, val_x, val_y, config.val_threshold)
        result.log.append(
            SegEpochRecord(
                epoch=epoch, train_loss=epoch_loss / max(n_batches, 1), val_dice=val_dice
            )
        )
        if val_dice > best:
            best = val_dice
            result.best_epoch = epoch
            result.head_state = {k: v.clone() for k, v in head.state_dict().items()}
    head.load_state_dict(result.head_state)
    return result
