"""Stochastic training-time augmentation.

Operations run in a fixed order — random resized crop, horizontal flip,
color jitter, cutout — and each one is skipped entirely when its policy
parameter is the identity value, so an all-default policy returns the
input bit-for-bit. Randomness comes only from the generator passed in
(or freshly seeded from the policy), never from global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (1.0, 1.0)  # area-fraction range
    hflip_prob: float = 0.0
    jitter: float = 0.0  # brightness/contrast strength
    cutout_frac: float = 0.0  # area fraction of the zeroed rectangle
    mixup_alpha: float = 0.0  # consumed by downstream fine-tuning only
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        if self.jitter < 0.0:
            raise ValueError("jitter must be >= 0")
        if not 0.0 <= self.cutout_frac <= 1.0:
            raise ValueError("cutout_frac must be in [0, 1]")
        if self.mixup_alpha < 0.0:
            raise ValueError("mixup_alpha must be >= 0")


def _random_crop(img: np.ndarray, scale: tuple[float, float], rng) -> np.ndarray:
    h, w = img.shape[:2]
    area_frac = float(rng.uniform(scale[0], scale[1]))
    side_frac = math.sqrt(area_frac)
    ch = max(1, round(h * side_frac))
    cw = max(1, round(w * side_frac))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    patch = img[top : top + ch, left : left + cw]
    if (ch, cw) == (h, w):
        return patch
    pil = Image.fromarray(patch)
    return np.asarray(pil.resize((w, h), Image.BILINEAR))


def _jitter(img: np.ndarray, strength: float, rng) -> np.ndarray:
    brightness = 1.0 + float(rng.uniform(-strength, strength))
    contrast = 1.0 + float(rng.uniform(-strength, strength))
    out = img.astype(np.float64)
    mean = out.mean()
    out = (out - mean) * contrast + mean
    out = out * brightness
    return np.clip(out, 0, 255).astype(np.uint8)


def _cutout(img: np.ndarray, frac: float, rng) -> np.ndarray:
    h, w = img.shape[:2]
    ch = min(h, max(1, round(h * math.sqrt(frac))))
    cw = min(w, max(1, round(w * math.sqrt(frac))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = img.copy()
    out[top : top + ch, left : left + cw] = 0
    return out


def augment(
    image: np.ndarray,
    policy: AugmentationPolicy,
    step_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply the policy's enabled operations in fixed order."""
    rng = step_rng if step_rng is not None else np.random.default_rng(policy.rng_seed)
    img = np.asarray(image)

    if policy.crop_scale != (1.0, 1.0):
        img = _random_crop(img, policy.crop_scale, rng)
    if policy.hflip_prob > 0.0 and rng.random() < policy.hflip_prob:
        img = img[:, ::-1].copy()
    if policy.jitter > 0.0:
        img = _jitter(img, policy.jitter, rng)
    if policy.cutout_frac > 0.0:
        img = _cutout(img, policy.cutout_frac, rng)
    return img
