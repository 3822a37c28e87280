"""Modality-aware image preparation.

Color fundus photographs (CFP) carry a black border around the circular
retina; the retina is cropped out before resizing. Angiography frames
(FFA) are cropped to their content box and padded to a square so the
aspect ratio survives. Ultra-widefield captures (UWF) are only padded.
Cropping normally comes from an external retina-extraction tool; a plain
intensity-threshold bounding box is the built-in fallback.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

# fallback threshold on the max channel; background borders in fundus
# photography are near-black but rarely exactly zero
CROP_THRESHOLD = 10.0 / 255.0


class UnusableImageError(ValueError):
    """Raised when an image contains no detectable foreground."""


def _foreground_bbox(image: np.ndarray, threshold: float) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) box of pixels brighter than threshold.

    Bounds follow slice convention: rows top:bottom, cols left:right.
    """
    channel_max = image.max(axis=2)
    mask = channel_max > threshold
    if not mask.any():
        raise UnusableImageError("no pixel above background threshold")
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def _pad_to_square(image: np.ndarray) -> np.ndarray:
    """Center the content in a square canvas of the longer side."""
    h, w = image.shape[:2]
    side = max(h, w)
    canvas = np.zeros((side, side, image.shape[2]), dtype=image.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    canvas[top : top + h, left : left + w] = image
    return canvas


def _resize(image: np.ndarray, side: int) -> np.ndarray:
    if image.shape[0] == side and image.shape[1] == side:
        return image
    pil = Image.fromarray(image)
    return np.asarray(pil.resize((side, side), Image.BILINEAR))


def preprocess_image(
    image: np.ndarray,
    modality: str,
    target_side: int,
    *,
    crop_fn=None,
    threshold: float = CROP_THRESHOLD,
) -> np.ndarray:
    """Return a square ``target_side`` x ``target_side`` uint8 image.

    ``modality`` is one of ``"CFP"``, ``"FFA"``, ``"UWF"``. ``crop_fn``,
    when given, replaces the threshold fallback for CFP: it receives the
    image and returns a (top, bottom, left, right) box in slice convention.
    """
    if target_side <= 0:
        raise ValueError("target_side must be positive")
    img = np.asarray(image)
    if img.size == 0:
        raise UnusableImageError("empty image")
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=2)
    if img.dtype != np.uint8:
        # float input is taken as [0, 1]
        img = np.clip(np.asarray(img, dtype=np.float64) * 255.0, 0, 255).astype(np.uint8)
    threshold_u8 = threshold * 255.0

    if modality == "CFP":
        if crop_fn is not None:
            top, bottom, left, right = crop_fn(img)
        else:
            top, bottom, left, right = _foreground_bbox(img, threshold_u8)
        img = img[top:bottom, left:right]
    elif modality == "FFA":
        top, bottom, left, right = _foreground_bbox(img, threshold_u8)
        img = _pad_to_square(img[top:bottom, left:right])
    elif modality == "UWF":
        img = _pad_to_square(img)
    else:
        raise ValueError(f"unknown modality: {modality!r}")

    return _resize(img, target_side)
