"""Patch-text similarity heatmaps and threshold-free localization scoring.

The pipeline: projected, unit-norm patch features from the vision encoder are
scored against one text embedding per cell (plain cosine), the coarse grid is
bilinearly upsampled to image resolution, and the resulting heatmap is
evaluated against a pixel ground truth two ways — best-achievable Dice over a
threshold sweep, and per-region overlap (PRO) integrated over the low-FPR
regime. A progressive-masking study quantifies whether the heatmap actually
marks the pixels a classifier relies on.

Scoring conventions:

* Threshold sweeps use every distinct heatmap value when there are at most
  4,096 of them (exact at test scale), otherwise 1,024 quantile-spaced
  thresholds.
* Connected regions use 8-connectivity.
* The PRO curve starts at the empty prediction (FPR 0, overlap 0), is
  trapezoid-integrated up to ``fpr_cap`` with linear interpolation at the
  boundary, extends flat if the curve ends early, and is normalized by the
  cap.
"""

from __future__ import annotations

import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MAX_EXACT_THRESHOLDS = 4096
N_QUANTILE_THRESHOLDS = 1024
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Heatmap:
    """A similarity map at patch resolution and upsampled to the image."""

    grid: np.ndarray  # G x G raw cosine scores
    upsampled: np.ndarray  # H x W, bilinear interpolation of `grid`
    norm_bounds: tuple[float, float]  # (min, max) of `upsampled`

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=np.float64))
        object.__setattr__(
            self, "upsampled", np.asarray(self.upsampled, dtype=np.float64)
        )
        if self.grid.ndim != 2 or self.upsampled.ndim != 2:
            raise ValueError("heatmap grids must be 2-D")
        lo, hi = self.norm_bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise ValueError(f"bad normalization bounds ({lo}, {hi})")

    def normalized(self) -> np.ndarray:
        """Min-max rescaled upsampled map in [0, 1]; constant maps go to 0."""
        lo, hi = self.norm_bounds
        if hi == lo:
            return np.zeros_like(self.upsampled)
        return (self.upsampled - lo) / (hi - lo)


@dataclass(frozen=True)
class GroundTruthMask:
    """Binary pixel mask plus its 8-connected positive regions."""

    mask: np.ndarray  # H x W in {0, 1}
    regions: tuple[np.ndarray, ...]  # boolean mask per connected component

    @classmethod
    def from_array(cls, mask) -> "GroundTruthMask":
        arr = np.asarray(mask)
        if arr.ndim != 2:
            raise ValueError("ground truth must be 2-D")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("ground truth must be binary {0,1}")
        arr = arr.astype(bool)
        labeled, n = ndimage.label(arr, structure=EIGHT_CONNECTED)
        regions = tuple(labeled == k for k in range(1, n + 1))
        return cls(mask=arr, regions=regions)

    def __post_init__(self):
        covered = np.zeros_like(self.mask, dtype=bool)
        for region in self.regions:
            if not region.any():
                raise ValueError("empty region")
            if (covered & region).any():
                raise ValueError("regions overlap")
            covered |= region
        if not np.array_equal(covered, self.mask.astype(bool)):
            raise ValueError("regions do not partition the positive pixels")


def _as_gt(gt) -> GroundTruthMask:
    return gt if isinstance(gt, GroundTruthMask) else GroundTruthMask.from_array(gt)


def similarity_heatmap(patch_grid, text_embedding) -> np.ndarray:
    """Cosine similarity of each patch feature against one text embedding.

    Accepts features as ``(G, G, D)`` or as a flat ``(P, D)`` sequence with
    square ``P`` (the encoder's row-major patch order).
    """
    feats = np.asarray(patch_grid, dtype=np.float64)
    if feats.ndim == 2:
        side = int(round(feats.shape[0] ** 0.5))
        if side * side != feats.shape[0]:
            raise ValueError(f"{feats.shape[0]} patches do not form a square grid")
        feats = feats.reshape(side, side, feats.shape[1])
    if feats.ndim != 3:
        raise ValueError(f"patch features must be (G, G, D), got {feats.shape}")
    text = np.asarray(text_embedding, dtype=np.float64).ravel()
    if feats.shape[2] != text.size:
        raise ValueError(
            f"feature dim {feats.shape[2]} vs text embedding dim {text.size}"
        )
    t_norm = float(np.linalg.norm(text))
    f_norm = np.linalg.norm(feats, axis=2)
    if t_norm == 0.0 or np.any(f_norm == 0.0):
        raise ValueError("zero-norm vector has no cosine similarity")
    return (feats @ text) / (f_norm * t_norm)


def upsample_heatmap(grid, target: tuple[int, int]) -> np.ndarray:
    """Bilinear upsample with corner alignment: corners map onto corners.

    A constant grid stays constant and outputs never leave the input's
    [min, max] (the interpolation weights are a convex combination).
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grid must be 2-D")
    height, width = target
    if height < g.shape[0] or width < g.shape[1]:
        raise ValueError(
            f"target {target} is smaller than the grid {g.shape}; refusing to downsample"
        )
    if (height, width) == g.shape:
        return g.copy()

    def source_coords(n_target: int, n_source: int) -> np.ndarray:
        if n_target == 1 or n_source == 1:
            return np.zeros(n_target)
        return np.arange(n_target) * (n_source - 1) / (n_target - 1)

    ys = source_coords(height, g.shape[0])
    xs = source_coords(width, g.shape[1])
    y0 = np.minimum(np.floor(ys).astype(int), g.shape[0] - 1)
    x0 = np.minimum(np.floor(xs).astype(int), g.shape[1] - 1)
    y1 = np.minimum(y0 + 1, g.shape[0] - 1)
    x1 = np.minimum(x0 + 1, g.shape[1] - 1)
    dy = (ys - y0)[:, None]
    dx = (xs - x0)[None, :]
    # lerp form a + (b-a)*t is exact when a == b, so constant grids (and
    # on-lattice samples) pass through bit-identically; the final clip pins
    # the at-most-one-ulp rounding excursions back inside the input range
    top = g[np.ix_(y0, x0)] + (g[np.ix_(y0, x1)] - g[np.ix_(y0, x0)]) * dx
    bottom = g[np.ix_(y1, x0)] + (g[np.ix_(y1, x1)] - g[np.ix_(y1, x0)]) * dx
    out = top + (bottom - top) * dy
    return np.clip(out, g.min(), g.max())


def compute_heatmap(patch_grid, text_embedding, target: tuple[int, int]) -> Heatmap:
    """similarity_heatmap + upsample_heatmap + min-max record, bundled."""
    grid = similarity_heatmap(patch_grid, text_embedding)
    up = upsample_heatmap(grid, target)
    return Heatmap(grid=grid, upsampled=up, norm_bounds=(float(up.min()), float(up.max())))


def _candidate_thresholds(values: np.ndarray) -> np.ndarray:
    """Distinct values when few enough to sweep exactly, else quantiles."""
    distinct = np.unique(values)
    if distinct.size <= MAX_EXACT_THRESHOLDS:
        return distinct
    qs = np.linspace(0.0, 1.0, N_QUANTILE_THRESHOLDS)
    return np.unique(np.quantile(values, qs))


def best_threshold_segmentation(heatmap, gt) -> tuple[float, float, float]:
    """Best-achievable segmentation: (threshold, DSC, IoU) maximizing DSC.

    Predictions are ``heatmap >= threshold``. Ties on DSC keep the lowest
    threshold. The returned IoU is the one at the DSC-optimal threshold
    (DSC and IoU are monotonically related, so it is also the best IoU).
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    truth = _as_gt(gt)
    if heat.shape != truth.mask.shape:
        raise ValueError(f"heatmap {heat.shape} vs ground truth {truth.mask.shape}")
    gt_count = int(truth.mask.sum())
    if gt_count == 0:
        raise ValueError("ground truth has no positive pixels; score undefined")

    best = None
    for t in _candidate_thresholds(heat.ravel()):
        pred = heat >= t
        inter = int((pred & truth.mask).sum())
        n_pred = int(pred.sum())
        dsc = 2.0 * inter / (n_pred + gt_count)
        if best is None or dsc > best[1]:
            iou = inter / (n_pred + gt_count - inter)
            best = (float(t), dsc, iou)
    return best


def pro_curve(heatmap, gt) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, mean per-region overlap) points for decreasing thresholds.

    Starts at the empty prediction (0, 0); each subsequent point admits one
    more distinct heatmap value. FPR is counted over background pixels; a
    mask covering the whole image has no background and FPR stays 0.
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    truth = _as_gt(gt)
    if heat.shape != truth.mask.shape:
        raise ValueError(f"heatmap {heat.shape} vs ground truth {truth.mask.shape}")
    if not truth.regions:
        raise ValueError("ground truth has no positive pixels; PRO undefined")
    background = ~truth.mask
    n_background = int(background.sum())
    region_sizes = np.array([int(r.sum()) for r in truth.regions], dtype=np.float64)

    fprs = [0.0]
    overlaps = [0.0]
    for t in _candidate_thresholds(heat.ravel())[::-1]:
        pred = heat >= t
        per_region = np.array(
            [int((pred & region).sum()) for region in truth.regions], dtype=np.float64
        )
        overlaps.append(float(np.mean(per_region / region_sizes)))
        fp = int((pred & background).sum())
        fprs.append(fp / n_background if n_background else 0.0)
    return np.asarray(fprs), np.asarray(overlaps)


def pro_score(heatmap, gt, fpr_cap: float = 0.3) -> float:
    """Mean per-region overlap integrated over FPR in [0, fpr_cap], / cap."""
    if not 0.0 < fpr_cap <= 1.0:
        raise ValueError(f"fpr_cap must be in (0, 1], got {fpr_cap}")
    fprs, overlaps = pro_curve(heatmap, gt)
    area = 0.0
    for x0, y0, x1, y1 in zip(fprs[:-1], overlaps[:-1], fprs[1:], overlaps[1:]):
        if x1 <= fpr_cap:
            area += (x1 - x0) * (y0 + y1) / 2.0
        elif x0 < fpr_cap:
            y_cap = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0)
            area += (fpr_cap - x0) * (y0 + y_cap) / 2.0
    if fprs[-1] < fpr_cap:  # curve saturated before the cap: extend flat
        area += (fpr_cap - fprs[-1]) * overlaps[-1]
    return area / fpr_cap


@dataclass(frozen=True)
class MaskingPoint:
    """One row of the progressive-masking study report."""

    fraction: float
    pixels_masked: int
    value: float


def mask_top_pixels(image, heatmap, fraction: float, fill: np.ndarray) -> np.ndarray:
    """Copy of `image` with the round(fraction*H*W) hottest pixels filled.

    Ties in the heatmap break toward the earlier pixel in row-major order,
    so the masked set is deterministic.
    """
    img = np.asarray(image, dtype=np.float64)
    heat = np.asarray(heatmap, dtype=np.float64)
    if img.shape[:2] != heat.shape:
        raise ValueError(f"image {img.shape[:2]} vs heatmap {heat.shape}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"mask fraction must be in [0, 1], got {fraction}")
    n_mask = int(round(fraction * heat.size))
    out = img.copy()
    if n_mask == 0:
        return out
    order = np.argsort(-heat.ravel(), kind="stable")[:n_mask]
    rows, cols = np.unravel_index(order, heat.shape)
    out[rows, cols] = fill
    return out


def masking_study(
    images: np.ndarray,
    heatmaps: np.ndarray,
    percentages: Sequence[float],
    classifier: Callable[[np.ndarray], np.ndarray],
    metric: Callable[[np.ndarray], float],
    *,
    fill: str = "mean",
) -> list[MaskingPoint]:
    """Progressively occlude the top-activated pixels and re-score.

    ``classifier`` maps an image batch to per-sample scores; ``metric``
    reduces those scores to one number (closing over whatever labels it
    needs). Masked pixels are replaced by the per-channel mean of the
    *input* images (``fill="mean"``) or by zeros (``fill="black"``); the
    mean avoids handing the classifier out-of-distribution black holes.
    """
    imgs = np.asarray(images, dtype=np.float64)
    heats = np.asarray(heatmaps, dtype=np.float64)
    if imgs.ndim != 4:
        raise ValueError("images must be (N, H, W, C)")
    if heats.shape != imgs.shape[:3]:
        raise ValueError(f"heatmaps {heats.shape} vs images {imgs.shape[:3]}")
    for p in percentages:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"mask percentage {p} outside [0, 1]")
    if fill == "mean":
        fill_value = imgs.mean(axis=(0, 1, 2))
    elif fill == "black":
        fill_value = np.zeros(imgs.shape[3])
    else:
        raise ValueError(f"unknown fill mode {fill!r}")

    report = []
    for p in percentages:
        masked = np.stack(
            [mask_top_pixels(img, heat, p, fill_value) for img, heat in zip(imgs, heats)]
        )
        value = float(metric(classifier(masked)))
        n_mask = int(round(p * heats.shape[1] * heats.shape[2]))
        report.append(MaskingPoint(fraction=float(p), pixels_masked=n_mask, value=value))
    return report


def export_heatmap(heatmap: Heatmap, path: str | os.PathLike) -> None:
    """Raw float map as .npy next to nothing else; overlay is separate."""
    np.save(path, heatmap.upsampled)


def save_heatmap_overlay(
    image,
    heatmap: Heatmap,
    path: str | os.PathLike,
    *,
    alpha: float = 0.5,
    cmap: str = "jet",
) -> None:
    """Blend the normalized heatmap over the image and write a PNG."""
    from matplotlib import colormaps
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.max() > 1.0:
        img = img / 255.0
    norm = heatmap.normalized()
    if norm.shape != img.shape[:2]:
        raise ValueError(f"heatmap {norm.shape} vs image {img.shape[:2]}")
    colors = colormaps[cmap](norm)[:, :, :3]
    blended = (1 - alpha) * img + alpha * colors
    out = (np.clip(blended, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(out).save(path, format="PNG")
