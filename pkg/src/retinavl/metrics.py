"""Classification, overlap, and regression metrics.

Everything operates on plain numpy arrays. Binary metrics take a score
vector and a {0,1} label vector; multi-class inputs go through the
``*_macro`` wrappers, which compute per-class one-vs-rest values and reduce
them with :func:`macro_average`.

Tie conventions are part of the contract and are oracle-tested:

* ``auroc`` gives tied positive/negative pairs 0.5 credit (the
  Mann-Whitney convention).
* ``aupr`` uses threshold-grouped step integration: all samples sharing a
  score flip together, and the area is accumulated left-to-right over
  distinct thresholds, from high scores to low.
* Confusion-matrix ratios with a 0/0 denominator are ``nan`` (undefined),
  except F1 which is computed as ``2*TP / (2*TP + FP + FN)`` and is only
  ``nan`` when that denominator is zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class MetricUndefinedError(ValueError):
    """The requested metric has no defined value on this input."""


def _validate_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise MetricUndefinedError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary {0,1}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic.

    Equals P(score+ > score-) + 0.5 * P(score+ == score-) over all
    positive/negative pairs.
    """
    s, y = _validate_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both classes present")
    ranks = rankdata(s)  # average ranks; ties get x.5 values, exact in float
    num = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return num / (n_pos * n_neg)


def aupr(scores, labels) -> float:
    """Area under the precision-recall curve, step-interpolated.

    Thresholds are the distinct score values in decreasing order; every
    sample tied at a threshold flips to predicted-positive together.
    """
    s, y = _validate_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("AUPR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    # last index of each tied group = one threshold step
    boundaries = np.nonzero(np.diff(s_sorted))[0]
    steps = np.append(boundaries, s.size - 1)
    area = 0.0
    prev_recall = 0.0
    for i in steps:  # sequential accumulation keeps the sum order-defined
        tp_i = int(tp[i])
        recall = tp_i / n_pos
        precision = tp_i / (i + 1)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def macro_average(values, names=None) -> float:
    """Unweighted mean over classes with defined (non-nan) values.

    Undefined classes are reported through a warning rather than silently
    dropped; if every class is undefined this is an error.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise MetricUndefinedError("macro average of zero classes")
    defined = ~np.isnan(vals)
    if not defined.any():
        raise MetricUndefinedError("macro average undefined for every class")
    if not defined.all():
        bad = np.nonzero(~defined)[0]
        labels = [str(names[i]) if names is not None else str(i) for i in bad]
        warnings.warn(
            f"macro average over {int(defined.sum())}/{vals.size} classes; "
            f"undefined: {', '.join(labels)}",
            RuntimeWarning,
            stacklevel=2,
        )
    return float(np.mean(vals[defined]))


@dataclass(frozen=True)
class ConfusionMetrics:
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int


def confusion_metrics(scores, labels, threshold: float) -> ConfusionMetrics:
    """Thresholded confusion-matrix metrics; positive iff score >= threshold."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    s, y = _validate_binary(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    acc = (tp + tn) / y.size
    sens = tp / (tp + fn) if (tp + fn) > 0 else float("nan")
    spec = tn / (tn + fp) if (tn + fp) > 0 else float("nan")
    prec = tp / (tp + fp) if (tp + fp) > 0 else float("nan")
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else float("nan")
    return ConfusionMetrics(acc, sens, spec, prec, f1, tp, fp, tn, fn)


def sensitivity_at_specificity(scores, labels, target: float = 0.95) -> float:
    """Highest sensitivity among thresholds whose specificity >= target."""
    if not 0.0 <= target <= 1.0:
        raise ValueError("target specificity must be in [0,1]")
    s, y = _validate_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("needs both classes present")
    best = 0.0
    # distinct scores as thresholds plus one above the max (all-negative)
    for t in np.concatenate([np.unique(s), [s.max() + 1.0]]):
        pred = s >= t
        tn = int(np.sum(~pred & (y == 0)))
        spec = tn / n_neg
        if spec >= target:
            sens = int(np.sum(pred & (y == 1))) / n_pos
            if sens > best:
                best = sens
    return best


def optimize_threshold(scores, labels) -> float:
    """Threshold maximizing binary F1 on the given (validation) set.

    Candidates are the midpoints between adjacent distinct scores plus one
    point below the minimum (predict everything positive) and one above the
    maximum (predict everything negative). Ties go to the lowest candidate.
    For a perfectly separable class this returns the midpoint of the
    separating gap.
    """
    s, y = _validate_binary(scores, labels)
    if int(y.sum()) == 0:
        raise MetricUndefinedError("degenerate class: no positives to optimize F1 for")
    uniq = np.unique(s)
    candidates = [uniq[0] - 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(uniq[:-1], uniq[1:])]
    candidates += [uniq[-1] + 1.0]
    best_t, best_f1 = candidates[0], -1.0
    for t in candidates:
        f1 = confusion_metrics(s, y, t).f1
        if not np.isnan(f1) and f1 > best_f1:
            best_t, best_f1 = t, f1
    return float(best_t)


def optimize_thresholds_macro(scores, labels) -> np.ndarray:
    """Per-class F1-maximizing thresholds for N x C one-vs-rest scores."""
    sc = np.asarray(scores, dtype=np.float64)
    lb = np.asarray(labels)
    if sc.ndim != 2 or sc.shape != lb.shape:
        raise ValueError("expected matching N x C scores and binary labels")
    return np.array([optimize_threshold(sc[:, c], lb[:, c]) for c in range(sc.shape[1])])


def dice_iou(pred_mask, gt_mask) -> tuple[float, float]:
    """Dice coefficient and IoU of two binary masks.

    Both-empty masks are an error (the overlap is undefined), mirroring how
    empty-ground-truth images are excluded from segmentation scoring.
    """
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        raise MetricUndefinedError("overlap of two empty masks is undefined")
    inter = int(np.sum(a & b))
    union = na + nb - inter
    return 2.0 * inter / (na + nb), inter / union


def pearson_r2(predictions, targets) -> tuple[float, float]:
    """Pearson's r and the coefficient of determination R^2.

    R^2 = 1 - SS_res / SS_tot. Constant predictions leave r undefined (nan,
    with a warning); R^2 is still returned.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError("predictions and targets differ in length")
    if p.size < 2:
        raise MetricUndefinedError("need at least two points")
    t_centered = t - t.mean()
    ss_tot = float(np.sum(t_centered**2))
    if ss_tot == 0.0:
        raise MetricUndefinedError("constant targets: correlation and R^2 undefined")
    ss_res = float(np.sum((p - t) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    p_centered = p - p.mean()
    denom = float(np.sqrt(np.sum(p_centered**2) * ss_tot))
    if denom == 0.0:
        warnings.warn("constant predictions: Pearson r undefined", RuntimeWarning, stacklevel=2)
        return float("nan"), r2
    r = float(np.sum(p_centered * t_centered)) / denom
    return r, r2


def auroc_macro(scores, labels, names=None) -> float:
    """Macro AUROC for N x C scores against N x C binary labels."""
    return macro_average(_per_class(auroc, scores, labels), names)


def aupr_macro(scores, labels, names=None) -> float:
    """Macro AUPR for N x C scores against N x C binary labels."""
    return macro_average(_per_class(aupr, scores, labels), names)


def _per_class(metric, scores, labels):
    sc = np.asarray(scores, dtype=np.float64)
    lb = np.asarray(labels)
    if sc.ndim != 2 or sc.shape != lb.shape:
        raise ValueError("expected matching N x C scores and binary labels")
    out = []
    for c in range(sc.shape[1]):
        try:
            out.append(metric(sc[:, c], lb[:, c]))
        except MetricUndefinedError:
            out.append(float("nan"))
    return out
