"""Statistical procedures: bootstrap CIs, bootstrap model comparison,
two-sided t-tests, and the exact McNemar test.

Bootstrap resampling draws whole resampling units with replacement. The
unit defaults to one row (one image); passing ``ids`` groups rows so that,
e.g., the two views of an eye are always resampled together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import betainc

from .metrics import MetricUndefinedError


@dataclass(frozen=True)
class StatReport:
    """Point estimate with a percentile bootstrap interval."""

    point: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int
    level: float = 0.95
    p_value: float | None = None
    comparator: str | None = None

    def as_row(self) -> dict:
        row = {
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "level": self.level,
        }
        if self.p_value is not None:
            row["p_value"] = self.p_value
            row["comparator"] = self.comparator
        return row


def _resample_groups(ids, n_rows):
    """Map resampling unit -> row indices, keyed by sorted unique id."""
    if ids is None:
        return [np.array([i]) for i in range(n_rows)]
    ids = np.asarray(ids)
    if ids.shape[0] != n_rows:
        raise ValueError("ids must have one entry per row")
    groups = {}
    for row, key in enumerate(ids.tolist()):
        groups.setdefault(key, []).append(row)
    return [np.asarray(groups[k]) for k in sorted(groups)]


def _metric_or_nan(metric, scores, labels):
    try:
        v = metric(scores, labels)
    except MetricUndefinedError:
        return float("nan")
    return float(v)


def bootstrap_ci(
    metric,
    scores,
    labels,
    *,
    n_resamples: int = 2000,
    level: float = 0.95,
    seed: int = 0,
    ids=None,
) -> StatReport:
    """Percentile bootstrap CI for ``metric(scores, labels)``.

    Resamples where the metric is undefined (raises
    ``MetricUndefinedError`` or returns nan) are dropped; if that happens on
    more than half of the resamples the whole estimate is refused.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    point = float(metric(scores, labels))  # must be defined on the full set
    groups = _resample_groups(ids, scores.shape[0])
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(groups), size=(n_resamples, len(groups)))
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = np.concatenate([groups[g] for g in draws[i]])
        values[i] = _metric_or_nan(metric, scores[idx], labels[idx])
    defined = values[~np.isnan(values)]
    if defined.size < n_resamples / 2:
        raise MetricUndefinedError(
            f"metric undefined on {n_resamples - defined.size}/{n_resamples} "
            "bootstrap resamples (typically a single-class resample)"
        )
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(defined, [100 * alpha, 100 * (1 - alpha)])
    # percentile intervals can exclude the point estimate in pathological
    # skew; the report contract requires ci_low <= point <= ci_high
    return StatReport(
        point=point,
        ci_low=min(float(lo), point),
        ci_high=max(float(hi), point),
        n_resamples=n_resamples,
        seed=seed,
        level=level,
    )


def bootstrap_pvalue(
    metric,
    scores_a,
    labels_a,
    scores_b,
    labels_b,
    *,
    n_resamples: int = 2000,
    seed: int = 0,
    ids=None,
) -> float:
    """Paired bootstrap comparison p-value.

    The better model is the one with the higher point estimate; the p-value
    is twice the proportion of paired resamples on which it scores strictly
    worse than the other, capped at 1. Exactly tied point estimates mean
    there is no better model to test, so p = 1.
    """
    sa, sb = np.asarray(scores_a), np.asarray(scores_b)
    la, lb = np.asarray(labels_a), np.asarray(labels_b)
    if sa.shape[0] != sb.shape[0] or la.shape[0] != lb.shape[0]:
        raise ValueError("paired comparison requires equally sized score sets")
    if not np.array_equal(la, lb):
        raise ValueError("paired comparison requires identical labels")
    point_a = float(metric(sa, la))
    point_b = float(metric(sb, lb))
    if point_a == point_b:
        return 1.0
    groups = _resample_groups(ids, sa.shape[0])
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(groups), size=(n_resamples, len(groups)))
    worse = 0
    for i in range(n_resamples):
        idx = np.concatenate([groups[g] for g in draws[i]])
        va = _metric_or_nan(metric, sa[idx], la[idx])
        vb = _metric_or_nan(metric, sb[idx], lb[idx])
        if math.isnan(va) or math.isnan(vb):
            continue
        diff = va - vb if point_a > point_b else vb - va
        if diff < 0:
            worse += 1
    return min(1.0, 2.0 * worse / n_resamples)


def t_test_two_sided(runs_a, runs_b) -> float:
    """Two-sample pooled-variance Student t-test, two-sided p-value.

    Both samples need at least two values. Zero pooled variance gives p = 1
    when the means are equal and p = 0 otherwise.
    """
    a = np.asarray(runs_a, dtype=np.float64).ravel()
    b = np.asarray(runs_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two values per side")
    na, nb = a.size, b.size
    df = na + nb - 2
    sp2 = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    mean_diff = a.mean() - b.mean()
    if sp2 == 0.0:
        return 1.0 if mean_diff == 0.0 else 0.0
    t = mean_diff / math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    # P(|T_df| >= t) via the regularized incomplete beta function
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def mcnemar(pre_correct, post_correct) -> float:
    """Exact-binomial McNemar test on paired correctness outcomes.

    b = correct before but wrong after; c = wrong before but correct after.
    p = min(1, 2 * BinomCDF(min(b, c); b + c, 0.5)), computed exactly. With
    no discordant pairs p = 1.
    """
    pre = np.asarray(pre_correct).astype(bool).ravel()
    post = np.asarray(post_correct).astype(bool).ravel()
    if pre.shape != post.shape:
        raise ValueError("paired readings required")
    b = int(np.sum(pre & ~post))
    c = int(np.sum(~pre & post))
    n = b + c
    if n == 0:
        return 1.0
    m = min(b, c)
    cdf = Fraction(sum(math.comb(n, k) for k in range(m + 1)), 2**n)
    return float(min(Fraction(1), 2 * cdf))
