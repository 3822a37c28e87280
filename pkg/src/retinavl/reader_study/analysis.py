"""Analysis of completed study readings.

``classify_behavior`` maps one reading (first diagnosis, final diagnosis,
ground truth, model suggestions) onto the behavior/outcome taxonomy; the
aggregate report assembles accuracies with clustered bootstrap intervals,
the paired McNemar test, modification rates, the outcome frequency table,
confidence shifts, and rating summaries.
"""

from __future__ import annotations

import numpy as np

from ..stats import bootstrap_ci, mcnemar
from .protocol import Study
from .records import (
    Adoption,
    Behavior,
    BehaviorOutcome,
    Case,
    Outcome,
    Participant,
    ReadingRecord,
    RATING_COMPONENTS,
    Tier,
)


class IncompleteStudyError(RuntimeError):
    """Aggregation was requested while sessions are still in progress."""


def classify_behavior(
    prelim: str,
    final: str,
    truth: str,
    top5: tuple[str, ...],
    *,
    corrective_top5: bool = False,
) -> BehaviorOutcome:
    """Classify one reading against the model's ranked suggestions.

    ``top5`` is the model's suggestion list, best first. With
    ``corrective_top5`` enabled, keeping a wrong diagnosis counts as a
    persistent error whenever the truth appeared anywhere in the list, not
    only at rank 1.
    """
    if len(top5) != 5:
        raise ValueError(f"expected 5 ranked suggestions, got {len(top5)}")
    top1 = top5[0]
    if final != prelim:
        if final == truth:
            outcome = Outcome.OPTIMAL_REVISION
        elif prelim == truth:
            outcome = Outcome.RISK_INDUCING_REVISION
        else:
            outcome = Outcome.INEFFECTIVE_CORRECTION
        if final == top1:
            adoption = Adoption.TOP1_ADOPT
        elif final in top5[1:]:
            adoption = Adoption.TOP2TO5_ADOPT
        else:
            adoption = Adoption.INDEPENDENT
        return BehaviorOutcome(behavior=Behavior.MODIFIED, outcome=outcome, adoption=adoption)

    if prelim == truth:
        outcome = Outcome.OPTIMAL_COLLABORATION if top1 == truth else Outcome.INDEPENDENT_SUCCESS
    elif top1 == prelim:
        outcome = Outcome.INEFFECTIVE_VALIDATION
    elif top1 == truth:
        outcome = Outcome.PERSISTENT_ERROR
    elif corrective_top5 and truth in top5[1:]:
        outcome = Outcome.PERSISTENT_ERROR
    else:
        outcome = Outcome.UNCATEGORIZED_MAINTAINED
    return BehaviorOutcome(behavior=Behavior.MAINTAINED, outcome=outcome)


def classify_reading(
    record: ReadingRecord,
    payload,
    ground_truth: str,
    *,
    corrective_top5: bool = False,
) -> BehaviorOutcome:
    """Classify a completed :class:`ReadingRecord` against its assistance."""
    if not record.complete:
        raise ValueError(f"reading of case {record.case_id} has no final diagnosis")
    return classify_behavior(
        record.stage1.diagnosis,
        record.stage2.diagnosis,
        ground_truth,
        payload.disease_names(),
        corrective_top5=corrective_top5,
    )


def _accuracy_report(correct, participant_ids, *, n_resamples, seed, level):
    correct = np.asarray(correct, dtype=np.float64)
    report = bootstrap_ci(
        lambda s, l: float(np.mean(s)),
        correct,
        np.zeros_like(correct),
        n_resamples=n_resamples,
        seed=seed,
        level=level,
        ids=participant_ids,
    )
    return report.as_row()


def aggregate_readings(
    rows: list[tuple[Participant, Case, ReadingRecord]],
    *,
    corrective_top5: bool = False,
    n_resamples: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> dict:
    """Build the study report from completed readings.

    Accuracy intervals resample participants (not single readings), so a
    reader's cases stay together. Accuracies themselves are plain fractions
    of readings, reported exactly.
    """
    if not rows:
        raise ValueError("no completed readings to aggregate")
    for _, _, record in rows:
        if not record.complete:
            raise ValueError(f"reading of case {record.case_id} has no final diagnosis")

    pids = [p.id for p, _, _ in rows]
    tiers = [p.tier for p, _, _ in rows]
    pre_correct = [r.stage1.diagnosis == c.ground_truth for _, c, r in rows]
    post_correct = [r.stage2.diagnosis == c.ground_truth for _, c, r in rows]
    classifications = [
        classify_behavior(
            r.stage1.diagnosis,
            r.stage2.diagnosis,
            c.ground_truth,
            c.assistance.disease_names(),
            corrective_top5=corrective_top5,
        )
        for _, c, r in rows
    ]

    def block(indices, ids):
        pre = [pre_correct[i] for i in indices]
        post = [post_correct[i] for i in indices]
        return {
            "n_readings": len(indices),
            "pre_accuracy": sum(pre) / len(pre),
            "post_accuracy": sum(post) / len(post),
            "pre_ci": _accuracy_report(pre, ids, n_resamples=n_resamples, seed=seed, level=level),
            "post_ci": _accuracy_report(post, ids, n_resamples=n_resamples, seed=seed, level=level),
            "mcnemar_p": mcnemar(pre, post),
        }

    everything = list(range(len(rows)))
    report = {"overall": block(everything, pids), "by_tier": {}}
    for tier in Tier:
        indices = [i for i in everything if tiers[i] is tier]
        if indices:
            report["by_tier"][tier.value] = block(indices, [pids[i] for i in indices])

    modified = [cl.behavior is Behavior.MODIFIED for cl in classifications]
    conflict = [
        rows[i][2].stage1.diagnosis != rows[i][1].assistance.top1_disease for i in everything
    ]
    n_conflict = sum(conflict)
    report["modification"] = {
        "rate": sum(modified) / len(modified),
        "rate_when_top1_conflicts": (
            sum(m for m, k in zip(modified, conflict) if k) / n_conflict if n_conflict else None
        ),
        "n_top1_conflicts": n_conflict,
    }

    outcome_counts = {outcome.value: 0 for outcome in Outcome}
    adoption_counts = {adoption.value: 0 for adoption in Adoption}
    for cl in classifications:
        outcome_counts[cl.outcome.value] += 1
        if cl.adoption is not None:
            adoption_counts[cl.adoption.value] += 1
    report["behavior"] = {
        "n_modified": sum(modified),
        "n_maintained": len(modified) - sum(modified),
        "outcomes": outcome_counts,
        "adoption": adoption_counts,
    }

    deltas = [r.stage2.confidence - r.stage1.confidence for _, _, r in rows]
    agree = [not k for k in conflict]
    report["confidence"] = {
        "mean_delta": float(np.mean(deltas)),
        "mean_delta_when_top1_agrees": (
            float(np.mean([d for d, a in zip(deltas, agree) if a])) if any(agree) else None
        ),
        "mean_delta_when_top1_conflicts": (
            float(np.mean([d for d, a in zip(deltas, agree) if not a])) if n_conflict else None
        ),
    }

    report["utility_ratings"] = {
        component: float(np.mean([r.stage2.ratings[component] for _, _, r in rows]))
        for component in RATING_COMPONENTS
    }
    return report


def aggregate_results(
    study: Study,
    *,
    corrective_top5: bool = False,
    n_resamples: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> dict:
    """Full-study report; refuses to run while any session is unfinished."""
    unfinished = sorted(
        s.participant_id for s in study.sessions.values() if not s.complete
    )
    if unfinished:
        raise IncompleteStudyError(
            "sessions still in progress for: " + ", ".join(unfinished)
        )
    report = aggregate_readings(
        study.completed_readings(),
        corrective_top5=corrective_top5,
        n_resamples=n_resamples,
        seed=seed,
        level=level,
    )
    by_tier: dict[str, list[dict[str, int]]] = {}
    for q in study.questionnaires():
        tier = study.participants[q.participant_id].tier.value
        by_tier.setdefault(tier, []).append(q.ratings)
    questionnaire = {}
    for tier, rating_dicts in sorted(by_tier.items()):
        items = sorted({item for ratings in rating_dicts for item in ratings})
        questionnaire[tier] = {
            item: float(np.mean([r[item] for r in rating_dicts if item in r]))
            for item in items
        }
    report["questionnaire"] = questionnaire
    return report
