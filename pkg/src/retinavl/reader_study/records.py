"""Domain records for the two-stage assisted-reading study.

Everything here is immutable and validated at construction: participants
with an experience tier, cases with precomputed assistance, the per-case
reading record (stage 1 unassisted, stage 2 assisted), the post-study
questionnaire, and the behavior/outcome classification attached to each
completed reading.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

LIKERT = (1, 2, 3, 4, 5)
RATING_COMPONENTS = ("top5_diseases", "top5_lesions", "heatmap")


class ValidationError(ValueError):
    """A submitted value is outside its allowed domain."""


class Tier(str, Enum):
    TRAINEE = "trainee"
    JUNIOR = "junior"
    SENIOR = "senior"
    EXPERT = "expert"


@dataclass(frozen=True)
class Participant:
    id: str
    tier: Tier
    institution: str = ""

    def __post_init__(self):
        if not self.id:
            raise ValidationError("participant id cannot be empty")
        object.__setattr__(self, "tier", Tier(self.tier))


def _check_top5(entries, what: str) -> tuple[tuple[str, float], ...]:
    rows = tuple((str(name), float(score)) for name, score in entries)
    if len(rows) != 5:
        raise ValidationError(f"{what} must have exactly 5 entries, got {len(rows)}")
    scores = [s for _, s in rows]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise ValidationError(f"{what} scores must be non-increasing")
    return rows


@dataclass(frozen=True)
class AssistancePayload:
    """What the reader sees after committing a first diagnosis."""

    top5_diseases: tuple[tuple[str, float], ...]
    top5_lesions: tuple[tuple[str, float], ...]
    heatmap: str  # overlay image reference (path or URL)

    def __post_init__(self):
        object.__setattr__(
            self, "top5_diseases", _check_top5(self.top5_diseases, "top5_diseases")
        )
        object.__setattr__(
            self, "top5_lesions", _check_top5(self.top5_lesions, "top5_lesions")
        )
        if not self.heatmap:
            raise ValidationError("assistance payload needs a heatmap reference")

    @property
    def top1_disease(self) -> str:
        return self.top5_diseases[0][0]

    def disease_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.top5_diseases)

    def as_dict(self) -> dict:
        return {
            "top5_diseases": [[n, s] for n, s in self.top5_diseases],
            "top5_lesions": [[n, s] for n, s in self.top5_lesions],
            "heatmap": self.heatmap,
        }


@dataclass(frozen=True)
class Case:
    id: str
    image: str  # image reference served to the reader
    ground_truth: str
    assistance: AssistancePayload

    def __post_init__(self):
        if not self.id:
            raise ValidationError("case id cannot be empty")
        if not self.ground_truth:
            raise ValidationError("case needs a ground-truth class")


def _check_likert(value, what: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value not in LIKERT:
        raise ValidationError(f"{what} must be an integer in 1..5, got {value!r}")
    return value


@dataclass(frozen=True)
class Stage1Entry:
    diagnosis: str
    confidence: int
    timestamp: float

    def __post_init__(self):
        if not self.diagnosis:
            raise ValidationError("stage-1 diagnosis cannot be empty")
        _check_likert(self.confidence, "stage-1 confidence")


@dataclass(frozen=True)
class Stage2Entry:
    diagnosis: str
    confidence: int
    ratings: dict[str, int]  # one Likert score per assistance component
    timestamp: float

    def __post_init__(self):
        if not self.diagnosis:
            raise ValidationError("stage-2 diagnosis cannot be empty")
        _check_likert(self.confidence, "stage-2 confidence")
        got = dict(self.ratings)
        for component in RATING_COMPONENTS:
            if component not in got:
                raise ValidationError(f"missing rating for {component}")
            _check_likert(got[component], f"rating for {component}")
        extras = set(got) - set(RATING_COMPONENTS)
        if extras:
            raise ValidationError(f"unknown rating components: {sorted(extras)}")
        object.__setattr__(self, "ratings", got)


@dataclass(frozen=True)
class ReadingRecord:
    """Both stages of one case reading; stage 2 only exists after stage 1."""

    case_id: str
    stage1: Stage1Entry
    stage2: Stage2Entry | None = None

    @property
    def complete(self) -> bool:
        return self.stage2 is not None

    def with_stage2(self, entry: Stage2Entry) -> "ReadingRecord":
        if self.stage2 is not None:
            raise ValidationError(f"case {self.case_id} already has a stage-2 record")
        return ReadingRecord(case_id=self.case_id, stage1=self.stage1, stage2=entry)


@dataclass(frozen=True)
class Questionnaire:
    """Post-study experience ratings; item set is study configuration."""

    participant_id: str
    ratings: dict[str, int]

    def __post_init__(self):
        if not self.ratings:
            raise ValidationError("questionnaire cannot be empty")
        got = dict(self.ratings)
        for item, value in got.items():
            _check_likert(value, f"questionnaire item {item!r}")
        object.__setattr__(self, "ratings", got)


class Behavior(str, Enum):
    MODIFIED = "modified"
    MAINTAINED = "maintained"


class Adoption(str, Enum):
    TOP1_ADOPT = "top1_adopt"
    TOP2TO5_ADOPT = "top2to5_adopt"
    INDEPENDENT = "independent"


class Outcome(str, Enum):
    # modified
    OPTIMAL_REVISION = "optimal_revision"
    INEFFECTIVE_CORRECTION = "ineffective_correction"
    RISK_INDUCING_REVISION = "risk_inducing_revision"
    # maintained
    INDEPENDENT_SUCCESS = "independent_success"
    OPTIMAL_COLLABORATION = "optimal_collaboration"
    INEFFECTIVE_VALIDATION = "ineffective_validation"
    PERSISTENT_ERROR = "persistent_error"
    # maintained, both reader and model wrong in different ways: the source
    # taxonomy does not name this cell, so it gets its own bucket to keep
    # the outcome table a true partition
    UNCATEGORIZED_MAINTAINED = "uncategorized_maintained"


MODIFIED_OUTCOMES = frozenset(
    {Outcome.OPTIMAL_REVISION, Outcome.INEFFECTIVE_CORRECTION, Outcome.RISK_INDUCING_REVISION}
)
MAINTAINED_OUTCOMES = frozenset(
    {
        Outcome.INDEPENDENT_SUCCESS,
        Outcome.OPTIMAL_COLLABORATION,
        Outcome.INEFFECTIVE_VALIDATION,
        Outcome.PERSISTENT_ERROR,
        Outcome.UNCATEGORIZED_MAINTAINED,
    }
)


@dataclass(frozen=True)
class BehaviorOutcome:
    """Classification of one completed reading against the model's advice."""

    behavior: Behavior
    outcome: Outcome
    adoption: Adoption | None = None  # modified readings only

    def __post_init__(self):
        if self.behavior is Behavior.MODIFIED:
            if self.outcome not in MODIFIED_OUTCOMES:
                raise ValidationError(
                    f"outcome {self.outcome.value} cannot follow a modified reading"
                )
            if self.adoption is None:
                raise ValidationError("modified readings need an adoption label")
        else:
            if self.outcome not in MAINTAINED_OUTCOMES:
                raise ValidationError(
                    f"outcome {self.outcome.value} cannot follow a maintained reading"
                )
            if self.adoption is not None:
                raise ValidationError("maintained readings carry no adoption label")
