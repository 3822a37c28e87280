"""Two-stage assisted-reading study: protocol, persistence, analysis, API."""

from .analysis import (
    IncompleteStudyError,
    aggregate_readings,
    aggregate_results,
    classify_behavior,
    classify_reading,
)
from .protocol import ProtocolError, SessionState, Study, UnknownSessionError
from .records import (
    Adoption,
    AssistancePayload,
    Behavior,
    BehaviorOutcome,
    Case,
    Outcome,
    Participant,
    Questionnaire,
    ReadingRecord,
    Stage1Entry,
    Stage2Entry,
    Tier,
    ValidationError,
)
from .service import create_app
from .store import EventLogError, append_event, read_events

__all__ = [
    "Adoption",
    "AssistancePayload",
    "Behavior",
    "BehaviorOutcome",
    "Case",
    "EventLogError",
    "IncompleteStudyError",
    "Outcome",
    "Participant",
    "ProtocolError",
    "Questionnaire",
    "ReadingRecord",
    "SessionState",
    "Stage1Entry",
    "Stage2Entry",
    "Study",
    "Tier",
    "UnknownSessionError",
    "ValidationError",
    "aggregate_readings",
    "aggregate_results",
    "append_event",
    "classify_behavior",
    "classify_reading",
    "create_app",
    "read_events",
]
