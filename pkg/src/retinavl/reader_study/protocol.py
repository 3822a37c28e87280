"""Session protocol for the two-stage reading study.

The coordinator enforces the ordering that gives the study its meaning:
a reader commits an unassisted diagnosis first, only then sees the model's
output, then commits a final diagnosis plus component ratings, and answers
the exit questionnaire only after every case is finished. All state changes
flow through one event-commit path, so a log replay revalidates and
reconstructs the exact same state.
"""

from __future__ import annotations

import random
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

from .records import (
    Case,
    Participant,
    Questionnaire,
    ReadingRecord,
    Stage1Entry,
    Stage2Entry,
)
from .store import append_event, read_events


class ProtocolError(RuntimeError):
    """An operation arrived out of order or targeted the wrong case."""


class UnknownSessionError(ProtocolError):
    """The session token does not correspond to any session."""


@dataclass
class SessionState:
    token: str
    participant_id: str
    order: list[str]
    cursor: int = 0
    readings: dict[str, ReadingRecord] = field(default_factory=dict)
    assistance_viewed: set[str] = field(default_factory=set)
    questionnaire: Questionnaire | None = None

    @property
    def complete(self) -> bool:
        return self.cursor >= len(self.order)

    @property
    def current_case(self) -> str | None:
        return None if self.complete else self.order[self.cursor]


class Study:
    """Holds the case set, participants, and all live sessions."""

    def __init__(
        self,
        cases: list[Case],
        participants: list[Participant],
        *,
        classes: tuple[str, ...] | None = None,
        seed: int = 0,
        clock=time.time,
        token_factory=None,
        log_path: str | Path | None = None,
    ):
        if not cases:
            raise ValueError("a study needs at least one case")
        self.cases = {c.id: c for c in cases}
        if len(self.cases) != len(cases):
            raise ValueError("duplicate case ids")
        if classes is not None:
            known = set(classes)
            for case in cases:
                if case.ground_truth not in known:
                    raise ValueError(
                        f"case {case.id}: ground truth {case.ground_truth!r} "
                        "is not in the class schema"
                    )
        self.participants = {p.id: p for p in participants}
        if len(self.participants) != len(participants):
            raise ValueError("duplicate participant ids")
        self.seed = seed
        self._clock = clock
        self._token_factory = token_factory or (lambda: secrets.token_hex(16))
        self._log_path = Path(log_path) if log_path is not None else None
        self.sessions: dict[str, SessionState] = {}
        self._by_participant: dict[str, str] = {}

    # -- public API -------------------------------------------------------

    def start_session(self, participant_id: str) -> SessionState:
        if participant_id not in self.participants:
            raise ProtocolError(f"unknown participant: {participant_id}")
        if participant_id in self._by_participant:
            raise ProtocolError(f"participant {participant_id} already has a session")
        order = sorted(self.cases)
        random.Random(f"{self.seed}:{participant_id}").shuffle(order)
        event = {
            "kind": "session_started",
            "token": self._token_factory(),
            "participant_id": participant_id,
            "order": order,
            "at": self._clock(),
        }
        self._commit(event)
        return self.sessions[event["token"]]

    def session(self, token: str) -> SessionState:
        return self._session(token)

    def current_case_view(self, token: str) -> dict | None:
        """What the reader may see before stage 1: image and id only."""
        session = self._session(token)
        if session.complete:
            return None
        case = self.cases[session.order[session.cursor]]
        return {"case_id": case.id, "image": case.image, "index": session.cursor, "total": len(session.order)}

    def commit_stage1(self, token: str, case_id: str, diagnosis: str, confidence: int) -> None:
        self._commit(
            {
                "kind": "stage1_committed",
                "token": token,
                "case_id": case_id,
                "diagnosis": diagnosis,
                "confidence": confidence,
                "at": self._clock(),
            }
        )

    def view_assistance(self, token: str, case_id: str) -> dict:
        self._commit(
            {
                "kind": "assistance_viewed",
                "token": token,
                "case_id": case_id,
                "at": self._clock(),
            }
        )
        return self.cases[case_id].assistance.as_dict()

    def commit_stage2(
        self, token: str, case_id: str, diagnosis: str, confidence: int, ratings: dict[str, int]
    ) -> None:
        self._commit(
            {
                "kind": "stage2_committed",
                "token": token,
                "case_id": case_id,
                "diagnosis": diagnosis,
                "confidence": confidence,
                "ratings": dict(ratings),
                "at": self._clock(),
            }
        )

    def submit_questionnaire(self, token: str, ratings: dict[str, int]) -> None:
        self._commit(
            {
                "kind": "questionnaire_submitted",
                "token": token,
                "ratings": dict(ratings),
                "at": self._clock(),
            }
        )

    def completed_readings(self) -> list[tuple[Participant, Case, ReadingRecord]]:
        """All finished readings across sessions, in a deterministic order."""
        rows = []
        for token in sorted(self.sessions, key=lambda t: self.sessions[t].participant_id):
            session = self.sessions[token]
            participant = self.participants[session.participant_id]
            for case_id in session.order:
                record = session.readings.get(case_id)
                if record is not None and record.complete:
                    rows.append((participant, self.cases[case_id], record))
        return rows

    def questionnaires(self) -> list[Questionnaire]:
        rows = [s.questionnaire for s in self.sessions.values() if s.questionnaire]
        return sorted(rows, key=lambda q: q.participant_id)

    # -- event commit path (shared by live calls and replay) ---------------

    def _session(self, token: str) -> SessionState:
        try:
            return self.sessions[token]
        except KeyError:
            raise UnknownSessionError("unknown session token") from None

    def _commit(self, event: dict) -> None:
        kind = event["kind"]
        if kind == "session_started":
            pid = event["participant_id"]
            if pid not in self.participants:
                raise ProtocolError(f"unknown participant: {pid}")
            if pid in self._by_participant:
                raise ProtocolError(f"participant {pid} already has a session")
            if sorted(event["order"]) != sorted(self.cases):
                raise ProtocolError("session order does not cover the case set")
            state = SessionState(
                token=event["token"], participant_id=pid, order=list(event["order"])
            )
            self.sessions[state.token] = state
            self._by_participant[pid] = state.token
        elif kind == "stage1_committed":
            session = self._session(event["token"])
            case_id = event["case_id"]
            if case_id not in self.cases:
                raise ProtocolError(f"unknown case: {case_id}")
            if case_id in session.readings:
                raise ProtocolError(f"case {case_id} already has a first diagnosis")
            if session.current_case != case_id:
                raise ProtocolError(
                    f"case {case_id} is not the session's current case"
                )
            entry = Stage1Entry(
                diagnosis=event["diagnosis"],
                confidence=event["confidence"],
                timestamp=event["at"],
            )
            session.readings[case_id] = ReadingRecord(case_id=case_id, stage1=entry)
        elif kind == "assistance_viewed":
            session = self._session(event["token"])
            case_id = event["case_id"]
            record = session.readings.get(case_id)
            if record is None:
                raise ProtocolError(
                    f"assistance for case {case_id} is locked until the first diagnosis is committed"
                )
            session.assistance_viewed.add(case_id)
        elif kind == "stage2_committed":
            session = self._session(event["token"])
            case_id = event["case_id"]
            record = session.readings.get(case_id)
            if record is None:
                raise ProtocolError(f"case {case_id} has no first diagnosis yet")
            if record.complete:
                raise ProtocolError(f"case {case_id} already has a final diagnosis")
            if case_id not in session.assistance_viewed:
                raise ProtocolError(
                    f"final diagnosis for case {case_id} requires viewing the assistance first"
                )
            entry = Stage2Entry(
                diagnosis=event["diagnosis"],
                confidence=event["confidence"],
                ratings=event["ratings"],
                timestamp=event["at"],
            )
            session.readings[case_id] = record.with_stage2(entry)
            session.cursor += 1
        elif kind == "questionnaire_submitted":
            session = self._session(event["token"])
            if not session.complete:
                raise ProtocolError("questionnaire is locked until all cases are read")
            if session.questionnaire is not None:
                raise ProtocolError("questionnaire already submitted")
            session.questionnaire = Questionnaire(
                participant_id=session.participant_id, ratings=event["ratings"]
            )
        else:  # pragma: no cover - store validates kinds on append/read
            raise ProtocolError(f"unknown event kind: {kind}")
        if self._log_path is not None:
            append_event(self._log_path, event)

    # -- replay -------------------------------------------------------------

    @classmethod
    def replay(
        cls,
        log_path: str | Path,
        cases: list[Case],
        participants: list[Participant],
        *,
        seed: int = 0,
    ) -> "Study":
        """Rebuild a study from its event log, revalidating every step."""
        study = cls(cases, participants, seed=seed)
        for event in read_events(Path(log_path)):
            study._commit(event)
        return study
