"""Append-only event log for study sessions.

Every state change is one JSON line; the full study state is a pure fold
over the log, so replaying a file reconstructs byte-identical reports.
Nothing is ever rewritten in place.
"""

from __future__ import annotations

import json
from pathlib import Path

EVENT_KINDS = (
    "session_started",
    "stage1_committed",
    "assistance_viewed",
    "stage2_committed",
    "questionnaire_submitted",
)


class EventLogError(ValueError):
    """The log file contains something that is not a valid event."""


def append_event(path: Path, event: dict) -> None:
    if event.get("kind") not in EVENT_KINDS:
        raise EventLogError(f"unknown event kind: {event.get('kind')!r}")
    line = json.dumps(event, sort_keys=True, separators=(",", ":"))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def read_events(path: Path) -> list[dict]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EventLogError(f"line {lineno}: not valid JSON") from exc
            if not isinstance(event, dict) or event.get("kind") not in EVENT_KINDS:
                raise EventLogError(f"line {lineno}: unknown event kind")
            events.append(event)
    return events
