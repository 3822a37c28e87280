"""Splitting bilateral clinical reports into per-eye text.

Reports routinely describe both eyes in one block of text ("Right eye:
drusen. Left eye: normal fundus."). Downstream training needs eye-level
records, so each sentence is routed to the right eye, the left eye, or
both, based on a configurable laterality keyword table.

Assignment rules, in order:

1. Sentences are split on sentence-final punctuation (``. ! ?``) and
   semicolons.
2. A sentence containing a right-eye keyword goes to the right eye, a
   left-eye keyword to the left eye, a bilateral keyword (or keywords for
   both single eyes) to both. A leading ``<keyword>:`` prefix is stripped
   from the stored sentence.
3. A sentence with no keyword inherits the laterality of the most recent
   marked sentence in the same field; before any marker it goes to both.
4. If no keyword occurs anywhere in the report, the full text is assigned
   to both eyes.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

# Defaults are an explicit engineering choice, not a vocabulary claim;
# studies with other phrasing conventions should ship their own table.
DEFAULT_KEYWORD_TABLE: dict[str, tuple[str, ...]] = {
    "od": ("right eye", "od"),
    "os": ("left eye", "os"),
    "both": ("both eyes", "binocular"),
}

# punctuation only ends a sentence when followed by whitespace or the end
# of the text, so decimals ("C/D 0.6") survive intact
_SENTENCE_SPLIT = re.compile(r"[.!?;]+(?=\s|$)")


class UnusableRecordError(ValueError):
    """Raised when a report cannot yield a usable eye-level record."""


@dataclass(frozen=True)
class ReportParts:
    """Per-eye slices of a report's findings and impression."""

    findings: tuple[str, ...]
    impression: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(s + "." for s in self.findings + self.impression)


def load_keyword_table(path: str | os.PathLike) -> dict[str, tuple[str, ...]]:
    """Read a keyword table (JSON object with keys od/os/both) from disk."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    missing = {"od", "os", "both"} - set(raw)
    if missing:
        raise ValueError(f"keyword table missing keys: {sorted(missing)}")
    return {k: tuple(p.lower() for p in raw[k]) for k in ("od", "os", "both")}


def save_keyword_table(table: dict[str, tuple[str, ...]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: list(v) for k, v in table.items()}, fh, indent=2)
        fh.write("\n")


def _compile(table: dict[str, tuple[str, ...]]) -> dict[str, re.Pattern]:
    # word-boundary match so "OD" never fires inside "period"
    return {
        key: re.compile(
            r"(?<![a-z0-9])(" + "|".join(re.escape(p) for p in phrases) + r")(?![a-z0-9])"
        )
        for key, phrases in table.items()
    }


def _split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def _strip_marker(sentence: str, patterns: dict[str, re.Pattern]) -> str:
    """Drop a leading '<keyword>:' label so stored text is pure content."""
    lowered = sentence.lower()
    for pat in patterns.values():
        m = pat.match(lowered)
        if m:
            rest = sentence[m.end():].lstrip()
            if rest.startswith(":"):
                stripped = rest[1:].strip()
                if stripped:
                    return stripped
    return sentence


def segment_report_by_eye(
    findings: str,
    impression: str,
    keyword_table: dict[str, tuple[str, ...]] | None = None,
) -> tuple[ReportParts, ReportParts]:
    """Assign every sentence of findings and impression to OD and/or OS."""
    if not findings or not findings.strip():
        raise UnusableRecordError("empty findings: record cannot be segmented")
    table = keyword_table if keyword_table is not None else DEFAULT_KEYWORD_TABLE
    patterns = _compile({k: tuple(p.lower() for p in v) for k, v in table.items()})

    od: dict[str, list[str]] = {"findings": [], "impression": []}
    os_: dict[str, list[str]] = {"findings": [], "impression": []}

    for field_name, text in (("findings", findings), ("impression", impression or "")):
        current: str | None = None  # carries the last marked laterality
        for sentence in _split_sentences(text):
            lowered = sentence.lower()
            hit_od = bool(patterns["od"].search(lowered))
            hit_os = bool(patterns["os"].search(lowered))
            hit_both = bool(patterns["both"].search(lowered))
            if hit_both or (hit_od and hit_os):
                target = "both"
            elif hit_od:
                target = "od"
            elif hit_os:
                target = "os"
            else:
                target = current if current is not None else "both"
            if hit_od or hit_os or hit_both:
                current = target
            stored = _strip_marker(sentence, patterns)
            if target in ("od", "both"):
                od[field_name].append(stored)
            if target in ("os", "both"):
                os_[field_name].append(stored)

    return (
        ReportParts(findings=tuple(od["findings"]), impression=tuple(od["impression"])),
        ReportParts(findings=tuple(os_["findings"]), impression=tuple(os_["impression"])),
    )
