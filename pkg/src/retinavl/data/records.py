"""Dataset record types and the line-delimited manifest format.

A manifest file is UTF-8 text: the first line is a JSON header describing
the split and label schema, every following line is one JSON record with
the fields of :class:`ImageReportPair`. Blank lines are ignored, which
keeps hand-edited fixtures and trailing newlines harmless.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass


class Laterality(enum.Enum):
    OD = "OD"
    OS = "OS"
    BOTH = "BOTH"


class Eye(enum.Enum):
    OD = "OD"
    OS = "OS"


class Sex(enum.IntEnum):
    FEMALE = 0
    MALE = 1


class ManifestError(ValueError):
    """Raised for malformed manifest files or schema violations."""


@dataclass(frozen=True)
class ClinicalReport:
    """One eye-level report: history, objective findings, and impression."""

    history: str
    findings: str
    impression: str
    laterality: Laterality

    def is_trainable(self) -> bool:
        """Trainable records need non-empty findings and impression."""
        return bool(self.findings.strip()) and bool(self.impression.strip())

    @property
    def text(self) -> str:
        """The report joined into the string handed to the text encoder."""
        parts = [p.strip() for p in (self.history, self.findings, self.impression)]
        return " ".join(p for p in parts if p)


@dataclass(frozen=True)
class TrimRule:
    """Benchmark label adjustment: merge one class into another, or drop it."""

    kind: str  # "merge" | "drop"
    source: str
    target: str | None = None

    def __post_init__(self):
        if self.kind not in ("merge", "drop"):
            raise ValueError(f"unknown trim rule kind: {self.kind!r}")
        if self.kind == "merge" and not self.target:
            raise ValueError(f"merge rule for {self.source!r} needs a target class")
        if self.kind == "drop" and self.target is not None:
            raise ValueError(f"drop rule for {self.source!r} cannot have a target")


@dataclass(frozen=True)
class LabelSchema:
    classes: tuple[str, ...]
    mode: str  # "single_label" | "multi_label"
    trim_rules: tuple[TrimRule, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "trim_rules", tuple(self.trim_rules))
        if self.mode not in ("single_label", "multi_label"):
            raise ValueError(f"unknown label mode: {self.mode!r}")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        known = set(self.classes)
        for rule in self.trim_rules:
            if rule.source not in known:
                raise ValueError(f"trim rule source {rule.source!r} not in classes")
            if rule.kind == "merge" and rule.target not in known:
                raise ValueError(f"merge target {rule.target!r} not in classes")


@dataclass(frozen=True)
class ImageReportPair:
    image_id: str
    image_path: str
    eye: Eye
    report: ClinicalReport
    age: float | None = None
    sex: Sex | None = None
    labels: frozenset[str] | None = None

    def __post_init__(self):
        if self.age is not None and self.age < 0:
            raise ValueError(f"record {self.image_id!r}: age must be >= 0")
        if self.labels is not None:
            object.__setattr__(self, "labels", frozenset(self.labels))


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageReportPair, ...]
    schema: LabelSchema
    split: str  # "train" | "val" | "test"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split: {self.split!r}")
        seen: dict[str, int] = {}
        for rec in self.records:
            if rec.image_id in seen:
                raise ManifestError(f"duplicate image_id: {rec.image_id!r}")
            seen[rec.image_id] = 1
            if rec.labels is not None:
                unknown = rec.labels - set(self.schema.classes)
                if unknown:
                    raise ManifestError(
                        f"record {rec.image_id!r} has labels not in schema: "
                        f"{sorted(unknown)}"
                    )

    def __len__(self) -> int:
        return len(self.records)


_EMPTY_SCHEMA = LabelSchema(classes=(), mode="multi_label")


def _report_from_json(obj: dict) -> ClinicalReport:
    return ClinicalReport(
        history=obj.get("history", ""),
        findings=obj["findings"],
        impression=obj["impression"],
        laterality=Laterality(obj["laterality"]),
    )


def _record_from_json(obj: dict) -> ImageReportPair:
    sex = obj.get("sex")
    labels = obj.get("labels")
    return ImageReportPair(
        image_id=obj["image_id"],
        image_path=obj["image_path"],
        eye=Eye(obj["eye"]),
        report=_report_from_json(obj["report"]),
        age=obj.get("age"),
        sex=None if sex is None else Sex(sex),
        labels=None if labels is None else frozenset(labels),
    )


def _schema_from_json(obj: dict) -> LabelSchema:
    rules = tuple(
        TrimRule(kind=r["kind"], source=r["source"], target=r.get("target"))
        for r in obj.get("trim_rules", [])
    )
    return LabelSchema(classes=tuple(obj["classes"]), mode=obj["mode"], trim_rules=rules)


def parse_manifest(path: str | os.PathLike, *, check_files: bool = True) -> DatasetManifest:
    """Load a manifest file, validating records against its schema header.

    Relative image paths are resolved against the manifest's directory.
    ``check_files=False`` skips the existence check (useful for fixtures
    that never touch pixels). An empty file is a valid empty manifest.
    """
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    content = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not content:
        return DatasetManifest(records=(), schema=_EMPTY_SCHEMA, split="train")

    header_no, header_line = content[0]
    try:
        header = json.loads(header_line)
        schema = _schema_from_json(header["schema"])
        split = header["split"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {header_no}: bad manifest header: {exc}") from exc

    records = []
    for line_no, line in content[1:]:
        try:
            rec = _record_from_json(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"line {line_no}: malformed record: {exc}") from exc
        if check_files:
            img = rec.image_path
            if not os.path.isabs(img):
                img = os.path.join(base, img)
            if not os.path.exists(img):
                raise ManifestError(
                    f"line {line_no}: image file not found: {rec.image_path}"
                )
        records.append(rec)

    try:
        return DatasetManifest(records=tuple(records), schema=schema, split=split)
    except ManifestError:
        raise
    except ValueError as exc:
        raise ManifestError(str(exc)) from exc


def _record_to_json(rec: ImageReportPair) -> dict:
    obj: dict = {
        "image_id": rec.image_id,
        "image_path": rec.image_path,
        "eye": rec.eye.value,
        "report": {
            "history": rec.report.history,
            "findings": rec.report.findings,
            "impression": rec.report.impression,
            "laterality": rec.report.laterality.value,
        },
    }
    if rec.age is not None:
        obj["age"] = rec.age
    if rec.sex is not None:
        obj["sex"] = int(rec.sex)
    if rec.labels is not None:
        obj["labels"] = sorted(rec.labels)
    return obj


def serialize_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write a manifest in the line-delimited format read by parse_manifest."""
    header = {
        "format": "retinavl-manifest",
        "version": 1,
        "split": manifest.split,
        "schema": {
            "classes": list(manifest.schema.classes),
            "mode": manifest.schema.mode,
            "trim_rules": [
                {"kind": r.kind, "source": r.source}
                | ({"target": r.target} if r.target is not None else {})
                for r in manifest.schema.trim_rules
            ],
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(_record_to_json(rec), ensure_ascii=False) + "\n")
