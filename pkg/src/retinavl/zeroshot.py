"""Prompt-ensemble zero-shot classification and benchmark label trimming.

A class is described by one or more natural-language prompts. Each prompt is
embedded with the text encoder, the embeddings are averaged, and (by default)
the mean is re-normalized to unit length; images are then scored against every
class by cosine similarity. Benchmarks whose label space needs adjusting
(collapsing sub-types into a parent class, or excluding a catch-all class from
evaluation) are handled by :func:`apply_trim` before any scoring happens.

Scoring is framework-free: encoders enter only as a callable mapping a list
of strings to an embedding matrix, so tests can plant exact embeddings.
"""

from __future__ import annotations

import json
import os
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .data.records import LabelSchema

TextEncoderFn = Callable[[Sequence[str]], np.ndarray]


class PromptConfigError(ValueError):
    """A prompt file or trim rule is unusable as configured."""


@dataclass(frozen=True)
class PromptEnsemble:
    """Prompt strings per class, in schema order.

    ``prompts[c]`` holds every phrasing that should count as class ``c``;
    the class embedding is the renormalized mean of their text embeddings.
    """

    classes: tuple[str, ...]
    prompts: dict[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(
            self, "prompts", {c: tuple(p) for c, p in self.prompts.items()}
        )
        if len(set(self.classes)) != len(self.classes):
            raise PromptConfigError("duplicate class names")
        for cls in self.classes:
            got = self.prompts.get(cls, ())
            if not got:
                raise PromptConfigError(f"class {cls!r} has no prompts")
            if any(not isinstance(p, str) or not p.strip() for p in got):
                raise PromptConfigError(f"class {cls!r} has a blank prompt")
        extras = set(self.prompts) - set(self.classes)
        if extras:
            raise PromptConfigError(f"prompts for unknown classes: {sorted(extras)}")


def default_prompt_ensemble(classes: Sequence[str]) -> PromptEnsemble:
    """Bare class name plus a hedged "suspected <name>" phrasing.

    Real deployments should ship a curated prompt file; this is only a
    reasonable starting point.
    """
    return PromptEnsemble(
        classes=tuple(classes),
        prompts={c: (c, f"suspected {c}") for c in classes},
    )


def load_prompt_file(path: str | os.PathLike) -> PromptEnsemble:
    """Read a JSON mapping of class name to prompt list."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PromptConfigError(f"bad prompt file: {exc}") from exc
    if not isinstance(raw, dict) or not all(isinstance(v, list) for v in raw.values()):
        raise PromptConfigError("prompt file must map class name -> list of prompts")
    return PromptEnsemble(classes=tuple(raw), prompts={c: tuple(v) for c, v in raw.items()})


def save_prompt_file(ensemble: PromptEnsemble, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {c: list(ensemble.prompts[c]) for c in ensemble.classes},
            fh,
            indent=2,
            sort_keys=False,
        )
        fh.write("\n")


def build_class_embeddings(
    ensemble: PromptEnsemble,
    text_encoder: TextEncoderFn,
    *,
    renormalize: bool = True,
) -> np.ndarray:
    """Average each class's prompt embeddings into a C x D matrix.

    The mean of several unit vectors is shorter than unit length, so by
    default each class row is re-normalized afterwards; pass
    ``renormalize=False`` to keep the raw means (cosine scoring divides by
    the norm anyway, so only downstream dot-product consumers notice).
    """
    rows = []
    for cls in ensemble.classes:
        embedded = np.asarray(text_encoder(list(ensemble.prompts[cls])), dtype=np.float64)
        if embedded.ndim != 2 or embedded.shape[0] != len(ensemble.prompts[cls]):
            raise ValueError(
                f"text encoder returned shape {embedded.shape} for class {cls!r}"
            )
        mean = embedded.mean(axis=0)
        if renormalize:
            norm = float(np.linalg.norm(mean))
            if norm == 0.0:
                raise ValueError(f"prompt embeddings for {cls!r} average to zero")
            mean = mean / norm
        rows.append(mean)
    return np.stack(rows, axis=0)


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-sample, per-class cosine scores with their label schema."""

    scores: np.ndarray  # N x C
    schema: LabelSchema
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.ndim != 2:
            raise ValueError(f"scores must be 2-D, got shape {scores.shape}")
        if scores.shape[1] != len(self.schema.classes):
            raise ValueError(
                f"{scores.shape[1]} score columns for "
                f"{len(self.schema.classes)} classes"
            )
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))
            if len(self.ids) != scores.shape[0]:
                raise ValueError("ids and score rows must correspond 1:1")

    @property
    def classes(self) -> tuple[str, ...]:
        return self.schema.classes

    def column(self, cls: str) -> np.ndarray:
        """One-vs-rest score vector for a class, for threshold-free metrics."""
        return self.scores[:, self.schema.classes.index(cls)]

    def argmax_labels(self) -> tuple[str, ...]:
        """Single-label prediction: highest-scoring class per row."""
        return tuple(self.schema.classes[i] for i in np.argmax(self.scores, axis=1))


def zero_shot_classify(
    image_embeddings: np.ndarray,
    class_embeddings: np.ndarray,
    schema: LabelSchema,
    *,
    ids: Sequence[str] | None = None,
) -> PredictionMatrix:
    """Cosine similarity of every image against every class embedding."""
    u = np.asarray(image_embeddings, dtype=np.float64)
    c = np.asarray(class_embeddings, dtype=np.float64)
    if u.ndim != 2 or c.ndim != 2:
        raise ValueError("embeddings must be 2-D matrices")
    if u.shape[1] != c.shape[1]:
        raise ValueError(
            f"embedding dimensions differ: images {u.shape[1]}, classes {c.shape[1]}"
        )
    if c.shape[0] != len(schema.classes):
        raise ValueError(
            f"{c.shape[0]} class embeddings for {len(schema.classes)} classes"
        )
    u_norm = np.linalg.norm(u, axis=1, keepdims=True)
    c_norm = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(u_norm == 0) or np.any(c_norm == 0):
        raise ValueError("zero-norm embedding has no cosine similarity")
    scores = (u / u_norm) @ (c / c_norm).T
    return PredictionMatrix(
        scores=scores, schema=schema, ids=tuple(ids) if ids is not None else None
    )


@dataclass(frozen=True)
class TrimmedView:
    """Result of applying trim rules: which samples survive, with new labels.

    ``indices`` point into the original sample order, so callers can subset
    parallel arrays (embeddings, ids) without this module knowing about them.
    """

    indices: tuple[int, ...]
    labels: tuple[frozenset[str], ...]
    schema: LabelSchema


def _as_label_set(value, classes: set[str], position: int) -> frozenset[str]:
    if isinstance(value, str):
        value = (value,)
    labels = frozenset(value)
    unknown = labels - classes
    if unknown:
        raise ValueError(f"sample {position}: unknown labels {sorted(unknown)}")
    return labels


def apply_trim(
    labels: Sequence[frozenset[str] | set[str] | str | Iterable[str]],
    schema: LabelSchema,
) -> TrimmedView:
    """Apply the schema's merge/drop rules to a labeled sample list.

    Rules run in order. A merge relabels every occurrence of the source
    class to the target and removes the source from the class list, never
    touching sample count. A drop removes the class from the label space;
    in single-label mode the samples carrying it leave evaluation entirely,
    while in multi-label mode they stay as all-negative rows.
    """
    classes = list(schema.classes)
    known = set(classes)
    current: list[frozenset[str] | None] = [
        _as_label_set(lab, known, i) for i, lab in enumerate(labels)
    ]
    if schema.mode == "single_label":
        for i, lab in enumerate(current):
            if lab is not None and len(lab) != 1:
                raise ValueError(f"sample {i}: single-label mode needs exactly 1 label")

    for rule in schema.trim_rules:
        if rule.source not in classes:
            raise PromptConfigError(
                f"trim rule references unknown class {rule.source!r}"
            )
        if rule.kind == "merge":
            if rule.target not in classes:
                raise PromptConfigError(
                    f"merge target {rule.target!r} is not an available class"
                )
            current = [
                lab if lab is None or rule.source not in lab
                else (lab - {rule.source}) | {rule.target}
                for lab in current
            ]
        else:  # drop
            stripped = []
            for lab in current:
                if lab is None or rule.source not in lab:
                    stripped.append(lab)
                elif schema.mode == "single_label":
                    stripped.append(None)  # sample leaves evaluation
                else:
                    stripped.append(lab - {rule.source})
            current = stripped
        classes.remove(rule.source)

    indices = tuple(i for i, lab in enumerate(current) if lab is not None)
    kept = tuple(lab for lab in current if lab is not None)
    return TrimmedView(
        indices=indices,
        labels=kept,
        schema=LabelSchema(classes=tuple(classes), mode=schema.mode, trim_rules=()),
    )


def eye_level_average(view_scores: Sequence[np.ndarray | Sequence[float]]) -> np.ndarray:
    """Elementwise mean of per-view class-score vectors for one eye."""
    if len(view_scores) == 0:
        raise ValueError("need at least one view to average")
    rows = [np.asarray(v, dtype=np.float64).ravel() for v in view_scores]
    width = rows[0].size
    if any(r.size != width for r in rows):
        raise ValueError("views disagree on class count")
    return np.mean(np.stack(rows, axis=0), axis=0)


def write_predictions(matrix: PredictionMatrix, path: str | os.PathLike) -> None:
    """Line-delimited TSV: header of class names, then id + scores per row."""
    ids = matrix.ids or tuple(str(i) for i in range(matrix.scores.shape[0]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\t" + "\t".join(matrix.classes) + "\n")
        for rid, row in zip(ids, matrix.scores):
            fh.write(rid + "\t" + "\t".join(f"{v:.8g}" for v in row) + "\n")


def read_predictions(path: str | os.PathLike, mode: str = "single_label") -> PredictionMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:1] != ["id"]:
            raise ValueError("prediction file must start with an 'id' header column")
        classes = tuple(header[1:])
        ids: list[str] = []
        rows: list[list[float]] = []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return PredictionMatrix(
        scores=np.array(rows, dtype=np.float64),
        schema=LabelSchema(classes=classes, mode=mode),
        ids=tuple(ids),
    )


def text_encoder_from(model, tokenizer, *, max_tokens: int | None = None) -> TextEncoderFn:
    """Wrap a dual encoder + tokenizer into the plain-callable protocol."""
    import torch

    limit = max_tokens if max_tokens is not None else model.textual.cfg.max_tokens

    def encode(texts: Sequence[str]) -> np.ndarray:
        token_lists = [tokenizer.tokenize(t, max_tokens=limit) for t in texts]
        batch = model.pad_batch(token_lists)
        with torch.no_grad():
            emb = model.encode_text(batch)
        return emb.double().numpy()

    return encode


def trim_prediction_matrix(matrix: PredictionMatrix, view: TrimmedView) -> PredictionMatrix:
    """Subset a full prediction matrix to a trimmed view's samples/classes.

    Useful when scores were computed against the untrimmed schema; merged
    source columns are simply dropped (their samples are scored via the
    target class prompts).
    """
    col_idx = [matrix.schema.classes.index(c) for c in view.schema.classes]
    rows = np.asarray(view.indices, dtype=np.intp)
    sub = matrix.scores[rows][:, col_idx]
    ids = tuple(matrix.ids[i] for i in view.indices) if matrix.ids else None
    return PredictionMatrix(scores=sub, schema=view.schema, ids=ids)
