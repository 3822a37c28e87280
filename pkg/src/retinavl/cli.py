"""Command-line entry point wiring the toolkit into reproducible runs.

Every subcommand reads one flat YAML config (``--config``) with ``--set
key=value`` overrides, writes a resolved-config snapshot into its output
directory, and emits tab-separated tables with a header row. Exit codes:
0 success, 1 runtime failure (with ``error.log`` alongside the snapshot),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from retinavl.adaptation import (
    LinearHead,
    ProbeConfig,
    SegHeadConfig,
    SegTrainConfig,
    SegmentationHead,
    classification_features,
    subsample_labels,
    train_classifier,
    train_segmenter,
)
from retinavl.data import (
    ClinicalReport,
    DatasetManifest,
    ImageReportPair,
    LabelSchema,
    Laterality,
    UnusableRecordError,
    load_keyword_table,
    parse_manifest,
    segment_report_by_eye,
    serialize_manifest,
)
from retinavl.encoders import (
    Tokenizer,
    TextEncoderConfig,
    VisionEncoderConfig,
    build_vocab,
    export_embeddings,
    load_checkpoint,
    images_to_tensor,
)
from retinavl.localization import (
    best_threshold_segmentation,
    compute_heatmap,
    export_heatmap,
    masking_study,
    pro_score,
    save_heatmap_overlay,
)
from retinavl.metrics import MetricUndefinedError, aupr_macro, auroc_macro
from retinavl.pretraining import LossWeights, TrainConfig, train_loop
from retinavl.reader_study import (
    AssistancePayload,
    Case,
    Participant,
    Study,
    create_app,
)
from retinavl.stats import bootstrap_ci
from retinavl.zeroshot import (
    apply_trim,
    build_class_embeddings,
    default_prompt_ensemble,
    load_prompt_file,
    text_encoder_from,
    write_predictions,
    read_predictions,
    zero_shot_classify,
)


class UsageError(ValueError):
    """Bad invocation: missing/unknown config keys, malformed overrides."""


# ---------------------------------------------------------------------------
# config plumbing


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"override {text!r} is not KEY=VALUE")
    key, _, raw = text.partition("=")
    if not key:
        raise UsageError(f"override {text!r} has an empty key")
    return key, yaml.safe_load(raw)


def resolve_config(defaults: dict, config_path: str | None, overrides: list[str]) -> dict:
    cfg = dict(defaults)
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {config_path} must hold a mapping")
        for key, value in loaded.items():
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r}")
            cfg[key] = value
    for text in overrides:
        key, value = _parse_override(text)
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def _require(cfg: dict, key: str):
    value = cfg.get(key)
    if value is None:
        raise UsageError(f"config key {key!r} is required")
    return value


def write_snapshot(cfg: dict, out_dir: Path, command: str) -> None:
    snapshot = {"command": command, **{k: cfg[k] for k in sorted(cfg)}}
    with open(out_dir / "config.resolved.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(snapshot, fh, sort_keys=False)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_table(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["\t".join(header)]
    lines.extend("\t".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path} ({len(rows)} rows)")


_STAT_HEADER = ["metric", "point", "ci_low", "ci_high", "n_resamples", "seed", "level"]


def stat_rows(named_reports: list[tuple[str, object]]) -> list[list]:
    rows = []
    for name, report in named_reports:
        r = report.as_row()
        rows.append([name] + [r[k] for k in _STAT_HEADER[1:]])
    return rows


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_image_array(path: str, side: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img)


def _manifest_images(manifest: DatasetManifest, side: int) -> np.ndarray:
    return np.stack([_load_image_array(r.image_path, side) for r in manifest.records])


def _encode_images(model, images: np.ndarray, batch_size: int):
    """Batched image encoding -> (global, features, patch grids) float64."""
    globs, feats, grids = [], [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            tensor = images_to_tensor(images[start : start + batch_size])
            g, f, p, _ = model.encode_image(tensor)
            globs.append(g.double().numpy())
            feats.append(f.double().numpy())
            grids.append(p.double().numpy())
    return (
        np.concatenate(globs, axis=0),
        np.concatenate(feats, axis=0),
        np.concatenate(grids, axis=0),
    )


def _single_labels(manifest: DatasetManifest) -> list[str]:
    if manifest.schema.mode != "single_label":
        raise UsageError("this command needs a single-label manifest")
    labels = []
    for rec in manifest.records:
        if not rec.labels or len(rec.labels) != 1:
            raise UsageError(f"record {rec.image_id!r} needs exactly one label")
        labels.append(next(iter(rec.labels)))
    return labels


def _label_sets(manifest: DatasetManifest) -> list[frozenset[str]]:
    sets = []
    for rec in manifest.records:
        if rec.labels is None:
            raise UsageError(f"record {rec.image_id!r} carries no labels")
        sets.append(rec.labels)
    return sets


def _onehot(label_sets, classes: tuple[str, ...]) -> np.ndarray:
    out = np.zeros((len(label_sets), len(classes)))
    index = {c: j for j, c in enumerate(classes)}
    for i, labels in enumerate(label_sets):
        for c in labels:
            out[i, index[c]] = 1.0
    return out


def _split_indices(n: int, val_fraction: float, seed: int):
    if not 0.0 < val_fraction < 1.0:
        raise UsageError("val_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        raise UsageError("val_fraction leaves no training samples")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


# ---------------------------------------------------------------------------
# curate


CURATE_DEFAULTS = {
    "manifest": None,
    "keyword_table": None,
    "check_files": False,
    "seed": 0,
}


def cmd_curate(cfg: dict, out: Path) -> int:
    manifest = parse_manifest(_require(cfg, "manifest"), check_files=cfg["check_files"])
    table = load_keyword_table(cfg["keyword_table"]) if cfg["keyword_table"] else None
    kept, n_segmented, n_dropped = [], 0, 0
    for rec in manifest.records:
        report = rec.report
        if report.laterality is Laterality.BOTH:
            try:
                od_parts, os_parts = segment_report_by_eye(
                    report.findings, report.impression, table
                )
            except UnusableRecordError:
                n_dropped += 1
                continue
            parts = od_parts if rec.eye.value == "OD" else os_parts
            report = ClinicalReport(
                history=report.history,
                findings=" ".join(s + "." for s in parts.findings),
                impression=" ".join(s + "." for s in parts.impression),
                laterality=Laterality(rec.eye.value),
            )
            n_segmented += 1
        if not report.is_trainable():
            n_dropped += 1
            continue
        kept.append(
            ImageReportPair(
                image_id=rec.image_id,
                image_path=rec.image_path,
                eye=rec.eye,
                report=report,
                age=rec.age,
                sex=rec.sex,
                labels=rec.labels,
            )
        )
    curated = DatasetManifest(records=tuple(kept), schema=manifest.schema, split=manifest.split)
    serialize_manifest(curated, out / "manifest.json")
    write_table(
        out / "curate_summary.tsv",
        ["n_input", "n_kept", "n_segmented", "n_dropped"],
        [[len(manifest.records), len(kept), n_segmented, n_dropped]],
    )
    return 0


# ---------------------------------------------------------------------------
# pretrain


PRETRAIN_DEFAULTS = {
    "manifest": None,
    "variant": "base",
    "lambda_align": 1.0,
    "lambda_age": 1.0,
    "lambda_sex": 0.1,
    "embed_dim": 768,
    "image_side": 336,
    "patch_side": 14,
    "vision_depth": 24,
    "vision_heads": 16,
    "vision_width": 1024,
    "tap_layers": [6, 12, 18, 24],
    "text_depth": 12,
    "text_heads": 8,
    "text_width": 512,
    "max_tokens": 128,
    "tokenizer": None,
    "n_merges": 100,
    "peak_lr": 3e-5,
    "weight_decay": 1e-3,
    "batch_size": 512,
    "total_steps": 486_400,
    "warmup_steps": 200,
    "ema_decay": 0.995,
    "checkpoint_every": None,
    "seed": 0,
}


def cmd_pretrain(cfg: dict, out: Path) -> int:
    manifest = parse_manifest(_require(cfg, "manifest"))
    if cfg["tokenizer"]:
        tokenizer = Tokenizer.load(cfg["tokenizer"])
    else:
        corpus = [r.report.text for r in manifest.records]
        tokenizer = build_vocab(corpus, n_merges=cfg["n_merges"])
    tokenizer.save(out / "tokenizer.json")

    config = TrainConfig(
        peak_lr=cfg["peak_lr"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        total_steps=cfg["total_steps"],
        warmup_steps=cfg["warmup_steps"],
        ema_decay=cfg["ema_decay"],
        seed=cfg["seed"],
    )
    weights = LossWeights(
        lambda_align=cfg["lambda_align"],
        lambda_age=cfg["lambda_age"],
        lambda_sex=cfg["lambda_sex"],
        variant=cfg["variant"],
    )
    vision_cfg = VisionEncoderConfig(
        image_side=cfg["image_side"],
        patch_side=cfg["patch_side"],
        depth=cfg["vision_depth"],
        heads=cfg["vision_heads"],
        width=cfg["vision_width"],
        tap_layers=tuple(cfg["tap_layers"]),
    )
    text_cfg = TextEncoderConfig(
        vocab_size=len(tokenizer),
        depth=cfg["text_depth"],
        max_tokens=cfg["max_tokens"],
        width=cfg["text_width"],
        heads=cfg["text_heads"],
    )
    paths = train_loop(
        manifest,
        config,
        weights,
        tokenizer=tokenizer,
        vision_cfg=vision_cfg,
        text_cfg=text_cfg,
        embed_dim=cfg["embed_dim"],
        out_dir=out,
        checkpoint_every=cfg["checkpoint_every"],
    )
    last = json.loads((out / "loss_log.jsonl").read_text().splitlines()[-1])
    write_table(out / "pretrain_summary.tsv", sorted(last), [[last[k] for k in sorted(last)]])
    for path in paths:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# zeroshot-eval


ZEROSHOT_DEFAULTS = {
    "manifest": None,
    "checkpoint": None,
    "tokenizer": None,
    "prompts": None,
    "renormalize": True,
    "trim": True,
    "batch_size": 16,
    "n_resamples": 2000,
    "level": 0.95,
    "seed": 0,
}


def _trimmed_view(manifest: DatasetManifest, label_sets, *, trim: bool):
    schema = manifest.schema
    if not trim:
        schema = LabelSchema(classes=schema.classes, mode=schema.mode)
    return apply_trim(label_sets, schema)


def _classification_stat_rows(matrix, label_sets, cfg) -> list[list]:
    named = []
    onehot = _onehot(label_sets, matrix.schema.classes)
    if matrix.schema.mode == "single_label":
        true_idx = np.argmax(onehot, axis=1).astype(np.float64)
        pred_idx = np.array(
            [matrix.schema.classes.index(c) for c in matrix.argmax_labels()],
            dtype=np.float64,
        )
        named.append(
            (
                "top1_accuracy",
                bootstrap_ci(
                    lambda s, l: float(np.mean(s == l)),
                    pred_idx,
                    true_idx,
                    n_resamples=cfg["n_resamples"],
                    level=cfg["level"],
                    seed=cfg["seed"],
                ),
            )
        )
    for name, metric in (("auroc_macro", auroc_macro), ("aupr_macro", aupr_macro)):
        try:
            named.append(
                (
                    name,
                    bootstrap_ci(
                        metric,
                        matrix.scores,
                        onehot,
                        n_resamples=cfg["n_resamples"],
                        level=cfg["level"],
                        seed=cfg["seed"],
                    ),
                )
            )
        except MetricUndefinedError as exc:
            print(f"skipping {name}: {exc}", file=sys.stderr)
    return stat_rows(named)


def cmd_zeroshot_eval(cfg: dict, out: Path) -> int:
    manifest = parse_manifest(_require(cfg, "manifest"))
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    tokenizer = Tokenizer.load(_require(cfg, "tokenizer"))
    label_sets = _label_sets(manifest)

    view = _trimmed_view(manifest, label_sets, trim=cfg["trim"])
    ensemble = (
        load_prompt_file(cfg["prompts"])
        if cfg["prompts"]
        else default_prompt_ensemble(view.schema.classes)
    )
    if tuple(ensemble.classes) != tuple(view.schema.classes):
        raise UsageError(
            "prompt classes do not match the evaluation classes "
            f"(prompts: {ensemble.classes}, classes: {view.schema.classes})"
        )
    text_fn = text_encoder_from(model, tokenizer)
    class_emb = build_class_embeddings(ensemble, text_fn, renormalize=cfg["renormalize"])

    images = _manifest_images(manifest, model.vision_cfg.image_side)
    glob, _, _ = _encode_images(model, images, cfg["batch_size"])
    ids = tuple(manifest.records[i].image_id for i in view.indices)
    matrix = zero_shot_classify(glob[list(view.indices)], class_emb, view.schema, ids=ids)

    write_predictions(matrix, out / "predictions.tsv")
    print(f"wrote {out / 'predictions.tsv'} ({matrix.scores.shape[0]} rows)")
    rows = _classification_stat_rows(matrix, list(view.labels), cfg)
    write_table(out / "zeroshot_metrics.tsv", _STAT_HEADER, rows)
    return 0


# ---------------------------------------------------------------------------
# localize


LOCALIZE_DEFAULTS = {
    "manifest": None,
    "checkpoint": None,
    "tokenizer": None,
    "prompt": None,
    "masks_dir": None,
    "mask_suffix": ".png",
    "fpr_cap": 0.3,
    "overlay": True,
    "batch_size": 8,
    "seed": 0,
}


def _load_mask(path: Path, side: int) -> np.ndarray:
    img = Image.open(path).convert("L")
    if img.size != (side, side):
        img = img.resize((side, side), Image.NEAREST)
    return np.asarray(img) > 127


def cmd_localize(cfg: dict, out: Path) -> int:
    manifest = parse_manifest(_require(cfg, "manifest"))
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    tokenizer = Tokenizer.load(_require(cfg, "tokenizer"))
    prompt = _require(cfg, "prompt")
    side = model.vision_cfg.image_side

    text_emb = text_encoder_from(model, tokenizer)([prompt])[0]
    images = _manifest_images(manifest, side)
    _, _, grids = _encode_images(model, images, cfg["batch_size"])

    heat_dir = out / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    rows = []
    for rec, image, grid in zip(manifest.records, images, grids):
        hm = compute_heatmap(grid, text_emb, (side, side))
        export_heatmap(hm, heat_dir / f"{rec.image_id}.npy")
        if cfg["overlay"]:
            save_heatmap_overlay(image, hm, heat_dir / f"{rec.image_id}_overlay.png")
        if cfg["masks_dir"]:
            mask_path = Path(cfg["masks_dir"]) / f"{rec.image_id}{cfg['mask_suffix']}"
            mask = _load_mask(mask_path, side)
            threshold, dsc, iou = best_threshold_segmentation(hm.upsampled, mask)
            pro = pro_score(hm.upsampled, mask, fpr_cap=cfg["fpr_cap"])
            rows.append([rec.image_id, threshold, dsc, iou, pro])
    if rows:
        write_table(
            out / "localization.tsv",
            ["image_id", "best_threshold", "dice", "iou", "pro"],
            rows,
        )
    print(f"wrote {len(manifest.records)} heatmaps to {heat_dir}")
    return 0


# ---------------------------------------------------------------------------
# masking-study


MASKING_DEFAULTS = {
    "manifest": None,
    "checkpoint": None,
    "tokenizer": None,
    "prompts": None,
    "percentages": [0.1, 0.3, 0.5],
    "fill": "mean",
    "batch_size": 16,
    "seed": 0,
}


def cmd_masking_study(cfg: dict, out: Path) -> int:
    manifest = parse_manifest(_require(cfg, "manifest"))
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    tokenizer = Tokenizer.load(_require(cfg, "tokenizer"))
    labels = _single_labels(manifest)
    classes = manifest.schema.classes
    side = model.vision_cfg.image_side

    ensemble = (
        load_prompt_file(cfg["prompts"]) if cfg["prompts"] else default_prompt_ensemble(classes)
    )
    text_fn = text_encoder_from(model, tokenizer)
    class_emb = build_class_embeddings(ensemble, text_fn)

    images = _manifest_images(manifest, side)
    _, _, grids = _encode_images(model, images, cfg["batch_size"])
    class_index = {c: j for j, c in enumerate(ensemble.classes)}
    heatmaps = np.stack(
        [
            compute_heatmap(grid, class_emb[class_index[label]], (side, side)).upsampled
            for grid, label in zip(grids, labels)
        ]
    )
    true_idx = np.array([class_index[label] for label in labels])

    def classifier(batch: np.ndarray) -> np.ndarray:
        glob, _, _ = _encode_images(model, batch, cfg["batch_size"])
        norms = np.linalg.norm(glob, axis=1, keepdims=True)
        scores = (glob / norms) @ class_emb.T
        return (np.argmax(scores, axis=1) == true_idx).astype(np.float64)

    points = masking_study(
        images.astype(np.float64),
        heatmaps,
        cfg["percentages"],
        classifier,
        lambda scores: float(np.mean(scores)),
        fill=cfg["fill"],
    )
    write_table(
        out / "masking.tsv",
        ["fraction", "pixels_masked", "accuracy"],
        [[p.fraction, p.pixels_masked, p.value] for p in points],
    )
    return 0


# ---------------------------------------------------------------------------
# probe / finetune / label-curve


PROBE_DEFAULTS = {
    "manifest": None,
    "checkpoint": None,
    "features": "projected",
    "val_fraction": 0.25,
    "label_fraction": 1.0,
    "epochs": 20,
    "batch_size": 16,
    "head_lr": 5e-4,
    "encoder_lr": 0.0,
    "beta2": 0.999,
    "weight_decay": 1e-2,
    "mixup_alpha": 0.0,
    "encode_batch": 16,
    "n_resamples": 2000,
    "level": 0.95,
    "seed": 0,
}

FINETUNE_DEFAULTS = dict(
    PROBE_DEFAULTS, encoder_lr=5e-7, beta2=0.98, label_fraction=1.0
)

LABEL_CURVE_DEFAULTS = dict(PROBE_DEFAULTS, fractions=[0.1, 0.3, 0.5, 0.7], seeds=[0, 1, 2])
LABEL_CURVE_DEFAULTS.pop("label_fraction")


def _classification_inputs(cfg: dict):
    """Manifest -> (feature/image tensors, integer labels, class names, model)."""
    manifest = parse_manifest(_require(cfg, "manifest"))
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    labels = _single_labels(manifest)
    classes = manifest.schema.classes
    class_index = {c: j for j, c in enumerate(classes)}
    images = _manifest_images(manifest, model.vision_cfg.image_side)
    y = torch.tensor([class_index[lab] for lab in labels], dtype=torch.long)
    return manifest, model, images, labels, y, classes


def _probe_config(cfg: dict, seed: int) -> ProbeConfig:
    return ProbeConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        head_lr=cfg["head_lr"],
        encoder_lr=cfg["encoder_lr"],
        betas=(0.9, cfg["beta2"]),
        weight_decay=cfg["weight_decay"],
        mixup_alpha=cfg["mixup_alpha"],
        seed=seed,
    )


def _epoch_table(out: Path, log) -> None:
    write_table(
        out / "epochs.tsv",
        ["epoch", "train_loss", "val_auroc", "val_aupr", "score"],
        [[r.epoch, r.train_loss, r.val_auroc, r.val_aupr, r.score] for r in log],
    )


def _val_stat_rows(probs: np.ndarray, y_val: np.ndarray, n_classes: int, cfg: dict):
    onehot = np.zeros((y_val.shape[0], n_classes))
    onehot[np.arange(y_val.shape[0]), y_val] = 1.0
    named = []
    pred = np.argmax(probs, axis=1).astype(np.float64)
    named.append(
        (
            "top1_accuracy",
            bootstrap_ci(
                lambda s, l: float(np.mean(s == l)),
                pred,
                y_val.astype(np.float64),
                n_resamples=cfg["n_resamples"],
                level=cfg["level"],
                seed=cfg["seed"],
            ),
        )
    )
    for name, metric in (("auroc_macro", auroc_macro), ("aupr_macro", aupr_macro)):
        try:
            named.append(
                (
                    name,
                    bootstrap_ci(
                        metric,
                        probs,
                        onehot,
                        n_resamples=cfg["n_resamples"],
                        level=cfg["level"],
                        seed=cfg["seed"],
                    ),
                )
            )
        except MetricUndefinedError as exc:
            print(f"skipping {name}: {exc}", file=sys.stderr)
    return stat_rows(named)


def _run_classifier(cfg: dict, out: Path) -> int:
    manifest, model, images, labels, y, classes = _classification_inputs(cfg)
    train_idx, val_idx = _split_indices(len(manifest), cfg["val_fraction"], cfg["seed"])
    config = _probe_config(cfg, cfg["seed"])

    if config.probing:
        # encoder is frozen: extract features once, train on them directly
        glob, feats, _ = _encode_images(model, images, cfg["encode_batch"])
        source = glob if cfg["features"] == "projected" else feats
        inputs = torch.tensor(source, dtype=torch.float32)
        encoder: torch.nn.Module = torch.nn.Identity()
        in_dim = inputs.shape[1]
    else:
        inputs = images_to_tensor(images)
        encoder = classification_features(model, cfg["features"])
        in_dim = model.embed_dim if cfg["features"] == "projected" else model.vision_cfg.width

    if cfg["label_fraction"] < 1.0:
        sub = subsample_labels(
            [labels[i] for i in train_idx], cfg["label_fraction"], cfg["seed"]
        )
        train_idx = train_idx[np.asarray(sub, dtype=np.intp)]

    torch.manual_seed(cfg["seed"])
    head = LinearHead(in_dim, len(classes))
    result = train_classifier(
        encoder,
        head,
        (inputs[train_idx], y[train_idx]),
        (inputs[val_idx], y[val_idx]),
        config,
    )
    _epoch_table(out, result.log)
    with torch.no_grad():
        probs = torch.softmax(head(encoder(inputs[val_idx])), dim=1).double().numpy()
    rows = _val_stat_rows(probs, y[val_idx].numpy(), len(classes), cfg)
    write_table(out / "classifier_metrics.tsv", _STAT_HEADER, rows)
    torch.save(head.state_dict(), out / "head.pt")
    print(f"best epoch {result.best_epoch} (score {result.log[result.best_epoch].score:.6g})")
    return 0


def cmd_probe(cfg: dict, out: Path) -> int:
    return _run_classifier(cfg, out)


def cmd_finetune(cfg: dict, out: Path) -> int:
    if cfg["encoder_lr"] <= 0:
        raise UsageError("finetune needs encoder_lr > 0 (use probe otherwise)")
    return _run_classifier(cfg, out)


def cmd_label_curve(cfg: dict, out: Path) -> int:
    manifest, model, images, labels, y, classes = _classification_inputs(cfg)
    train_idx, val_idx = _split_indices(len(manifest), cfg["val_fraction"], cfg["seed"])
    glob, feats, _ = _encode_images(model, images, cfg["encode_batch"])
    source = glob if cfg["features"] == "projected" else feats
    inputs = torch.tensor(source, dtype=torch.float32)
    encoder = torch.nn.Identity()
    train_labels = [labels[i] for i in train_idx]

    rows = []
    for fraction in cfg["fractions"]:
        for seed in cfg["seeds"]:
            sub = subsample_labels(train_labels, fraction, seed)
            idx = train_idx[np.asarray(sub, dtype=np.intp)]
            torch.manual_seed(seed)
            head = LinearHead(inputs.shape[1], len(classes))
            result = train_classifier(
                encoder,
                head,
                (inputs[idx], y[idx]),
                (inputs[val_idx], y[val_idx]),
                _probe_config(cfg, seed),
            )
            best = result.log[result.best_epoch]
            rows.append(
                [fraction, seed, len(idx), best.epoch, best.val_auroc, best.val_aupr, best.score]
            )
    write_table(
        out / "label_curve.tsv",
        ["fraction", "seed", "n_train", "best_epoch", "val_auroc", "val_aupr", "score"],
        rows,
    )
    return 0


# ---------------------------------------------------------------------------
# segment


SEGMENT_DEFAULTS = {
    "pairs": None,
    "checkpoint": None,
    "tap_layers": None,
    "decoder_channels": None,
    "val_fraction": 0.25,
    "epochs": 100,
    "batch_size": 32,
    "lr": 1e-3,
    "weight_decay": 0.0,
    "val_threshold": 0.5,
    "dice_weight": 1.0,
    "focal_weight": 1.0,
    "seed": 0,
}


def cmd_segment(cfg: dict, out: Path) -> int:
    with open(_require(cfg, "pairs"), encoding="utf-8") as fh:
        pairs = json.load(fh)
    if not pairs:
        raise UsageError("pairs file lists no image/mask pairs")
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    side = model.vision_cfg.image_side

    images = np.stack([_load_image_array(p["image"], side) for p in pairs])
    masks = np.stack([_load_mask(Path(p["mask"]), side) for p in pairs])
    x = images_to_tensor(images)
    y = torch.tensor(masks, dtype=torch.float32)
    train_idx, val_idx = _split_indices(len(pairs), cfg["val_fraction"], cfg["seed"])

    taps = tuple(cfg["tap_layers"] or model.vision_cfg.tap_layers)
    channels = cfg["decoder_channels"]
    if channels is None:
        channels = [256 // 2**i for i in range(len(taps) - 1)]
    head_cfg = SegHeadConfig(
        tap_layers=taps,
        decoder_channels=tuple(channels),
        input_side=side,
        dice_weight=cfg["dice_weight"],
        focal_weight=cfg["focal_weight"],
    )
    torch.manual_seed(cfg["seed"])
    head = SegmentationHead(model.vision_cfg, head_cfg)
    result = train_segmenter(
        model,
        head,
        (x[train_idx], y[train_idx]),
        (x[val_idx], y[val_idx]),
        SegTrainConfig(
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            lr=cfg["lr"],
            weight_decay=cfg["weight_decay"],
            val_threshold=cfg["val_threshold"],
            seed=cfg["seed"],
        ),
    )
    write_table(
        out / "seg_epochs.tsv",
        ["epoch", "train_loss", "val_dice"],
        [[r.epoch, r.train_loss, r.val_dice] for r in result.log],
    )
    best = result.log[result.best_epoch]
    write_table(
        out / "seg_summary.tsv",
        ["best_epoch", "val_dice"],
        [[result.best_epoch, best.val_dice]],
    )
    torch.save(head.state_dict(), out / "seg_head.pt")
    return 0


# ---------------------------------------------------------------------------
# metrics


METRICS_DEFAULTS = {
    "predictions": None,
    "manifest": None,
    "n_resamples": 2000,
    "level": 0.95,
    "seed": 0,
}


def cmd_metrics(cfg: dict, out: Path) -> int:
    manifest = parse_manifest(_require(cfg, "manifest"), check_files=False)
    matrix = read_predictions(_require(cfg, "predictions"), mode=manifest.schema.mode)
    if matrix.ids is None:
        raise UsageError("prediction table carries no sample ids")
    by_id = {rec.image_id: rec for rec in manifest.records}
    missing = [i for i in matrix.ids if i not in by_id]
    if missing:
        raise UsageError(f"predictions reference unknown ids: {missing[:5]}")
    label_sets = []
    for sample_id in matrix.ids:
        rec = by_id[sample_id]
        if rec.labels is None:
            raise UsageError(f"record {sample_id!r} carries no labels")
        label_sets.append(rec.labels)
    rows = _classification_stat_rows(matrix, label_sets, cfg)
    write_table(out / "metrics.tsv", _STAT_HEADER, rows)
    return 0


# ---------------------------------------------------------------------------
# serve


SERVE_DEFAULTS = {
    "cases": None,
    "participants": None,
    "classes": None,
    "admin_token": None,
    "host": "127.0.0.1",
    "port": 8000,
    "seed": 0,
}


def build_study_from_config(cfg: dict, out: Path) -> Study:
    with open(_require(cfg, "cases"), encoding="utf-8") as fh:
        case_objs = json.load(fh)
    with open(_require(cfg, "participants"), encoding="utf-8") as fh:
        participant_objs = json.load(fh)
    cases = [
        Case(
            id=obj["id"],
            image=obj["image"],
            ground_truth=obj["ground_truth"],
            assistance=AssistancePayload(
                top5_diseases=tuple((n, s) for n, s in obj["assistance"]["top5_diseases"]),
                top5_lesions=tuple((n, s) for n, s in obj["assistance"]["top5_lesions"]),
                heatmap=obj["assistance"]["heatmap"],
            ),
        )
        for obj in case_objs
    ]
    participants = [
        Participant(id=obj["id"], tier=obj["tier"], institution=obj.get("institution", ""))
        for obj in participant_objs
    ]
    classes = tuple(cfg["classes"]) if cfg["classes"] else None
    return Study(
        cases,
        participants,
        classes=classes,
        seed=cfg["seed"],
        log_path=out / "events.jsonl",
    )


def cmd_serve(cfg: dict, out: Path, *, dry_run: bool = False) -> int:
    study = build_study_from_config(cfg, out)
    app = create_app(study, admin_token=cfg["admin_token"])
    print(f"study ready: {len(study.cases)} cases, {len(study.participants)} participants")
    if dry_run:
        return 0
    import uvicorn

    uvicorn.run(app, host=cfg["host"], port=cfg["port"])
    return 0


# ---------------------------------------------------------------------------
# export-embeddings


EXPORT_DEFAULTS = {
    "manifest": None,
    "checkpoint": None,
    "tokenizer": None,
    "what": "image",
    "batch_size": 16,
    "seed": 0,
}


def cmd_export_embeddings(cfg: dict, out: Path) -> int:
    manifest = parse_manifest(_require(cfg, "manifest"))
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    what = cfg["what"]
    if what not in ("image", "text", "both"):
        raise UsageError(f"unknown export target {what!r}")
    ids = [rec.image_id for rec in manifest.records]
    if what in ("image", "both"):
        images = _manifest_images(manifest, model.vision_cfg.image_side)
        glob, _, _ = _encode_images(model, images, cfg["batch_size"])
        export_embeddings(ids, glob, out / "embeddings_image.tsv")
        print(f"wrote {out / 'embeddings_image.tsv'} ({len(ids)} rows)")
    if what in ("text", "both"):
        tokenizer = Tokenizer.load(_require(cfg, "tokenizer"))
        text_fn = text_encoder_from(model, tokenizer)
        emb = text_fn([rec.report.text for rec in manifest.records])
        export_embeddings(ids, emb, out / "embeddings_text.tsv")
        print(f"wrote {out / 'embeddings_text.tsv'} ({len(ids)} rows)")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


_COMMANDS = {
    "curate": (cmd_curate, CURATE_DEFAULTS, "build an eye-level manifest from raw records"),
    "pretrain": (cmd_pretrain, PRETRAIN_DEFAULTS, "contrastive image-report pretraining"),
    "zeroshot-eval": (
        cmd_zeroshot_eval,
        ZEROSHOT_DEFAULTS,
        "prompt-based classification over a labeled manifest",
    ),
    "localize": (cmd_localize, LOCALIZE_DEFAULTS, "text-guided heatmaps (+ mask scoring)"),
    "masking-study": (
        cmd_masking_study,
        MASKING_DEFAULTS,
        "occlude top-activated pixels and re-score",
    ),
    "probe": (cmd_probe, PROBE_DEFAULTS, "linear probe on frozen features"),
    "finetune": (cmd_finetune, FINETUNE_DEFAULTS, "end-to-end classifier fine-tuning"),
    "segment": (cmd_segment, SEGMENT_DEFAULTS, "train the segmentation head"),
    "label-curve": (
        cmd_label_curve,
        LABEL_CURVE_DEFAULTS,
        "probe at several label fractions and seeds",
    ),
    "metrics": (cmd_metrics, METRICS_DEFAULTS, "score a prediction table against labels"),
    "serve": (cmd_serve, SERVE_DEFAULTS, "run the reading-study service"),
    "export-embeddings": (
        cmd_export_embeddings,
        EXPORT_DEFAULTS,
        "dump image/text embeddings as TSV",
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retinavl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (func, defaults, help_text) in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument(
            "--set",
            action="append",
            default=[],
            dest="overrides",
            metavar="KEY=VALUE",
            help="override one config key",
        )
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if name == "serve":
            sp.add_argument("--dry-run", action="store_true", help="validate and exit")
        sp.set_defaults(func=func, defaults=defaults, name=name)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    out = Path(args.out)
    try:
        cfg = resolve_config(args.defaults, args.config, args.overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, out, args.name)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.name == "serve":
            return cmd_serve(cfg, out, dry_run=args.dry_run)
        return args.func(cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        (out / "error.log").write_text(traceback.format_exc(), encoding="utf-8")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
