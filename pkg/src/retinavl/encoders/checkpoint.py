"""Checkpoint archive and embedding export.

A checkpoint is a single torch archive holding the full parameter state
plus a config header with every hyperparameter needed to rebuild the
model, so loading never depends on out-of-band configuration. File names
carry the step and an ``ema`` tag: ``step000500.pt`` / ``step000500-ema.pt``.
"""

from __future__ import annotations

import os
from dataclasses import asdict

import numpy as np
import torch

from retinavl.encoders.models import (
    DualEncoder,
    TextEncoderConfig,
    VisionEncoderConfig,
)


def checkpoint_name(step: int, ema: bool) -> str:
    return f"step{step:06d}{'-ema' if ema else ''}.pt"


def save_checkpoint(
    model: DualEncoder, step: int, directory: str | os.PathLike, *, ema: bool = False
) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(os.fspath(directory), checkpoint_name(step, ema))
    payload = {
        "vision_config": asdict(model.vision_cfg),
        "text_config": asdict(model.text_cfg),
        "embed_dim": model.embed_dim,
        "pad_id": model.pad_id,
        "end_id": model.end_id,
        "step": step,
        "ema": ema,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[DualEncoder, int, bool]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    # dataclass round-trip: tap_layers arrives as a list under asdict
    vision_cfg = VisionEncoderConfig(
        **{
            **payload["vision_config"],
            "tap_layers": tuple(payload["vision_config"]["tap_layers"]),
        }
    )
    text_cfg = TextEncoderConfig(**payload["text_config"])
    model = DualEncoder(
        vision_cfg,
        text_cfg,
        embed_dim=payload["embed_dim"],
        pad_id=payload["pad_id"],
        end_id=payload["end_id"],
    )
    model.load_state_dict(payload["state_dict"])
    return model, payload["step"], payload["ema"]


def export_embeddings(
    ids: list[str], embeddings: np.ndarray | torch.Tensor, path: str | os.PathLike
) -> None:
    """Write a line-delimited id + N x D matrix (tab-separated)."""
    mat = np.asarray(embeddings.detach().cpu() if torch.is_tensor(embeddings) else embeddings)
    if mat.ndim != 2 or len(ids) != mat.shape[0]:
        raise ValueError("ids and embedding rows must correspond 1:1")
    with open(path, "w", encoding="utf-8") as fh:
        for rid, row in zip(ids, mat):
            fh.write(rid + "\t" + "\t".join(f"{v:.8g}" for v in row) + "\n")


def read_embeddings(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    ids: list[str] = []
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return ids, np.asarray(rows, dtype=np.float64)
