"""Training objectives.

The total objective is the bidirectional contrastive loss over the
image-text cosine similarity matrix, a cross-modal alignment penalty on
the two within-modality Gram matrices, and — in the demographic variant —
auxiliary sex (binary cross-entropy) and age (squared-error) predictions
from pre-projection image features.

All functions operate on torch tensors of any float dtype and stay on the
autograd tape, so the same code path serves training and the float64
finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class LossWeights:
    """Objective weights. The base variant zeroes the demographic terms."""

    lambda_align: float = 1.0
    lambda_age: float = 1.0
    lambda_sex: float = 0.1
    variant: str = "base"  # "base" | "demographic"

    def __post_init__(self):
        if self.variant not in ("base", "demographic"):
            raise ValueError(f"unknown variant: {self.variant!r}")
        if min(self.lambda_align, self.lambda_age, self.lambda_sex) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.variant == "base":
            object.__setattr__(self, "lambda_age", 0.0)
            object.__setattr__(self, "lambda_sex", 0.0)


@dataclass
class SimilarityMatrix:
    s: torch.Tensor  # N x N cosine similarities
    temperature: torch.Tensor  # scalar, > 0


@dataclass
class GramPair:
    s_img: torch.Tensor  # N x N within-image cosines
    s_txt: torch.Tensor  # N x N within-text cosines


class DemographicHeads(nn.Module):
    """Raw weight vectors scoring pre-projection features."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.w_sex = nn.Parameter(torch.zeros(feature_dim))
        self.w_age = nn.Parameter(torch.zeros(feature_dim))

    def sex_logits(self, features: torch.Tensor) -> torch.Tensor:
        return features @ self.w_sex

    def age_predictions(self, features: torch.Tensor) -> torch.Tensor:
        return features @ self.w_age


def _normalize_rows(m: torch.Tensor, name: str) -> torch.Tensor:
    norms = m.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"{name} contains a zero-norm row")
    return m / norms


def similarity_matrix(
    u: torch.Tensor, v: torch.Tensor, temperature: torch.Tensor | float = 1.0
) -> SimilarityMatrix:
    """Pairwise cosine similarities s_ij between rows of U and rows of V."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    s = _normalize_rows(u, "U") @ _normalize_rows(v, "V").T
    t = (
        temperature
        if torch.is_tensor(temperature)
        else torch.tensor(float(temperature), dtype=s.dtype)
    )
    if float(t.detach()) <= 0:
        raise ValueError("temperature must be positive")
    return SimilarityMatrix(s=s, temperature=t)


def clip_loss(sim: SimilarityMatrix) -> torch.Tensor:
    """Mean of image-to-text and text-to-image cross-entropies.

    Rows index images, columns index texts, and the matched pair sits on
    the diagonal; both directions use the temperature-scaled similarities
    as logits.
    """
    s = sim.s
    if not torch.isfinite(s).all():
        raise ValueError("similarity matrix has non-finite entries")
    n = s.shape[0]
    logits = s / sim.temperature
    targets = torch.arange(n, device=s.device)
    l_i2t = nn.functional.cross_entropy(logits, targets)
    l_t2i = nn.functional.cross_entropy(logits.T, targets)
    return 0.5 * (l_i2t + l_t2i)


def gram_pair(image_embeddings: torch.Tensor, text_embeddings: torch.Tensor) -> GramPair:
    """Within-modality cosine matrices for the alignment penalty."""
    return GramPair(
        s_img=similarity_matrix(image_embeddings, image_embeddings).s,
        s_txt=similarity_matrix(text_embeddings, text_embeddings).s,
    )


def align_loss(grams: GramPair) -> torch.Tensor:
    """Mean over all N^2 entries of the squared Gram difference."""
    if grams.s_img.shape != grams.s_txt.shape:
        raise ValueError("Gram matrices must have matching shapes")
    return ((grams.s_img - grams.s_txt) ** 2).mean()


def demographic_losses(
    features: torch.Tensor,
    heads: DemographicHeads,
    sex: torch.Tensor,
    age: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_sex, L_age): mean BCE on sex logits, mean squared age error."""
    if features.shape[0] == 0:
        raise ValueError("demographic losses need a non-empty batch")
    l_sex = nn.functional.binary_cross_entropy_with_logits(
        heads.sex_logits(features), sex.to(features.dtype)
    )
    l_age = nn.functional.mse_loss(heads.age_predictions(features), age.to(features.dtype))
    return l_sex, l_age


def total_loss(
    l_clip: torch.Tensor,
    l_align: torch.Tensor,
    l_sex: torch.Tensor | None,
    l_age: torch.Tensor | None,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted sum of the loss components for the configured variant."""
    out = l_clip + weights.lambda_align * l_align
    if weights.lambda_age != 0.0:
        if l_age is None:
            raise ValueError("demographic variant needs an age loss component")
        out = out + weights.lambda_age * l_age
    if weights.lambda_sex != 0.0:
        if l_sex is None:
            raise ValueError("demographic variant needs a sex loss component")
        out = out + weights.lambda_sex * l_sex
    return out
