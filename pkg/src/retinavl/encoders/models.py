"""Dual-encoder architecture: vision/text transformers over a shared space.

Both encoders are plain pre-LN transformers. The vision side embeds
non-overlapping square patches plus a class token whose projected output
is the global image embedding; patch-token outputs from the final layer
are projected into the same shared space for text-patch similarity maps,
and intermediate layers can be tapped for dense decoding heads. The text
side pools at the end-marker position. All returned embeddings are
L2-normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class VisionEncoderConfig:
    image_side: int = 336
    patch_side: int = 14
    depth: int = 24
    heads: int = 16
    width: int = 1024
    tap_layers: tuple[int, ...] = (6, 12, 18, 24)

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ValueError("image_side must be divisible by patch_side")
        if any(not 1 <= t <= self.depth for t in self.tap_layers):
            raise ValueError("tap_layers must lie in [1, depth]")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    depth: int = 12
    max_tokens: int = 128
    width: int = 512
    heads: int = 8

    def __post_init__(self):
        if self.max_tokens < 2:
            raise ValueError("max_tokens must be >= 2 (start and end markers)")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")


@dataclass
class EmbeddingBatch:
    """Encoder outputs for one batch of image-text pairs."""

    image_embeddings: torch.Tensor  # N x D, unit rows
    text_embeddings: torch.Tensor  # N x D, unit rows
    image_features: torch.Tensor  # N x F, pre-projection
    patch_grids: torch.Tensor  # N x (G*G) x D, unit rows
    ids: tuple[str, ...] = field(default_factory=tuple)

    def validate(self, atol: float = 1e-5) -> None:
        for name, t in (
            ("image_embeddings", self.image_embeddings),
            ("text_embeddings", self.text_embeddings),
        ):
            norms = t.norm(dim=-1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=atol):
                raise ValueError(f"{name} rows are not unit-norm")


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * 4), nn.GELU(), nn.Linear(width * 4, width)
        )

    def forward(self, x, key_padding_mask=None):
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + a
        return x + self.mlp(self.ln2(x))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: VisionEncoderConfig, embed_dim: int):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            3, cfg.width, kernel_size=cfg.patch_side, stride=cfg.patch_side
        )
        n_patches = cfg.grid_side**2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.empty(1, n_patches + 1, cfg.width))
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(_Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.width)
        self.projection = nn.Linear(cfg.width, embed_dim, bias=False)

    def forward(self, images: torch.Tensor):
        """(global_embedding, features, patch_grid, layer_features)."""
        n, _, h, w = images.shape
        if h != self.cfg.image_side or w != self.cfg.image_side:
            raise ValueError(
                f"expected {self.cfg.image_side}x{self.cfg.image_side} input, "
                f"got {h}x{w}"
            )
        x = self.patch_embed(images)  # N x width x G x G
        x = x.flatten(2).transpose(1, 2)  # N x G*G x width
        x = torch.cat([self.cls_token.expand(n, -1, -1), x], dim=1)
        x = x + self.pos_embed
        taps: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in self.cfg.tap_layers:
                taps[i] = x[:, 1:, :]  # patch tokens only
        x = self.ln_final(x)
        features = x[:, 0, :]  # pre-projection class token (f_i)
        global_emb = nn.functional.normalize(self.projection(features), dim=-1)
        patch_grid = nn.functional.normalize(self.projection(x[:, 1:, :]), dim=-1)
        return global_emb, features, patch_grid, taps


class TextTransformer(nn.Module):
    def __init__(self, cfg: TextEncoderConfig, embed_dim: int, pad_id: int, end_id: int):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        self.end_id = end_id
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_embed = nn.Parameter(torch.empty(1, cfg.max_tokens, cfg.width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(_Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.width)
        self.projection = nn.Linear(cfg.width, embed_dim, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        n, length = tokens.shape
        if length > self.cfg.max_tokens:
            raise ValueError(
                f"sequence length {length} exceeds max_tokens {self.cfg.max_tokens}; "
                "tokenize() is the truncation point"
            )
        pad_mask = tokens == self.pad_id
        x = self.token_embed(tokens) + self.pos_embed[:, :length, :]
        for block in self.blocks:
            x = block(x, key_padding_mask=pad_mask)
        x = self.ln_final(x)
        eot = (tokens == self.end_id).float().argmax(dim=1)
        pooled = x[torch.arange(n), eot]
        return nn.functional.normalize(self.projection(pooled), dim=-1)


class DualEncoder(nn.Module):
    """Both encoders plus the learnable softmax temperature."""

    TAU_FLOOR = 0.01

    def __init__(
        self,
        vision_cfg: VisionEncoderConfig,
        text_cfg: TextEncoderConfig,
        embed_dim: int = 768,
        pad_id: int = 2,  # Tokenizer special ordering: start, end, pad, unk
        end_id: int = 1,
        tau_init: float = 0.07,
    ):
        super().__init__()
        self.vision_cfg = vision_cfg
        self.text_cfg = text_cfg
        self.embed_dim = embed_dim
        self.pad_id = pad_id
        self.end_id = end_id
        self.visual = VisionTransformer(vision_cfg, embed_dim)
        self.textual = TextTransformer(text_cfg, embed_dim, pad_id, end_id)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(min=self.TAU_FLOOR)

    def encode_image(self, images: torch.Tensor):
        return self.visual(images)

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.textual(tokens)

    def forward(self, images: torch.Tensor, tokens: torch.Tensor) -> EmbeddingBatch:
        global_emb, features, patch_grid, _ = self.visual(images)
        text_emb = self.textual(tokens)
        return EmbeddingBatch(
            image_embeddings=global_emb,
            text_embeddings=text_emb,
            image_features=features,
            patch_grids=patch_grid,
        )

    def pad_batch(self, sequences: list[list[int]]) -> torch.Tensor:
        """Right-pad variable-length token sequences into a batch tensor."""
        length = max(len(s) for s in sequences)
        out = torch.full((len(sequences), length), self.pad_id, dtype=torch.long)
        for i, seq in enumerate(sequences):
            out[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        return out


def build_dual_encoder(
    vision_cfg: VisionEncoderConfig,
    text_cfg: TextEncoderConfig,
    embed_dim: int = 768,
    *,
    seed: int = 0,
    pad_id: int = 2,
    end_id: int = 1,
) -> DualEncoder:
    """Seeded random initialization (tests and from-scratch runs)."""
    torch.manual_seed(seed)
    return DualEncoder(vision_cfg, text_cfg, embed_dim, pad_id=pad_id, end_id=end_id)


def images_to_tensor(images: np.ndarray | list[np.ndarray]) -> torch.Tensor:
    """uint8 HxWx3 image(s) -> N x 3 x H x W float tensor in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(arr.astype(np.float32) / 255.0)
    return (t.permute(0, 3, 1, 2) - 0.5) / 0.5
