"""Vision/text encoders, the tokenizer, and checkpoint/export plumbing."""

from retinavl.encoders.checkpoint import (
    export_embeddings,
    load_checkpoint,
    save_checkpoint,
)
from retinavl.encoders.models import (
    DualEncoder,
    EmbeddingBatch,
    TextEncoderConfig,
    VisionEncoderConfig,
    build_dual_encoder,
    images_to_tensor,
)
from retinavl.encoders.tokenizer import Tokenizer, build_vocab

__all__ = [
    "DualEncoder",
    "EmbeddingBatch",
    "TextEncoderConfig",
    "Tokenizer",
    "VisionEncoderConfig",
    "build_dual_encoder",
    "build_vocab",
    "export_embeddings",
    "images_to_tensor",
    "load_checkpoint",
    "save_checkpoint",
]
