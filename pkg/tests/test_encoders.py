"""Encoder, tokenizer, and checkpoint tests on desk-scale configs."""

import numpy as np
import pytest
import torch

from retinavl.encoders import (
    DualEncoder,
    TextEncoderConfig,
    Tokenizer,
    VisionEncoderConfig,
    build_dual_encoder,
    build_vocab,
    export_embeddings,
    load_checkpoint,
    save_checkpoint,
)
from retinavl.encoders.checkpoint import checkpoint_name, read_embeddings

CORPUS = [
    "drusen in the right eye.",
    "normal fundus, both eyes.",
    "left eye: hemorrhage and exudates.",
    "early amd. tessellated fundus.",
    "severe retinopathy with macular edema.",
]


@pytest.fixture(scope="module")
def tok():
    return build_vocab(CORPUS, n_merges=50)


def tiny_configs(vocab_size):
    vision = VisionEncoderConfig(
        image_side=32, patch_side=8, depth=2, heads=2, width=32, tap_layers=(1, 2)
    )
    text = TextEncoderConfig(vocab_size=vocab_size, depth=2, max_tokens=16, width=32, heads=2)
    return vision, text


class TestTokenizer:
    def test_empty_text(self, tok):
        ids = tok.tokenize("", max_tokens=8)
        assert ids == [tok.start_id, tok.end_id]

    def test_starts_and_ends_with_markers(self, tok):
        ids = tok.tokenize("drusen in the right eye", max_tokens=64)
        assert ids[0] == tok.start_id
        assert ids[-1] == tok.end_id

    def test_truncation_keeps_prefix_and_end_marker(self, tok):
        long_text = " ".join(["macular edema"] * 50)
        full = tok.tokenize(long_text, max_tokens=1024)
        ids = tok.tokenize(long_text, max_tokens=16)
        assert len(ids) == 16
        assert ids[-1] == tok.end_id
        assert ids[:15] == full[:15]

    def test_round_trip_short_phrase(self, tok):
        phrase = "drusen in the right eye."
        ids = tok.tokenize(phrase, max_tokens=64)
        assert tok.detokenize(ids) == phrase

    def test_unknown_characters_map_to_unk(self, tok):
        ids = tok.tokenize("drusen é", max_tokens=16)
        assert tok.unk_id in ids

    def test_save_load_round_trip(self, tok, tmp_path):
        p = tmp_path / "vocab.json"
        tok.save(p)
        again = Tokenizer.load(p)
        text = "left eye: hemorrhage."
        assert again.tokenize(text, 32) == tok.tokenize(text, 32)

    def test_max_tokens_floor(self, tok):
        with pytest.raises(ValueError):
            tok.tokenize("x", max_tokens=1)


class TestVisionEncoder:
    def test_patch_count_arithmetic(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        images = torch.randn(2, 3, 32, 32)
        emb, features, grid, taps = model.encode_image(images)
        assert grid.shape == (2, (32 // 8) ** 2, 16)
        assert emb.shape == (2, 16)
        assert features.shape == (2, 32)
        assert set(taps) == {1, 2}
        assert taps[1].shape == (2, 16, 32)

    def test_reference_grid_is_576(self):
        cfg = VisionEncoderConfig()  # 336 / 14
        assert cfg.grid_side**2 == 576

    def test_unit_norm_embeddings(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=1)
        emb, _, grid, _ = model.encode_image(torch.randn(3, 3, 32, 32))
        np.testing.assert_allclose(emb.norm(dim=-1).detach(), 1.0, atol=1e-5)
        np.testing.assert_allclose(
            grid.norm(dim=-1).detach().reshape(-1), 1.0, atol=1e-5
        )

    def test_size_mismatch_rejected(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16)
        with pytest.raises(ValueError, match="32x32"):
            model.encode_image(torch.randn(1, 3, 16, 16))

    def test_deterministic_given_seed(self, tok):
        vision, text = tiny_configs(len(tok))
        img = torch.randn(1, 3, 32, 32)
        a = build_dual_encoder(vision, text, embed_dim=16, seed=7)
        b = build_dual_encoder(vision, text, embed_dim=16, seed=7)
        ea, *_ = a.encode_image(img)
        eb, *_ = b.encode_image(img)
        torch.testing.assert_close(ea, eb, rtol=0, atol=0)

    def test_same_image_twice_identical(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=3)
        img = torch.randn(1, 3, 32, 32)
        e1, *_ = model.encode_image(img)
        e2, *_ = model.encode_image(img)
        torch.testing.assert_close(e1, e2, rtol=0, atol=0)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            VisionEncoderConfig(image_side=30, patch_side=8)
        with pytest.raises(ValueError, match="tap_layers"):
            VisionEncoderConfig(image_side=32, patch_side=8, depth=2, tap_layers=(3,))


class TestTextEncoder:
    def test_unit_norm(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        seqs = [tok.tokenize(t, 16) for t in CORPUS[:3]]
        emb = model.encode_text(model.pad_batch(seqs))
        np.testing.assert_allclose(emb.norm(dim=-1).detach(), 1.0, atol=1e-5)

    def test_identical_sequences_identical_embeddings(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        seq = tok.tokenize("early amd", 16)
        emb = model.encode_text(model.pad_batch([seq, seq]))
        torch.testing.assert_close(emb[0], emb[1], rtol=0, atol=0)

    def test_truncation_oracle_equal_embeddings(self, tok):
        # two texts sharing a prefix, both truncated to the same 8 tokens,
        # must embed identically
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        a = tok.tokenize("severe retinopathy with macular edema and drusen", 8)
        b = tok.tokenize("severe retinopathy with macular edema in both eyes", 8)
        assert a == b  # the truncation oracle: identical prefixes
        emb = model.encode_text(model.pad_batch([a, b]))
        torch.testing.assert_close(emb[0], emb[1], rtol=0, atol=0)

    def test_padding_does_not_change_embedding(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        seq = tok.tokenize("early amd", 16)
        short = model.encode_text(model.pad_batch([seq]))
        padded = model.encode_text(model.pad_batch([seq, tok.tokenize(CORPUS[0], 16)]))
        torch.testing.assert_close(short[0], padded[0], rtol=0, atol=1e-6)

    def test_overlong_sequence_rejected(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        bad = torch.full((1, 17), tok.pad_id, dtype=torch.long)
        with pytest.raises(ValueError, match="max_tokens"):
            model.encode_text(bad)

    def test_renormalize_idempotent(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        emb = model.encode_text(model.pad_batch([tok.tokenize("x", 8)]))
        again = torch.nn.functional.normalize(emb, dim=-1)
        torch.testing.assert_close(emb, again, rtol=0, atol=1e-7)


class TestCheckpoint:
    def test_save_load_round_trip(self, tok, tmp_path):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=5)
        path = save_checkpoint(model, step=42, directory=tmp_path)
        assert path.endswith("step000042.pt")
        loaded, step, ema = load_checkpoint(path)
        assert step == 42 and ema is False
        assert loaded.vision_cfg == vision and loaded.text_cfg == text
        img = torch.randn(1, 3, 32, 32)
        e1, *_ = model.encode_image(img)
        e2, *_ = loaded.encode_image(img)
        torch.testing.assert_close(e1, e2, rtol=0, atol=0)

    def test_ema_tag_in_name(self, tok, tmp_path):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16)
        path = save_checkpoint(model, step=7, directory=tmp_path, ema=True)
        assert path.endswith("step000007-ema.pt")
        assert checkpoint_name(7, True) == "step000007-ema.pt"
        _, _, ema = load_checkpoint(path)
        assert ema is True

    def test_tau_round_trips(self, tok, tmp_path):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16)
        with torch.no_grad():
            model.log_tau.fill_(-1.5)
        path = save_checkpoint(model, step=1, directory=tmp_path)
        loaded, _, _ = load_checkpoint(path)
        assert loaded.log_tau.item() == pytest.approx(-1.5)

    def test_embedding_export_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        mat = rng.normal(size=(4, 8))
        ids = [f"img{i}" for i in range(4)]
        p = tmp_path / "emb.tsv"
        export_embeddings(ids, mat, p)
        got_ids, got = read_embeddings(p)
        assert got_ids == ids
        np.testing.assert_allclose(got, mat, rtol=1e-6)

    def test_export_shape_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            export_embeddings(["a"], np.zeros((2, 3)), tmp_path / "x.tsv")


class TestDualEncoderMisc:
    def test_tau_init_and_floor(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16)
        assert model.tau.item() == pytest.approx(0.07, rel=1e-6)
        with torch.no_grad():
            model.log_tau.fill_(-100.0)
        assert model.tau.item() == pytest.approx(DualEncoder.TAU_FLOOR)

    def test_forward_builds_embedding_batch(self, tok):
        vision, text = tiny_configs(len(tok))
        model = build_dual_encoder(vision, text, embed_dim=16, seed=0)
        tokens = model.pad_batch([tok.tokenize(t, 16) for t in CORPUS[:2]])
        batch = model(torch.randn(2, 3, 32, 32), tokens)
        batch.validate()
        assert batch.image_features.shape == (2, 32)
        assert batch.patch_grids.shape == (2, 16, 16)
