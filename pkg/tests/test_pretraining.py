"""Objective, schedule, and training-step tests.

Loss values are checked against the plain-Python oracles in oracles.py at
float64; gradients against central finite differences. The full-size
versions of these suites (200 loss instances, 20 gradient instances, the
500-step overfit) live in test_acceptance.py.
"""

import math

import numpy as np
import pytest
import torch

import oracles
from retinavl.encoders import TextEncoderConfig, VisionEncoderConfig, build_dual_encoder
from retinavl.pretraining import (
    DemographicHeads,
    EmaTracker,
    GramPair,
    LossWeights,
    TrainConfig,
    align_loss,
    clip_loss,
    demographic_losses,
    ema_update,
    gram_pair,
    init_train_state,
    lr_at_step,
    similarity_matrix,
    total_loss,
    train_loop,
    train_step,
)
from retinavl.pretraining.train import NonFiniteLossError, TrainBatch

torch.set_num_threads(2)


def rand_embeddings(rng, n, d):
    return torch.tensor(rng.normal(size=(n, d)), dtype=torch.float64)


class TestSimilarityMatrix:
    def test_orthonormal_rows_give_identity(self):
        u = torch.eye(4, dtype=torch.float64)
        sim = similarity_matrix(u, u)
        torch.testing.assert_close(sim.s, torch.eye(4, dtype=torch.float64))

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        u = rand_embeddings(rng, 3, 5)
        v = rand_embeddings(rng, 3, 5)
        torch.testing.assert_close(similarity_matrix(2 * u, v).s, similarity_matrix(u, v).s)

    def test_matches_per_entry_oracle(self):
        rng = np.random.default_rng(1)
        u = rand_embeddings(rng, 3, 4)
        v = rand_embeddings(rng, 3, 4)
        s = similarity_matrix(u, v).s
        for i in range(3):
            for j in range(3):
                want = oracles.cosine(u[i].tolist(), v[j].tolist())
                assert abs(float(s[i, j]) - want) <= 1e-12

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(2)
        s = similarity_matrix(rand_embeddings(rng, 6, 3), rand_embeddings(rng, 6, 3)).s
        assert float(s.abs().max()) <= 1.0 + 1e-12

    def test_zero_row_rejected(self):
        u = torch.zeros(2, 3, dtype=torch.float64)
        u[1, 0] = 1.0
        with pytest.raises(ValueError, match="zero-norm"):
            similarity_matrix(u, torch.ones(2, 3, dtype=torch.float64))

    def test_nonpositive_temperature_rejected(self):
        u = torch.eye(2, dtype=torch.float64)
        with pytest.raises(ValueError, match="temperature"):
            similarity_matrix(u, u, temperature=0.0)


class TestClipLoss:
    def test_single_pair_is_zero(self):
        sim = similarity_matrix(torch.ones(1, 4), torch.ones(1, 4), temperature=0.07)
        assert float(clip_loss(sim)) == 0.0

    def test_uniform_similarities_give_log_n(self):
        for n in (2, 3, 5, 8):
            u = torch.ones(n, 4, dtype=torch.float64)
            sim = similarity_matrix(u, u, temperature=0.5)
            assert float(clip_loss(sim)) == pytest.approx(math.log(n), abs=1e-12)

    def test_identity_similarity_frozen_value(self):
        # N=2, S=I, tau=1: each direction is ln(1 + e^-1)
        from retinavl.pretraining.losses import SimilarityMatrix

        sim = SimilarityMatrix(
            s=torch.eye(2, dtype=torch.float64), temperature=torch.tensor(1.0)
        )
        want = math.log(1.0 + math.exp(-1.0))  # 0.3132616875182228
        assert float(clip_loss(sim)) == pytest.approx(want, abs=1e-14)
        assert float(clip_loss(sim)) == pytest.approx(0.3132616875182228, abs=1e-14)

    def test_matches_direct_softmax_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(1, 9))
            u = rand_embeddings(rng, n, 6)
            v = rand_embeddings(rng, n, 6)
            tau = float(rng.uniform(0.05, 2.0))
            sim = similarity_matrix(u, v, temperature=tau)
            want = oracles.clip_loss_direct(
                [[float(x) for x in row] for row in sim.s], tau
            )
            assert float(clip_loss(sim)) == pytest.approx(want, abs=1e-10)

    def test_non_finite_rejected(self):
        from retinavl.pretraining.losses import SimilarityMatrix

        sim = SimilarityMatrix(
            s=torch.tensor([[1.0, float("nan")], [0.0, 1.0]]),
            temperature=torch.tensor(1.0),
        )
        with pytest.raises(ValueError, match="non-finite"):
            clip_loss(sim)


class TestAlignLoss:
    def test_identical_grams_zero(self):
        rng = np.random.default_rng(4)
        u = rand_embeddings(rng, 4, 5)
        g = gram_pair(u, u)
        assert float(align_loss(g)) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = similarity_matrix(rand_embeddings(rng, 4, 5), rand_embeddings(rng, 4, 5)).s
        b = similarity_matrix(rand_embeddings(rng, 4, 5), rand_embeddings(rng, 4, 5)).s
        assert float(align_loss(GramPair(a, b))) == pytest.approx(
            float(align_loss(GramPair(b, a))), abs=1e-15
        )

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(6)
        u = rand_embeddings(rng, 4, 7)
        v = rand_embeddings(rng, 4, 7)
        g = gram_pair(u, v)
        want = oracles.align_loss_direct(
            [[float(x) for x in row] for row in g.s_img],
            [[float(x) for x in row] for row in g.s_txt],
        )
        assert float(align_loss(g)) == pytest.approx(want, abs=1e-12)

    def test_gram_matrices_are_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(7)
        g = gram_pair(rand_embeddings(rng, 5, 6), rand_embeddings(rng, 5, 6))
        for m in (g.s_img, g.s_txt):
            torch.testing.assert_close(m, m.T)
            torch.testing.assert_close(m.diagonal(), torch.ones(5, dtype=torch.float64))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            align_loss(GramPair(torch.eye(3), torch.eye(4)))


class TestDemographicLosses:
    def test_zero_logits_give_ln2(self):
        heads = DemographicHeads(6)  # zero-initialized weight vectors
        features = torch.randn(5, 6)
        sex = torch.tensor([0.0, 1.0, 1.0, 0.0, 1.0])
        age = torch.zeros(5)
        l_sex, _ = demographic_losses(features, heads, sex, age)
        assert float(l_sex.detach()) == pytest.approx(math.log(2.0), abs=1e-7)

    def test_perfect_age_regression_zero(self):
        heads = DemographicHeads(3)
        with torch.no_grad():
            heads.w_age.copy_(torch.tensor([1.0, 0.0, 0.0]))
        features = torch.tensor([[42.0, 1.0, 2.0], [65.0, 3.0, 4.0]])
        age = torch.tensor([42.0, 65.0])
        _, l_age = demographic_losses(features, heads, torch.zeros(2), age)
        assert float(l_age.detach()) == 0.0

    def test_matches_hand_rolled_oracle(self):
        rng = np.random.default_rng(8)
        heads = DemographicHeads(4).double()
        with torch.no_grad():
            heads.w_sex.copy_(torch.tensor(rng.normal(size=4)))
            heads.w_age.copy_(torch.tensor(rng.normal(size=4)))
        features = rand_embeddings(rng, 5, 4)
        sex = torch.tensor(rng.integers(0, 2, size=5).astype(np.float64))
        age = torch.tensor(rng.uniform(40, 80, size=5))
        l_sex, l_age = demographic_losses(features, heads, sex, age)
        logits = (features @ heads.w_sex).detach().tolist()
        preds = (features @ heads.w_age).detach().tolist()
        assert float(l_sex.detach()) == pytest.approx(
            oracles.bce_direct(logits, sex.tolist()), abs=1e-10
        )
        assert float(l_age.detach()) == pytest.approx(
            oracles.mse_direct(preds, age.tolist()), abs=1e-10
        )

    def test_empty_batch_rejected(self):
        heads = DemographicHeads(3)
        with pytest.raises(ValueError, match="empty"):
            demographic_losses(torch.zeros(0, 3), heads, torch.zeros(0), torch.zeros(0))


class TestTotalLoss:
    def test_paper_weight_arithmetic(self):
        w = LossWeights(variant="demographic")  # align 1, age 1, sex 0.1
        parts = [torch.tensor(x, dtype=torch.float64) for x in (0.5, 0.2, 0.3, 0.4)]
        got = total_loss(*parts, w)
        assert float(got) == pytest.approx(1.13, abs=1e-12)

    def test_zero_align_weight_returns_clip(self):
        w = LossWeights(lambda_align=0.0, variant="base")
        got = total_loss(
            torch.tensor(0.7, dtype=torch.float64),
            torch.tensor(99.0, dtype=torch.float64),
            None,
            None,
            w,
        )
        assert float(got) == 0.7

    def test_base_variant_forces_demographic_weights_to_zero(self):
        w = LossWeights(variant="base")
        assert w.lambda_age == 0.0 and w.lambda_sex == 0.0
        got = total_loss(torch.tensor(1.0), torch.tensor(1.0), None, None, w)
        assert float(got) == 2.0

    def test_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            c, al, sx, ag = (torch.tensor(x, dtype=torch.float64) for x in rng.uniform(0, 2, size=4))
            lam_al, lam_ag, lam_sx = rng.uniform(0, 2, size=3)
            w = LossWeights(
                lambda_align=lam_al, lambda_age=lam_ag, lambda_sex=lam_sx,
                variant="demographic",
            )
            got = total_loss(c, al, sx, ag, w)
            want = oracles.weighted_sum(
                float(c), float(al), float(sx), float(ag), lam_al, lam_ag, lam_sx
            )
            assert float(got) == pytest.approx(want, abs=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_align=-0.1)

    def test_missing_component_rejected(self):
        w = LossWeights(variant="demographic")
        with pytest.raises(ValueError):
            total_loss(torch.tensor(1.0), torch.tensor(1.0), None, None, w)


def objective(u, v, features, w_sex, w_age, log_tau, sex, age, weights):
    """Full training objective as a pure function of its tensors."""
    sim = similarity_matrix(u, v, temperature=log_tau.exp())
    l_clip = clip_loss(sim)
    l_align = align_loss(gram_pair(u, v))
    l_sex = torch.nn.functional.binary_cross_entropy_with_logits(features @ w_sex, sex)
    l_age = torch.nn.functional.mse_loss(features @ w_age, age)
    return total_loss(l_clip, l_align, l_sex, l_age, weights)


class TestGradients:
    def finite_difference_check(self, seed, n=4, d=5, f=3, h=1e-5):
        rng = np.random.default_rng(seed)
        tensors = {
            "u": rand_embeddings(rng, n, d).requires_grad_(True),
            "v": rand_embeddings(rng, n, d).requires_grad_(True),
            "features": rand_embeddings(rng, n, f).requires_grad_(True),
            "w_sex": torch.tensor(rng.normal(size=f), requires_grad=True),
            "w_age": torch.tensor(rng.normal(size=f), requires_grad=True),
            "log_tau": torch.tensor(
                rng.uniform(-2.0, 0.0), dtype=torch.float64, requires_grad=True
            ),
        }
        sex = torch.tensor(rng.integers(0, 2, size=n).astype(np.float64))
        age = torch.tensor(rng.uniform(-1, 1, size=n))
        weights = LossWeights(
            lambda_align=1.0, lambda_age=1.0, lambda_sex=0.1, variant="demographic"
        )

        loss = objective(**tensors, sex=sex, age=age, weights=weights)
        loss.backward()

        worst = 0.0
        for name, t in tensors.items():
            grad = t.grad
            flat = t.detach().clone().reshape(-1)
            num = torch.zeros_like(flat)
            for k in range(flat.numel()):
                plus = flat.clone()
                plus[k] += h
                minus = flat.clone()
                minus[k] -= h
                args = {m: tensors[m].detach() for m in tensors}
                args[name] = plus.reshape(t.shape)
                f_plus = float(objective(**args, sex=sex, age=age, weights=weights))
                args[name] = minus.reshape(t.shape)
                f_minus = float(objective(**args, sex=sex, age=age, weights=weights))
                num[k] = (f_plus - f_minus) / (2 * h)
            num = num.reshape(t.shape)
            denom = torch.maximum(grad.abs(), torch.full_like(grad, 1e-8))
            rel = float(((grad - num).abs() / denom).max())
            worst = max(worst, rel)
        return worst

    def test_analytic_matches_finite_differences(self):
        for seed in range(3):
            assert self.finite_difference_check(seed) < 1e-4


class TestSchedule:
    CFG = TrainConfig(peak_lr=3e-5, total_steps=1000, warmup_steps=200, batch_size=4)

    def test_ramp_start_is_zero(self):
        assert lr_at_step(0, self.CFG) == 0.0

    def test_peak_at_warmup_end(self):
        assert lr_at_step(200, self.CFG) == pytest.approx(3e-5)

    def test_half_peak_at_mid_decay(self):
        assert lr_at_step(600, self.CFG) == pytest.approx(1.5e-5, abs=1e-20)

    def test_zero_at_end(self):
        assert lr_at_step(1000, self.CFG) == pytest.approx(0.0, abs=1e-20)

    def test_linear_during_warmup(self):
        assert lr_at_step(50, self.CFG) == pytest.approx(3e-5 * 0.25)

    def test_closed_form_cosine(self):
        for step in (200, 300, 777, 1000):
            progress = (step - 200) / 800
            want = 3e-5 * 0.5 * (1 + math.cos(math.pi * progress))
            assert lr_at_step(step, self.CFG) == pytest.approx(want, abs=1e-20)

    def test_monotone_decay_after_warmup(self):
        lrs = [lr_at_step(s, self.CFG) for s in range(200, 1001)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            lr_at_step(-1, self.CFG)
        with pytest.raises(ValueError):
            lr_at_step(1001, self.CFG)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(total_steps=100, warmup_steps=100)
        with pytest.raises(ValueError):
            TrainConfig(ema_decay=1.5)


class TestEma:
    def test_decay_one_keeps_ema(self):
        e = [torch.ones(3)]
        ema_update(e, [torch.zeros(3)], decay=1.0)
        torch.testing.assert_close(e[0], torch.ones(3))

    def test_decay_zero_copies_params(self):
        e = [torch.ones(3)]
        ema_update(e, [torch.full((3,), 5.0)], decay=0.0)
        torch.testing.assert_close(e[0], torch.full((3,), 5.0))

    def test_paper_decay_value(self):
        e = [torch.tensor([1.0])]
        ema_update(e, [torch.tensor([0.0])], decay=0.995)
        assert float(e[0]) == pytest.approx(0.995)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ema_update([torch.ones(3)], [torch.ones(4)], decay=0.5)

    def test_tracker_follows_module(self):
        lin = torch.nn.Linear(2, 2, bias=False)
        tracker = EmaTracker(lin, decay=0.5)
        before = tracker.shadow["weight"].clone()
        with torch.no_grad():
            lin.weight.add_(1.0)
        tracker.update(lin)
        torch.testing.assert_close(tracker.shadow["weight"], before * 0.5 + (before + 1) * 0.5)


def tiny_setup(seed=0, n=8):
    vision = VisionEncoderConfig(
        image_side=16, patch_side=8, depth=1, heads=2, width=16, tap_layers=(1,)
    )
    text = TextEncoderConfig(vocab_size=32, depth=1, max_tokens=8, width=16, heads=2)
    model = build_dual_encoder(vision, text, embed_dim=8, seed=seed)
    g = torch.Generator().manual_seed(seed)
    images = torch.randn(n, 3, 16, 16, generator=g)
    tokens = torch.randint(3, 32, (n, 8), generator=g)
    tokens[:, 0] = 0
    tokens[:, -1] = 1
    return model, TrainBatch(images=images, tokens=tokens)


class TestTrainStep:
    def test_loss_record_stream_is_deterministic(self):
        records = []
        for _ in range(2):
            model, batch = tiny_setup(seed=3)
            cfg = TrainConfig(total_steps=10, warmup_steps=2, batch_size=8, seed=3)
            state = init_train_state(model, cfg, LossWeights(variant="base"))
            stream = []
            for _ in range(5):
                _, rec = train_step(batch, state)
                stream.append(rec)
            records.append(stream)
        assert records[0] == records[1]

    def test_all_parameters_update(self):
        model, batch = tiny_setup(seed=1)
        cfg = TrainConfig(
            peak_lr=1e-2, total_steps=10, warmup_steps=1, batch_size=8, seed=1
        )
        state = init_train_state(model, cfg, LossWeights(variant="base"))
        before = model.log_tau.item()
        for _ in range(3):
            train_step(batch, state)
        assert model.log_tau.item() != before  # temperature is trainable

    def test_non_finite_loss_aborts_with_record(self):
        model, batch = tiny_setup(seed=2)
        heads = DemographicHeads(16)
        batch.sex = torch.zeros(8)
        batch.age = torch.full((8,), float("nan"))
        cfg = TrainConfig(total_steps=10, warmup_steps=2, batch_size=8)
        state = init_train_state(
            model, cfg, LossWeights(variant="demographic"), heads=heads
        )
        with pytest.raises(NonFiniteLossError) as err:
            train_step(batch, state)
        assert math.isnan(err.value.record.total)
        assert err.value.record.step == 0

    def test_demographic_variant_requires_fields(self):
        model, batch = tiny_setup(seed=4)
        cfg = TrainConfig(total_steps=10, warmup_steps=2, batch_size=8)
        state = init_train_state(
            model, cfg, LossWeights(variant="demographic"), heads=DemographicHeads(16)
        )
        with pytest.raises(ValueError, match="sex and age"):
            train_step(batch, state)

    def test_loss_trends_down_on_fixed_batch(self):
        model, batch = tiny_setup(seed=5)
        cfg = TrainConfig(
            peak_lr=3e-3, total_steps=100, warmup_steps=5, batch_size=8, seed=5
        )
        state = init_train_state(model, cfg, LossWeights(variant="base"))
        first = last = None
        for _ in range(60):
            _, rec = train_step(batch, state)
            first = first if first is not None else rec.total
            last = rec.total
        assert last < first


class TestTrainLoop:
    def _manifest(self, tmp_path, n=6, with_demo=True):
        from PIL import Image as PILImage

        from retinavl.data import (
            ClinicalReport,
            DatasetManifest,
            Eye,
            ImageReportPair,
            LabelSchema,
            Laterality,
            Sex,
        )

        rng = np.random.default_rng(0)
        records = []
        for i in range(n):
            p = tmp_path / f"img{i}.png"
            PILImage.fromarray(
                (rng.random((16, 16, 3)) * 255).astype(np.uint8)
            ).save(p)
            records.append(
                ImageReportPair(
                    image_id=f"r{i}",
                    image_path=str(p),
                    eye=Eye.OD,
                    report=ClinicalReport(
                        history="",
                        findings=f"lesion type {i} present.",
                        impression=f"diagnosis {i}.",
                        laterality=Laterality.OD,
                    ),
                    age=(50.0 + i) if with_demo else None,
                    sex=Sex(i % 2) if with_demo else None,
                )
            )
        return DatasetManifest(
            records=tuple(records),
            schema=LabelSchema(classes=(), mode="multi_label"),
            split="train",
        )

    def _run(self, manifest, tmp_path, variant="base", seed=0):
        from retinavl.encoders import build_vocab

        tok = build_vocab([r.report.text for r in manifest.records], n_merges=10)
        vision = VisionEncoderConfig(
            image_side=16, patch_side=8, depth=1, heads=2, width=16, tap_layers=(1,)
        )
        text = TextEncoderConfig(
            vocab_size=len(tok), depth=1, max_tokens=8, width=16, heads=2
        )
        out = tmp_path / f"run-{variant}-{seed}-{np.random.default_rng().integers(1e9)}"
        paths = train_loop(
            manifest,
            TrainConfig(total_steps=4, warmup_steps=1, batch_size=4, seed=seed),
            LossWeights(variant=variant),
            tokenizer=tok,
            vision_cfg=vision,
            text_cfg=text,
            embed_dim=8,
            out_dir=out,
            checkpoint_every=2,
        )
        return paths, out

    def test_emits_raw_and_ema_checkpoints_and_log(self, tmp_path):
        manifest = self._manifest(tmp_path)
        paths, out = self._run(manifest, tmp_path)
        names = [p.split("/")[-1] for p in paths]
        assert "step000002.pt" in names and "step000002-ema.pt" in names
        assert "step000004.pt" in names and "step000004-ema.pt" in names
        log = (out / "loss_log.jsonl").read_text().splitlines()
        assert len(log) == 4
        import json

        rec = json.loads(log[0])
        assert {"step", "lr", "tau", "l_clip", "l_align", "total"} <= set(rec)

    def test_identical_seed_identical_logs(self, tmp_path):
        manifest = self._manifest(tmp_path)
        _, out1 = self._run(manifest, tmp_path, seed=9)
        _, out2 = self._run(manifest, tmp_path, seed=9)
        assert (out1 / "loss_log.jsonl").read_text() == (out2 / "loss_log.jsonl").read_text()

    def test_demographic_without_fields_is_config_error(self, tmp_path):
        manifest = self._manifest(tmp_path, with_demo=False)
        with pytest.raises(ValueError, match="sex and age"):
            self._run(manifest, tmp_path, variant="demographic")

    def test_demographic_variant_logs_all_components(self, tmp_path):
        import json

        manifest = self._manifest(tmp_path, with_demo=True)
        _, out = self._run(manifest, tmp_path, variant="demographic")
        rec = json.loads((out / "loss_log.jsonl").read_text().splitlines()[0])
        assert rec["l_sex"] is not None and rec["l_age"] is not None
