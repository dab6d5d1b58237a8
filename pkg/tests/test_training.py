import math

import numpy as np
import pytest

from deps import autograd as ag
from deps import pipeline as pl
from deps.evaluation import evaluate
from deps.training import (
    BCE_EPS,
    EpochRecord,
    InvariantViolation,
    LossConfig,
    TrainingDivergedError,
    TrainingRun,
    Validation,
    _check,
    bce,
    bce_from_logits,
    ips_weights,
    sample_propensities,
    stage1_train,
    stage2_train,
    unbiased_loss,
    unbiased_loss_value,
)


class TestLosses:
    def test_bce_values(self):
        assert bce(1, 0.5) == pytest.approx(math.log(2))
        assert bce(0, 0.25) == pytest.approx(-math.log(0.75))
        assert bce(1, 0.0) == pytest.approx(-math.log(BCE_EPS))
        assert bce(0, 1.0) == pytest.approx(-math.log(BCE_EPS), rel=1e-4)
        np.testing.assert_allclose(bce(np.array([1, 0]), np.array([0.9, 0.9])), [-math.log(0.9), -math.log(0.1)])

    def test_logit_form_matches_probability_form(self):
        z = np.linspace(-8, 8, 33)
        c = (np.arange(33) % 2).astype(float)
        r = 1 / (1 + np.exp(-z))
        np.testing.assert_allclose(bce_from_logits(c, ag.Tensor(z)).data, bce(c, r), rtol=1e-10)

    def test_weights_per_mode(self):
        p_i, p_u = np.array([0.1, 0.5]), np.array([0.2, 0.25])
        np.testing.assert_allclose(ips_weights(LossConfig(alpha=0.3, clip=0.05), p_i, p_u), 0.3 / p_i + 0.7 / p_u)
        np.testing.assert_allclose(ips_weights(LossConfig(ips_mode="item_only"), p_i, p_u), 1 / p_i)
        np.testing.assert_allclose(ips_weights(LossConfig(ips_mode="user_only"), p_i, p_u), 1 / p_u)
        np.testing.assert_array_equal(ips_weights(LossConfig(ips_mode="none"), p_i, p_u), [1.0, 1.0])

    def test_unclipped_propensity_is_rejected(self):
        with pytest.raises(InvariantViolation):
            ips_weights(LossConfig(clip=0.1), np.array([0.05]), np.array([0.5]))

    def test_full_clip_gives_naive_loss(self):
        cfg = LossConfig(clip=0.999999)
        c = np.array([1, 0, 1])
        r = np.array([0.7, 0.2, 0.4])
        p = np.full(3, 0.999999)
        assert unbiased_loss_value(cfg, c, r, p, p) == pytest.approx(math.fsum(bce(c, r)), rel=1e-5)

    def test_tensor_and_numeric_forms_agree(self):
        cfg = LossConfig(alpha=0.6, clip=0.05)
        rng = np.random.default_rng(0)
        z = rng.normal(size=10)
        c = rng.integers(0, 2, 10)
        p_i, p_u = rng.uniform(0.05, 1, 10), rng.uniform(0.05, 1, 10)
        tensor = unbiased_loss(cfg, c, ag.Tensor(z), p_i, p_u).item()
        assert tensor == pytest.approx(unbiased_loss_value(cfg, c, 1 / (1 + np.exp(-z)), p_i, p_u), rel=1e-10)

    def test_weights_carry_no_gradient(self):
        cfg = LossConfig()
        z = ag.Tensor(np.array([0.3, -0.2]), requires_grad=True)
        ag.backward(unbiased_loss(cfg, np.array([1, 0]), z, np.array([0.5, 0.1]), np.array([0.25, 0.2])))
        w = 0.5 / np.array([0.5, 0.1]) + 0.5 / np.array([0.25, 0.2])
        sig = 1 / (1 + np.exp(-z.data))
        np.testing.assert_allclose(z.grad, w * (sig - np.array([1, 0])), rtol=1e-12)


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"alpha": 1.5}, {"clip": 1.0}, {"n_b": 0}, {"n_u": -1}, {"ips_mode": "triple"}, {"mask_prob": 0.0}, {"lr": 0}]
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)

    def test_check_flags_non_finite(self):
        with pytest.raises(TrainingDivergedError):
            _check(float("nan"), "loss", 2, 3)
        assert _check(1.5, "loss", 1, 0) == 1.5


class TestProcedure:
    def build(self, cfg, data):
        return pl.build_model(cfg, data)

    def test_sample_propensities_per_mode(self, tiny_config, tiny_dataset):
        model, est = self.build(tiny_config, tiny_dataset)
        td = tiny_dataset.training
        p_i, p_u = sample_propensities(est, td, LossConfig(clip=0.05))
        assert p_i.shape == (len(td),) and np.all(p_i >= 0.05) and np.all(p_u >= 0.05)
        f_i, f_u = sample_propensities(est, td, LossConfig(clip=0.05, ips_mode="frequency_dual"))
        np.testing.assert_array_equal(f_i, np.maximum(td.frequency.p_item[td.items], 0.05))
        np.testing.assert_array_equal(f_u, np.maximum(td.frequency.p_user[td.users], 0.05))
        n_i, n_u = sample_propensities(est, td, LossConfig(ips_mode="none"))
        assert np.all(n_i == 1) and np.all(n_u == 1)

    def test_stage1_touches_only_its_groups(self, tiny_config, tiny_dataset):
        model, est = self.build(tiny_config, tiny_dataset)
        before = model.store.snapshot()
        run = stage1_train(model, est, tiny_dataset.training, tiny_config.loss_config())
        after = model.store.snapshot()
        assert len(run.records) == tiny_config.n_p and all(r.stage == 1 for r in run.records)
        for name in before:
            moved = not np.array_equal(before[name], after[name])
            if name.startswith("theta_m/"):
                assert not moved
        assert model.store.step_count("theta_p") == tiny_config.n_p
        assert model.store.step_count("theta_e") == tiny_config.n_p

    def test_ar_loss_decreases(self, tiny_config, tiny_dataset):
        cfg = tiny_config.replace(n_p=15, lr=0.02)
        model, est = self.build(cfg, tiny_dataset)
        run = stage1_train(model, est, tiny_dataset.training, cfg.loss_config())
        assert run.records[-1].ar_u < run.records[0].ar_u
        assert run.records[-1].ar_i < run.records[0].ar_i

    def test_stage2_counts_and_best_epoch_restore(self, tiny_config, tiny_dataset):
        cfg = tiny_config.replace(n_u=4, n_b=2)
        model, est = self.build(cfg, tiny_dataset)
        validation = Validation(tiny_dataset.valid, tiny_dataset.full_index, cfg.policy)
        run = stage2_train(model, est, tiny_dataset.training, cfg.loss_config(), validation)
        assert [r.epoch for r in run.stage(2)] == [0, 1, 2, 3]
        assert model.store.step_count("theta_p") == 8
        best = max(r.valid_ndcg10 for r in run.records)
        assert run.records[run.best_epoch].valid_ndcg10 == best
        again = evaluate(model, tiny_dataset.valid, tiny_dataset.full_index, ks=(10,), policy=cfg.policy).ndcg[10]
        assert again == best

    def test_training_is_deterministic(self, tiny_config, tiny_dataset):
        runs = []
        for _ in range(2):
            model, _, run = pl.train(tiny_config, tiny_dataset)
            runs.append((run.to_jsonl(), model.store.checksum()))
        assert runs[0] == runs[1]

    def test_cached_stage1_equals_fresh_stage1(self, tiny_config, tiny_dataset):
        snap = pl.stage1_snapshot(tiny_config, tiny_dataset)
        a_model, _, a_run = pl.train(tiny_config, tiny_dataset)
        b_model, _, b_run = pl.train(tiny_config, tiny_dataset, snap)
        assert a_run.to_jsonl() == b_run.to_jsonl()
        assert a_model.store.checksum() == b_model.store.checksum()

    def test_run_log_round_trip(self, tmp_path):
        run = TrainingRun([EpochRecord(1, 0, 1.0, 2.0, 3.0, 4.0), EpochRecord(2, 0, 1.0, 2.0, unbiased=5.0)])
        run.write(tmp_path / "r.jsonl")
        assert TrainingRun.read(tmp_path / "r.jsonl").records == run.records
