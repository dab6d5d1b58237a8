from types import SimpleNamespace

import numpy as np
import pytest

from deps import autograd as ag
from deps.autograd import Tensor
from deps.optim import ParameterStore
from deps.propensity import (
    GruCell,
    PropensityError,
    PropensityEstimator,
    clip,
    frequency_propensity,
    gru_step,
)
from deps.interactions import build_sequence_index

from helpers import central_difference, make_log, relative_error


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_gru_step(cell, x, h):
    d = cell.dim
    W, U, b = cell.w_input.data, cell.w_hidden.data, cell.bias.data
    z = np_sigmoid(x @ W[:, :d] + h @ U[:, :d] + b[:d])
    r = np_sigmoid(x @ W[:, d : 2 * d] + h @ U[:, d : 2 * d] + b[d : 2 * d])
    n = np.tanh(x @ W[:, 2 * d :] + b[2 * d :] + r * (h @ U[:, 2 * d :]))
    return (1 - z) * n + z * h


def np_ar_loss(cell, table, sequences):
    total = 0.0
    for seq in sequences:
        h = np.zeros(cell.dim)
        for x in seq:
            logits = table @ h
            logits = logits - logits.max()
            total -= logits[x] - np.log(np.exp(logits).sum())
            h = np_gru_step(cell, table[x], h)
    return total


def make_estimator(n_users=7, n_items=9, dim=4, seed=0, clip_value=0.05, scale=1.0):
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    emb = SimpleNamespace(
        item=store.add("theta_e", "item", rng.normal(0, scale, size=(n_items, dim))),
        user=store.add("theta_e", "user", rng.normal(0, scale, size=(n_users, dim))),
    )
    return PropensityEstimator(store, emb, dim, clip_value, seed=seed)


class TestGru:
    def test_step_matches_numpy_oracle(self):
        est = make_estimator()
        rng = np.random.default_rng(1)
        x, h = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        y, state = gru_step(est.gru_item, x, h)
        np.testing.assert_allclose(y.data, np_gru_step(est.gru_item, x, h), atol=1e-14)
        assert y is state

    def test_unbatched_step(self):
        est = make_estimator()
        x, h = np.ones(4), np.zeros(4)
        y, _ = gru_step(est.gru_user, x, h)
        assert y.shape == (4,)
        np.testing.assert_allclose(y.data, np_gru_step(est.gru_user, x[None], h[None])[0], atol=1e-14)

    def test_width_mismatch(self):
        est = make_estimator()
        with pytest.raises(ag.ShapeError):
            gru_step(est.gru_item, np.ones(3), np.ones(4))

    def test_run_is_repeated_step(self):
        est = make_estimator()
        x = np.random.default_rng(2).normal(size=(2, 5, 4))
        outs = est.gru_item.run(Tensor(x))
        h = np.zeros((2, 4))
        for k in range(5):
            h = np_gru_step(est.gru_item, x[:, k], h)
            np.testing.assert_allclose(outs[k].data, h, atol=1e-13)

    def test_parameters_live_in_theta_p(self):
        est = make_estimator()
        names = [n for n, _ in est.store.named(["theta_p"])]
        assert len(names) == 6 and all(n.startswith("theta_p/gru_") for n in names)


class TestScores:
    def test_distribution_normalised_and_clipped(self):
        est = make_estimator(scale=2.0)
        rng = np.random.default_rng(3)
        hists = [rng.integers(0, 9, size=rng.integers(0, 6)) for _ in range(20)]
        probs = est.next_distribution("item", hists)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        targets = rng.integers(0, 9, size=20)
        p = est.propensities("item", targets, hists, 0.1)
        assert np.all((p >= 0.1) & (p <= 1.0))
        np.testing.assert_array_equal(p, np.maximum(probs[np.arange(20), targets], 0.1))

    def test_empty_history_uses_zero_state(self):
        est = make_estimator()
        probs = est.next_distribution("user", [np.array([], dtype=np.int64)])
        # zero state gives equal logits
        np.testing.assert_allclose(probs, np.full((1, 7), 1 / 7))

    def test_scores_ignore_batch_padding(self):
        est = make_estimator()
        short, long = np.array([2, 5]), np.array([1, 2, 3, 4, 0, 8])
        alone = est.next_distribution("item", [short])
        together = est.next_distribution("item", [long, short])
        np.testing.assert_allclose(together[1], alone[0], atol=1e-14)

    def test_single_lookups(self):
        est = make_estimator(clip_value=0.0)
        probs = est.next_distribution("item", [np.array([3, 4])])
        assert est.item_view_propensity(6, [3, 4]) == pytest.approx(probs[0, 6], abs=1e-15)
        probs = est.next_distribution("user", [np.array([1])])
        assert est.user_view_propensity(2, [1]) == pytest.approx(probs[0, 2], abs=1e-15)

    def test_contracts(self):
        est = make_estimator()
        with pytest.raises(IndexError):
            est.propensities("item", [9], [np.array([1])])
        with pytest.raises(ValueError):
            est.next_distribution("session", [np.array([1])])
        with pytest.raises(PropensityError):
            make_estimator(clip_value=1.0)

    def test_clip_is_max(self):
        np.testing.assert_array_equal(clip(np.array([0.01, 0.2, 0.05]), 0.05), [0.05, 0.2, 0.05])


class TestArLoss:
    def test_value_matches_loop_oracle(self):
        est = make_estimator()
        seqs = [np.array([1, 4, 4, 2]), np.array([0]), np.array([8, 3])]
        expected = np_ar_loss(est.gru_item, est.embeddings.item.data, seqs)
        assert est.ar_loss_item_view(seqs).item() == pytest.approx(expected, rel=1e-12)
        useqs = [np.array([6, 1, 0])]
        expected = np_ar_loss(est.gru_user, est.embeddings.user.data, useqs)
        assert est.ar_loss_user_view(useqs).item() == pytest.approx(expected, rel=1e-12)

    def test_empty_corpus(self):
        est = make_estimator()
        assert est.ar_loss("item", [np.array([], dtype=np.int64)]).item() == 0.0

    def test_gradients_reach_theta_p_only_by_default(self):
        est = make_estimator()
        seqs = [np.array([1, 4, 4, 2]), np.array([8, 3, 0])]
        loss = est.ar_loss("item", seqs)
        est.store.clear_grad()
        ag.backward(loss)
        assert est.embeddings.item.grad is None
        rng = np.random.default_rng(4)
        worst = 0.0
        for name, t in est.store.named(["theta_p"]):
            if not name.startswith("theta_p/gru_item"):
                continue
            for k in rng.choice(t.size, size=min(8, t.size), replace=False):
                num = central_difference(lambda: est.ar_loss("item", seqs).item(), t.data, int(k))
                worst = max(worst, relative_error(float(t.grad.reshape(-1)[k]), num))
        assert worst < 1e-4

    def test_embeddings_train_when_asked(self):
        est = make_estimator()
        seqs = [np.array([1, 4, 2])]
        ag.backward(est.ar_loss("item", seqs, train_embeddings=True))
        table = est.embeddings.item
        num = central_difference(lambda: est.ar_loss("item", seqs).item(), table.data, 4 * 4 + 1)
        assert relative_error(float(table.grad.reshape(-1)[17]), num) < 1e-4


class TestFrequency:
    def test_values(self):
        log = make_log([(0, 0, 0, 1), (1, 0, 1, 1), (1, 1, 2, 1), (2, 2, 3, 0)])
        freq = frequency_propensity(build_sequence_index(log))
        np.testing.assert_allclose(freq.p_item, [1.0, 0.5, 0.0])
        np.testing.assert_allclose(freq.p_user, [0.5, 1.0, 0.0])

    def test_needs_clicks(self):
        log = make_log([(0, 0, 0, 0)])
        with pytest.raises(PropensityError):
            frequency_propensity(build_sequence_index(log))
