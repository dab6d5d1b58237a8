import math

import numpy as np
import pytest

from deps.simulator import (
    ExposureParams,
    SyntheticWorld,
    WorldError,
    clip_tradeoff,
    expected_bce,
    generate_world,
    ideal_loss,
    ideal_loss_oracle,
    recompute_exposure,
    simulate_log,
    unbiasedness_check,
)


@pytest.fixture(scope="module")
def small():
    world = generate_world(seed=3, n_users=15, n_items=12)
    return world, simulate_log(world, horizon=300)


def omega_oracle(params: ExposureParams, pop, last, t):
    """Exposure without the affinity term, written directly from the definition."""
    s = [(1 + p) ** params.pop_exponent * (1 + t - l) ** (-params.recency_exponent) for p, l in zip(pop, last)]
    total = sum(s)
    return np.array([min(1.0, params.kappa * x / total) for x in s])


class TestWorld:
    def test_reproducible(self):
        a, b = generate_world(seed=5), generate_world(seed=5)
        np.testing.assert_array_equal(a.user_vecs, b.user_vecs)
        np.testing.assert_array_equal(a.activity, b.activity)
        assert not np.array_equal(a.item_vecs, generate_world(seed=6).item_vecs)

    def test_zero_latent_scale_gives_coin_flip_relevance(self):
        world = generate_world(seed=0, n_users=4, n_items=5, relevance_scale=0.0)
        np.testing.assert_array_equal(world.relevance(), 0.5)

    def test_probabilities_in_range(self, small):
        world, sim = small
        rho = world.relevance()
        assert np.all((rho > 0) & (rho < 1))
        assert np.all((sim.exposure > 0) & (sim.exposure <= 1))

    @pytest.mark.parametrize(
        "kw",
        [
            {"n_users": 1},
            {"n_items": 1},
            {"d_w": 0},
            {"relevance_scale": float("nan")},
            {"activity_skew": -1.0},
            {"exposure": ExposureParams(kappa=0.0)},
            {"exposure": ExposureParams(affinity_window=0)},
        ],
    )
    def test_degenerate_parameters(self, kw):
        with pytest.raises(WorldError):
            generate_world(**kw)

    def test_exposure_formula_without_affinity(self):
        params = ExposureParams(pop_exponent=0.8, recency_exponent=0.4, affinity=0.0, kappa=2.0)
        world = generate_world(seed=1, n_users=3, n_items=6, exposure=params)
        pop = np.array([0, 3, 1, 7, 0, 2], dtype=float)
        last = np.array([-1, 4, 2, 9, -1, 0], dtype=float)
        got = world.exposure_probs(0, 10, pop, last, [1, 3])
        np.testing.assert_allclose(got, omega_oracle(params, pop, last, 10), rtol=1e-12)

    def test_exposure_marginals_follow_popularity_skew(self):
        params = ExposureParams(pop_exponent=1.0, recency_exponent=0.0, affinity=0.0, kappa=1.5)
        world = generate_world(seed=2, n_users=3, n_items=8, exposure=params)
        pop = np.array([0, 1, 3, 7, 15, 0, 2, 5], dtype=float)
        omega = world.exposure_probs(0, 50, pop, np.full(8, -1.0), [])
        rng = np.random.default_rng(0)
        draws = rng.random((40_000, 8)) < omega
        np.testing.assert_allclose(draws.mean(axis=0), omega, atol=4 * np.sqrt(0.25 / 40_000))
        # shown-rate ratios follow (1 + pop)^a when nothing saturates
        assert np.all(omega < 1)
        np.testing.assert_allclose(omega / omega[0], (1 + pop) / (1 + pop[0]), rtol=1e-12)


class TestSimulation:
    def test_reproducible(self):
        world = generate_world(seed=4, n_users=10, n_items=10)
        a, b = simulate_log(world, 200), simulate_log(world, 200)
        assert list(a.log.records()) == list(b.log.records())
        np.testing.assert_array_equal(a.omega, b.omega)

    def test_click_factorization(self, small):
        _, sim = small
        assert np.all(sim.o == 1)
        np.testing.assert_array_equal(sim.log.clicks, sim.r * sim.o)
        # every record carries the exposure probability of its visit
        np.testing.assert_array_equal(sim.omega, sim.exposure[sim.log.times, sim.log.items])

    def test_causality_audit(self, small):
        world, sim = small
        np.testing.assert_array_equal(recompute_exposure(world, sim), sim.exposure)

    def test_full_exposure_click_rate_is_mean_relevance(self):
        world = generate_world(seed=7, n_users=10, n_items=10, exposure=ExposureParams(kappa=1e9))
        sim = simulate_log(world, 3000)
        assert len(sim.log) == 3000 * 10
        expected = world.relevance()[sim.access_users].mean()
        se = np.sqrt(0.25 / len(sim.log))
        assert abs(sim.log.clicks.mean() - expected) < 4 * se

    def test_zero_relevance_gives_no_clicks(self):
        world = generate_world(seed=0, n_users=5, n_items=5, relevance_bias=-1e6)
        sim = simulate_log(world, 300)
        assert len(sim.log) > 0 and sim.log.clicks.sum() == 0

    def test_horizon_contract(self):
        with pytest.raises(WorldError):
            simulate_log(generate_world(), 0)

    def test_hidden_file(self, small, tmp_path):
        _, sim = small
        sim.write(tmp_path / "log.tsv", tmp_path / "hidden.tsv")
        lines = (tmp_path / "hidden.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["user", "item", "timestamp", "click", "r", "o", "omega"]
        assert len(lines) == len(sim.log) + 1
        first = lines[1].split("\t")
        assert float(first[6]) == sim.omega[0]
        assert len((tmp_path / "log.tsv").read_text().splitlines()[0].split("\t")) == 4


def hand_world():
    """3 users, 4 items, d_w = 1, so rho = sigmoid(a_u * b_i)."""
    return SyntheticWorld(
        seed=0,
        user_vecs=np.array([[1.0], [-0.5], [0.0]]),
        item_vecs=np.array([[0.2], [-1.0], [2.0], [0.0]]),
        activity=np.full(3, 1 / 3),
        relevance_scale=1.0,
        relevance_bias=0.0,
        exposure=ExposureParams(),
    )


class TestOracles:
    def test_ideal_loss_at_truth_is_entropy(self):
        rho = np.array([[0.2, 0.5, 0.9]])
        entropy = -sum(p * math.log(p) + (1 - p) * math.log(1 - p) for p in rho[0])
        assert ideal_loss(rho, rho) == pytest.approx(entropy, rel=1e-12)

    def test_ideal_loss_hand_trace(self):
        world = hand_world()
        sim = simulate_log(world, horizon=6)
        r_hat = np.array([[0.5, 0.25, 0.75, 0.1]] * 3)
        events = [0, 2, 5]
        total = 0.0
        for k, e in enumerate(events):
            a = world.user_vecs[sim.access_users[e], 0]
            for i, b in enumerate(world.item_vecs[:, 0]):
                rho = 1 / (1 + math.exp(-a * b))
                total += -(rho * math.log(r_hat[k, i]) + (1 - rho) * math.log(1 - r_hat[k, i]))
        value = ideal_loss_oracle(world, sim, r_hat, events)
        assert value == pytest.approx(total, rel=1e-12)
        assert value == ideal_loss_oracle(world, sim, r_hat, events)

    def test_scale_guard(self):
        with pytest.raises(WorldError, match="sampled"):
            ideal_loss(np.full((1, 201), 0.5), np.full((1, 201), 0.5))

    def test_expected_bce(self):
        np.testing.assert_allclose(expected_bce(np.array([1.0, 0.0]), np.array([0.5, 0.5])), [math.log(2)] * 2)


class TestUnbiasedness:
    def setup_method(self):
        self.world = generate_world(seed=3, n_users=15, n_items=12)
        self.sim = simulate_log(self.world, 300)
        self.events = np.arange(0, 300, 30)
        rng = np.random.default_rng(0)
        self.r_hat = rng.uniform(0.05, 0.95, size=(len(self.events), 12))

    def test_unclipped_estimate_is_unbiased(self):
        for alpha in (0.0, 0.5, 1.0):
            rep = unbiasedness_check(self.world, self.sim, self.r_hat, self.events, 0.0, alpha, 4000, seed=1)
            assert abs(rep.relative_bias) < 0.02 and rep.ci_contains_zero
            assert rep.cells == 120 and rep.replications == 4000

    def test_full_clip_is_the_naive_loss(self):
        rep = unbiasedness_check(self.world, self.sim, self.r_hat, self.events, 1.0, 0.5, 4000, seed=2)
        omega = self.sim.exposure[self.events]
        rho = self.world.relevance()[self.sim.access_users[self.events]]
        naive = math.fsum((omega * expected_bce(rho, self.r_hat)).ravel())
        assert abs(rep.mean_estimate - naive) <= rep.ci_half_width * rep.ideal_loss * 1.5
        assert rep.mean_estimate < rep.ideal_loss

    def test_variance_bound(self):
        rep = unbiasedness_check(self.world, self.sim, self.r_hat, self.events, 0.1, 0.5, 2000, seed=3)
        assert rep.bound_violations == 0 and rep.max_violation_of_single_view == 0
        assert rep.max_variance_ratio <= 1.0
        assert rep.mc_variance_rel_error < 0.1

    def test_replication_floor(self):
        with pytest.raises(WorldError):
            unbiasedness_check(self.world, self.sim, self.r_hat, self.events, 0.0, 0.5, 999)

    def test_report_json(self):
        rep = unbiasedness_check(self.world, self.sim, self.r_hat, self.events, 0.0, 0.5, 1000)
        assert '"relative_bias"' in rep.to_json()

    def test_clip_tradeoff_is_monotone(self):
        clips = [0.01, 0.02, 0.05, 0.1, 0.2]
        trade = clip_tradeoff(self.world, self.sim, self.r_hat, self.events, clips, 2000)
        assert all(b1 <= b2 for b1, b2 in zip(trade.bias, trade.bias[1:]))
        assert all(v1 >= v2 for v1, v2 in zip(trade.variance, trade.variance[1:]))
        with pytest.raises(WorldError):
            clip_tradeoff(self.world, self.sim, self.r_hat, self.events, [0.2, 0.1])
