"""Synthetic exposure-bias worlds with known relevance and exposure.

A world fixes latent user/item vectors, so relevance is
``rho(u, i) = sigmoid(scale * <a_u, b_i> + bias)``. Time advances in access
events: at step ``t`` one user (drawn from a skewed activity distribution)
visits and every item is shown independently with probability

    omega(u, i, t) = min(1, kappa * s_ui(t) / sum_j s_uj(t)),
    s_ui(t) = pop_i(t)^a * rec_i(t)^b * exp(affinity * sim_u(i, t)),

where ``pop_i`` is 1 + clicks on ``i`` before ``t``, ``rec_i`` is
1 / (1 + t - last click on ``i``) and ``sim_u`` is the cosine between ``b_i``
and the mean latent vector of the user's last few clicked items. Every input
is strictly in the past. A shown item is clicked iff an independent
relevance draw succeeds, so ``c = r * o`` holds record by record.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .interactions import InteractionLog, write_log
from .training import bce

MAX_EXACT_ITEMS = 200


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class ExposureParams:
    pop_exponent: float = 0.5
    recency_exponent: float = 0.3
    affinity: float = 1.0
    kappa: float = 1.0
    affinity_window: int = 5

    def validate(self) -> None:
        if self.kappa <= 0:
            raise WorldError(f"kappa must be positive, got {self.kappa}")
        if self.affinity_window < 1:
            raise WorldError("affinity_window must be >= 1")
        for name in ("pop_exponent", "recency_exponent", "affinity"):
            if not np.isfinite(getattr(self, name)):
                raise WorldError(f"{name} must be finite")


@dataclass
class SyntheticWorld:
    seed: int
    user_vecs: np.ndarray
    item_vecs: np.ndarray
    activity: np.ndarray
    relevance_scale: float
    relevance_bias: float
    exposure: ExposureParams

    @property
    def n_users(self) -> int:
        return len(self.user_vecs)

    @property
    def n_items(self) -> int:
        return len(self.item_vecs)

    def relevance(self) -> np.ndarray:
        """rho[u, i] = P(r = 1)."""
        z = self.relevance_scale * (self.user_vecs @ self.item_vecs.T) + self.relevance_bias
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def exposure_probs(self, u: int, t: int, pop: np.ndarray, last: np.ndarray, recent: list[int]) -> np.ndarray:
        """omega(u, ., t) from strictly-past state: click counts, last click times, u's recent clicks."""
        p = self.exposure
        log_s = p.pop_exponent * np.log1p(pop) - p.recency_exponent * np.log1p(t - last)
        if p.affinity and recent:
            centre = self.item_vecs[recent[-p.affinity_window :]].mean(axis=0)
            norm = np.linalg.norm(centre) * np.linalg.norm(self.item_vecs, axis=1)
            cos = (self.item_vecs @ centre) / np.where(norm > 0, norm, 1.0)
            log_s = log_s + p.affinity * cos
        log_s -= log_s.max()
        s = np.exp(log_s)
        return np.minimum(1.0, p.kappa * s / s.sum())

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "d_w": self.user_vecs.shape[1],
            "relevance_scale": self.relevance_scale,
            "relevance_bias": self.relevance_bias,
            "exposure": asdict(self.exposure),
        }


def generate_world(
    seed: int = 0,
    n_users: int = 100,
    n_items: int = 100,
    d_w: int = 4,
    exposure: ExposureParams | None = None,
    relevance_scale: float = 3.0,
    relevance_bias: float = 0.0,
    activity_skew: float = 1.0,
) -> SyntheticWorld:
    if n_users < 2 or n_items < 2 or d_w < 1:
        raise WorldError(f"need n_users, n_items >= 2 and d_w >= 1; got {n_users}, {n_items}, {d_w}")
    if not np.isfinite(relevance_scale) or not np.isfinite(relevance_bias):
        raise WorldError("relevance parameters must be finite")
    if activity_skew < 0:
        raise WorldError("activity_skew must be >= 0")
    exposure = exposure or ExposureParams()
    exposure.validate()
    rng = np.random.default_rng([seed, 0xD])
    user_vecs = rng.normal(size=(n_users, d_w)) / np.sqrt(d_w)
    item_vecs = rng.normal(size=(n_items, d_w)) / np.sqrt(d_w)
    weights = 1.0 / np.arange(1, n_users + 1) ** activity_skew
    activity = weights[rng.permutation(n_users)]
    return SyntheticWorld(
        seed, user_vecs, item_vecs, activity / activity.sum(), relevance_scale, relevance_bias, exposure
    )


@dataclass
class SimulatedLog:
    """A public log plus the hidden variables that produced it.

    ``r``, ``o``, ``omega`` align with ``log``'s canonical record order; only
    shown items become records, so ``o`` is all ones. ``access_*`` list every
    visit (including visits where nothing was shown) and ``exposure[e]`` holds
    omega over all items at visit ``e``.
    """

    log: InteractionLog
    r: np.ndarray
    o: np.ndarray
    omega: np.ndarray
    access_users: np.ndarray
    access_times: np.ndarray
    exposure: np.ndarray = field(repr=False)

    def write(self, public_path: str | Path, hidden_path: str | Path, metadata: dict | None = None) -> None:
        write_log(public_path, self.log, metadata)
        with open(hidden_path, "w", encoding="utf-8") as fh:
            fh.write("user\titem\ttimestamp\tclick\tr\to\tomega\n")
            for k, (u, i, t, c) in enumerate(self.log.records()):
                fh.write(f"{u}\t{i}\t{t}\t{c}\t{self.r[k]}\t{self.o[k]}\t{float(self.omega[k])!r}\n")


def simulate_log(world: SyntheticWorld, horizon: int = 5000, seed: int | None = None) -> SimulatedLog:
    if horizon < 1:
        raise WorldError(f"horizon must be >= 1, got {horizon}")
    rng = np.random.default_rng([world.seed if seed is None else seed, 0x51])
    rho = world.relevance()
    n_items = world.n_items
    pop = np.zeros(n_items)
    last = np.full(n_items, -1.0)
    recent: list[list[int]] = [[] for _ in range(world.n_users)]
    users = rng.choice(world.n_users, size=horizon, p=world.activity)
    exposure = np.empty((horizon, n_items))
    rec_u, rec_i, rec_t, rec_r, rec_w = [], [], [], [], []
    for t in range(horizon):
        u = int(users[t])
        omega = world.exposure_probs(u, t, pop, last, recent[u])
        exposure[t] = omega
        shown = np.flatnonzero(rng.random(n_items) < omega)
        relevant = rng.random(n_items) < rho[u]
        for i in shown.tolist():
            rec_u.append(u)
            rec_i.append(i)
            rec_t.append(t)
            rec_r.append(int(relevant[i]))
            rec_w.append(omega[i])
        # state changes only after the whole visit, so nothing at time t sees itself
        clicked = shown[relevant[shown]]
        pop[clicked] += 1
        last[clicked] = t
        recent[u].extend(clicked.tolist())
    r = np.array(rec_r, dtype=np.int64)
    log = InteractionLog(np.array(rec_u), np.array(rec_i), np.array(rec_t), r.copy(), world.n_users, n_items)
    # records were generated in (t, u, i) order already, so the canonical sort is the identity
    return SimulatedLog(log, r, np.ones_like(r), np.array(rec_w), users.astype(np.int64), np.arange(horizon), exposure)


def recompute_exposure(world: SyntheticWorld, sim: SimulatedLog) -> np.ndarray:
    """Rebuild omega at every visit from the public log alone (causality audit)."""
    log = sim.log
    clicks = log.clicked()
    pop = np.zeros(world.n_items)
    last = np.full(world.n_items, -1.0)
    recent: list[list[int]] = [[] for _ in range(world.n_users)]
    out = np.empty_like(sim.exposure)
    k = 0
    for e, (u, t) in enumerate(zip(sim.access_users.tolist(), sim.access_times.tolist())):
        while k < len(clicks) and clicks.times[k] < t:
            i = int(clicks.items[k])
            pop[i] += 1
            last[i] = clicks.times[k]
            recent[int(clicks.users[k])].append(i)
            k += 1
        out[e] = world.exposure_probs(u, t, pop, last, recent[u])
    return out


# ---------------------------------------------------------------- oracles


def expected_bce(rho: np.ndarray, r_hat: np.ndarray) -> np.ndarray:
    """E_{r ~ Bernoulli(rho)} delta(r, r_hat), elementwise."""
    return rho * bce(1, r_hat) + (1.0 - rho) * bce(0, r_hat)


def ideal_loss(rho: np.ndarray, r_hat: np.ndarray) -> float:
    """Sum over visits and all items of the expected cross-entropy."""
    if rho.shape[-1] > MAX_EXACT_ITEMS:
        raise WorldError(
            f"exact ideal loss sums over {rho.shape[-1]} items (> {MAX_EXACT_ITEMS}); use a sampled estimate instead"
        )
    return math.fsum(expected_bce(rho, r_hat).ravel())


def model_predictions(model, sim: SimulatedLog, events: np.ndarray, index=None) -> np.ndarray:
    """r_hat[e, i] at the selected visits, with histories strictly before each visit."""
    from .evaluation import EncodingCache, score_candidates
    from .interactions import build_sequence_index

    index = index if index is not None else build_sequence_index(sim.log)
    cache = EncodingCache(model, index)
    items = np.arange(sim.exposure.shape[1])
    return np.stack(
        [score_candidates(model, cache, int(sim.access_users[e]), int(sim.access_times[e]), items) for e in events]
    )


def ideal_loss_oracle(world: SyntheticWorld, sim: SimulatedLog, r_hat: np.ndarray, events) -> float:
    events = np.asarray(events, dtype=np.int64)
    return ideal_loss(world.relevance()[sim.access_users[events]], r_hat)


@dataclass
class OracleReport:
    clip: float
    alpha: float
    replications: int
    cells: int
    ideal_loss: float
    mean_estimate: float
    relative_bias: float
    ci_half_width: float
    ci_contains_zero: bool
    bound_violations: int
    max_violation_of_single_view: int
    max_variance_ratio: float
    mc_variance_rel_error: float
    mean_sample_variance: float
    mean_bound: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def passed(self, tolerance: float = 0.02) -> bool:
        return abs(self.relative_bias) < tolerance and self.bound_violations == 0 and self.max_violation_of_single_view == 0


def _replicate(omega, rho, delta1, delta0, weights, replications, rng, chunk=200):
    """Per-replication totals and per-cell first/second moments of o * delta / P~."""
    cells = omega.size
    omega, rho = omega.ravel(), rho.ravel()
    delta1, delta0 = delta1.ravel(), delta0.ravel()
    totals = []
    s1 = np.zeros((len(weights), cells))
    s2 = np.zeros((len(weights), cells))
    done = 0
    while done < replications:
        n = min(chunk, replications - done)
        o = rng.random((n, cells)) < omega
        r = rng.random((n, cells)) < rho
        delta = np.where(r, delta1, delta0) * o
        for k, w in enumerate(weights):
            x = delta * w
            s1[k] += x.sum(axis=0)
            s2[k] += (x * x).sum(axis=0)
            if k == 0:
                totals.extend(x.sum(axis=1).tolist())
        done += n
    return np.array(totals), s1, s2


def unbiasedness_check(
    world: SyntheticWorld,
    sim: SimulatedLog,
    r_hat: np.ndarray,
    events,
    clip: float = 0.0,
    alpha: float = 0.5,
    replications: int = 10_000,
    seed: int = 0,
) -> OracleReport:
    """Monte Carlo of the IPS loss over exposure (and relevance) redraws at fixed visits.

    The true exposure probability of a visit is the propensity of both views,
    so each cell's weight is ``alpha / P~ + (1 - alpha) / P~`` with
    ``P~ = max(omega, clip)``. The variance bound is checked on the exact
    per-cell variance ``delta^2 omega (1 - omega) / P~^2`` for the drawn ``r``;
    the Monte Carlo variance is reported next to it.
    """
    if replications < 1000:
        raise WorldError("at least 1000 replications are required")
    if not 0.0 <= clip <= 1.0 or not 0.0 <= alpha <= 1.0:
        raise WorldError("clip and alpha must lie in [0, 1]")
    events = np.asarray(events, dtype=np.int64)
    omega = sim.exposure[events]
    rho = world.relevance()[sim.access_users[events]]
    p_item = np.maximum(omega, clip)
    p_user = np.maximum(omega, clip)
    w = alpha / p_item + (1.0 - alpha) / p_user
    rng = np.random.default_rng([seed, 0x7E])
    d1, d0 = bce(1, r_hat), bce(0, r_hat)
    totals, s1, s2 = _replicate(omega, rho, d1, d0, [w.ravel()], replications, rng)
    ideal = ideal_loss(rho, r_hat)
    mean = math.fsum(totals) / replications
    sd = float(np.std(totals, ddof=1))
    half = 1.96 * sd / np.sqrt(replications)

    # Theorem-2 style check at fixed relevance draws
    r_fixed = rng.random(omega.shape) < rho
    delta = np.where(r_fixed, d1, d0)
    var_item = delta**2 * omega * (1.0 - omega) / p_item**2
    var_user = delta**2 * omega * (1.0 - omega) / p_user**2
    var_mix = delta**2 * omega * (1.0 - omega) * w**2
    slack = 1e-12
    if clip > 0:
        bound = (1.0 / clip - 1.0) * delta**2
        violations = int(np.sum(var_mix > bound * (1 + slack) + 1e-300))
        ratio = float(np.max(np.where(bound > 0, var_mix / np.where(bound > 0, bound, 1.0), 0.0)))
    else:
        bound = np.full_like(delta, np.inf)
        violations, ratio = 0, 0.0
    single = int(np.sum(var_mix > np.maximum(var_item, var_user) * (1 + slack) + 1e-300))
    # Monte Carlo variance at the same fixed r
    x = (delta * w).ravel()
    m1 = np.zeros(omega.size)
    m2 = np.zeros(omega.size)
    for start in range(0, replications, 200):
        n = min(200, replications - start)
        draw = (rng.random((n, omega.size)) < omega.ravel()) * x
        m1 += draw.sum(axis=0)
        m2 += (draw * draw).sum(axis=0)
    mc_var = (m2 - m1**2 / replications) / (replications - 1)
    exact = var_mix.ravel()
    rel_err = float(abs(mc_var.sum() - exact.sum()) / exact.sum()) if exact.sum() > 0 else 0.0
    return OracleReport(
        clip=clip,
        alpha=alpha,
        replications=replications,
        cells=int(omega.size),
        ideal_loss=ideal,
        mean_estimate=mean,
        relative_bias=(mean - ideal) / ideal,
        ci_half_width=half / ideal,
        ci_contains_zero=bool(abs(mean - ideal) <= half),
        bound_violations=violations,
        max_violation_of_single_view=single,
        max_variance_ratio=ratio,
        mc_variance_rel_error=rel_err,
        mean_sample_variance=float(var_mix.mean()),
        mean_bound=float(np.mean(bound)) if clip > 0 else float("inf"),
    )


@dataclass
class ClipTradeoff:
    clips: list[float]
    bias: list[float]
    variance: list[float]
    ideal_loss: float


def clip_tradeoff(
    world: SyntheticWorld,
    sim: SimulatedLog,
    r_hat: np.ndarray,
    events,
    clips,
    replications: int = 2000,
    seed: int = 0,
) -> ClipTradeoff:
    """Shortfall ``(L_ideal - E L_M) / L_ideal`` and mean per-cell variance for each clip.

    Every clip value reuses the same exposure and relevance draws.
    """
    clips = [float(m) for m in clips]
    if clips != sorted(clips):
        raise WorldError("clip values must be sorted ascending")
    events = np.asarray(events, dtype=np.int64)
    omega = sim.exposure[events]
    rho = world.relevance()[sim.access_users[events]]
    weights = [(1.0 / np.maximum(omega, m)).ravel() for m in clips]
    rng = np.random.default_rng([seed, 0xC1])
    _, s1, s2 = _replicate(omega, rho, bce(1, r_hat), bce(0, r_hat), weights, replications, rng)
    ideal = ideal_loss(rho, r_hat)
    mean_total = s1.sum(axis=1) / replications
    cell_var = (s2 - s1**2 / replications) / (replications - 1)
    return ClipTradeoff(
        clips,
        [float((ideal - m) / ideal) for m in mean_total],
        [float(v) for v in cell_var.mean(axis=1)],
        ideal,
    )
