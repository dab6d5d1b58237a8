"""Loss assembly and the two-stage training procedure.

Stage 1 pretrains the propensity GRUs on next-step prediction and the
embeddings/transformers on masked-token prediction. Stage 2 alternates
GRU refreshes with inverse-propensity-weighted cross-entropy epochs for
the recommender.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .evaluation import evaluate
from .interactions import (
    InteractionLog,
    SequenceIndex,
    build_sequence_index,
    full_sequences,
    item_view_sequence,
    user_view_sequence,
)
from .optim import adam_step
from .propensity import FrequencyPropensity, PropensityEstimator, clip, frequency_propensity

IPS_MODES = ("dual", "item_only", "user_only", "none", "frequency_dual")
BCE_EPS = 1e-12


class TrainingDivergedError(FloatingPointError):
    pass


class InvariantViolation(RuntimeError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.5
    clip: float = 0.05
    lambda_p: float = 0.5
    n_p: int = 20
    n_u: int = 10
    n_b: int = 2
    lr: float = 0.01
    batch_size: int = 256
    seed: int = 0
    ips_mode: str = "dual"
    mask_prob: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.clip < 1.0:
            raise ValueError(f"clip must lie in [0, 1), got {self.clip}")
        if self.n_p < 0 or self.n_u < 0 or self.n_b < 1:
            raise ValueError(f"need n_p >= 0, n_u >= 0, n_b >= 1; got {self.n_p}, {self.n_u}, {self.n_b}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        if self.ips_mode not in IPS_MODES:
            raise ValueError(f"ips_mode must be one of {IPS_MODES}, got {self.ips_mode!r}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    ar_u: float | None = None
    ar_i: float | None = None
    mlm_u: float | None = None
    mlm_i: float | None = None
    unbiased: float | None = None
    valid_ndcg10: float | None = None


@dataclass
class TrainingRun:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint: str | None = None
    best_epoch: int | None = None

    def stage(self, k: int) -> list[EpochRecord]:
        return [r for r in self.records if r.stage == k]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> TrainingRun:
        lines = Path(path).read_text().splitlines()
        return cls([EpochRecord(**json.loads(line)) for line in lines if line.strip()])


@dataclass
class TrainingData:
    """Per-record training samples plus whole-history sequences for both views."""

    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    clicks: np.ndarray
    item_histories: list[np.ndarray]  # h_u^{<t}
    user_histories: list[np.ndarray]  # h_i^{<t}
    item_sequences: list[np.ndarray]  # full h_u, AR/MLM corpus of the item view
    user_sequences: list[np.ndarray]
    frequency: FrequencyPropensity

    def __len__(self) -> int:
        return len(self.users)


def prepare_training_data(train: InteractionLog, max_len: int, index: SequenceIndex | None = None) -> TrainingData:
    index = index if index is not None else build_sequence_index(train)
    recs = list(train.records())
    return TrainingData(
        users=train.users.copy(),
        items=train.items.copy(),
        times=train.times.copy(),
        clicks=train.clicks.copy(),
        item_histories=[item_view_sequence(index, u, t, max_len) for u, _, t, _ in recs],
        user_histories=[user_view_sequence(index, i, t, max_len) for _, i, t, _ in recs],
        item_sequences=full_sequences(index, "item", max_len),
        user_sequences=full_sequences(index, "user", max_len),
        frequency=frequency_propensity(index),
    )


# ---------------------------------------------------------------- losses


def bce(c, r_hat):
    """delta(c, r_hat) = -[c ln r_hat + (1 - c) ln(1 - r_hat)], r_hat clamped to [eps, 1 - eps]."""
    r = np.clip(np.asarray(r_hat, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    c = np.asarray(c, dtype=np.float64)
    out = -(c * np.log(r) + (1.0 - c) * np.log1p(-r))
    return float(out) if out.ndim == 0 else out


def bce_from_logits(c: np.ndarray, logits: Tensor) -> Tensor:
    """Elementwise delta(c, sigmoid(z)) as softplus(z) - c z; stable for any z."""
    return ag.softplus(logits) - ag.Tensor(np.asarray(c, dtype=np.float64)) * logits


def ips_weights(cfg: LossConfig, p_item, p_user) -> np.ndarray:
    """Per-sample factor multiplying delta; propensities must already be clipped."""
    p_item = np.asarray(p_item, dtype=np.float64)
    p_user = np.asarray(p_user, dtype=np.float64)
    if cfg.ips_mode == "none":
        return np.ones(np.broadcast(p_item, p_user).shape)
    floor = cfg.clip
    for name, p in (("item", p_item), ("user", p_user)):
        if np.any(p < floor) or np.any(p <= 0):
            raise InvariantViolation(f"{name}-view propensity {p.min():.3g} below clip value {floor}")
    if cfg.ips_mode == "item_only":
        return 1.0 / p_item
    if cfg.ips_mode == "user_only":
        return 1.0 / p_user
    return cfg.alpha / p_item + (1.0 - cfg.alpha) / p_user


def unbiased_loss(cfg: LossConfig, clicks, logits: Tensor, p_item, p_user) -> Tensor:
    """Sum over the batch of w * delta(c, r_hat); w is a constant (no gradient)."""
    w = ips_weights(cfg, p_item, p_user)
    return ag.sum_(bce_from_logits(clicks, logits) * ag.Tensor(w))


def unbiased_loss_value(cfg: LossConfig, clicks, r_hat, p_item, p_user) -> float:
    """Numeric form of :func:`unbiased_loss` from probabilities."""
    return math.fsum(ips_weights(cfg, p_item, p_user) * bce(clicks, r_hat))


def sample_propensities(estimator: PropensityEstimator, data: TrainingData, cfg: LossConfig):
    """Clipped (item-view, user-view) propensities for every training record."""
    if cfg.ips_mode == "frequency_dual":
        return clip(data.frequency.p_item[data.items], cfg.clip), clip(data.frequency.p_user[data.users], cfg.clip)
    n = len(data)
    if cfg.ips_mode == "none":
        return np.ones(n), np.ones(n)
    p_item = estimator.propensities("item", data.items, data.item_histories, cfg.clip)
    p_user = estimator.propensities("user", data.users, data.user_histories, cfg.clip)
    return p_item, p_user


# ---------------------------------------------------------------- procedure


def _check(value: float, what: str, stage: int, epoch: int) -> float:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{what} became non-finite ({value}) in stage {stage}, epoch {epoch}")
    return float(value)


def _step(store, loss: Tensor, groups, lr: float) -> None:
    store.clear_grad()
    store.zero_grad(groups)
    ag.backward(loss)
    adam_step(store, groups, lr)


def ar_update(estimator: PropensityEstimator, data: TrainingData, lr: float, stage: int, epoch: int):
    """One full-batch theta_p step on L^AR_u + L^AR_i; returns both losses."""
    ar_u = estimator.ar_loss("item", data.item_sequences)
    ar_i = estimator.ar_loss("user", data.user_sequences)
    total = ar_u + ar_i
    _check(total.item(), "AR loss", stage, epoch)
    if total.requires_grad:
        _step(estimator.store, total, ["theta_p"], lr)
    return ar_u.item(), ar_i.item()


def stage1_train(model, estimator: PropensityEstimator, data: TrainingData, cfg: LossConfig, run: TrainingRun | None = None) -> TrainingRun:
    """``n_p`` epochs: theta_p on AR, then theta_e/theta_t on lambda_p * MLM."""
    run = run if run is not None else TrainingRun()
    rng = np.random.default_rng([cfg.seed, 1])
    store = model.store
    for epoch in range(cfg.n_p):
        ar_u, ar_i = ar_update(estimator, data, cfg.lr, 1, epoch)
        model.training = True
        mlm_u = model.mlm_loss(data.item_sequences, "item", cfg.mask_prob, rng)
        mlm_i = model.mlm_loss(data.user_sequences, "user", cfg.mask_prob, rng)
        model.training = False
        total = cfg.lambda_p * (mlm_u + mlm_i)
        _check(total.item(), "MLM loss", 1, epoch)
        if total.requires_grad:
            _step(store, total, ["theta_e", "theta_t"], cfg.lr)
        run.records.append(EpochRecord(1, epoch, ar_u, ar_i, mlm_u.item(), mlm_i.item()))
    return run


@dataclass
class Validation:
    log: InteractionLog
    index: SequenceIndex
    policy: str = "all_unseen_items"


def stage2_train(
    model,
    estimator: PropensityEstimator,
    data: TrainingData,
    cfg: LossConfig,
    validation: Validation | None = None,
    run: TrainingRun | None = None,
) -> TrainingRun:
    """``n_u`` epochs of (``n_b`` AR steps on theta_p, one IPS-weighted pass on theta_e/t/m).

    With a validation split the best NDCG@10 epoch is restored at the end.
    """
    run = run if run is not None else TrainingRun()
    rng = np.random.default_rng([cfg.seed, 2])
    store = model.store
    groups = ["theta_e", "theta_t", "theta_m"]
    best_score, best_state = -np.inf, None
    for epoch in range(cfg.n_u):
        for _ in range(cfg.n_b):
            ar_u, ar_i = ar_update(estimator, data, cfg.lr, 2, epoch)
        p_item, p_user = sample_propensities(estimator, data, cfg)
        order = rng.permutation(len(data))
        total = []
        model.training = True
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            logits = model.logits(
                data.users[rows],
                data.items[rows],
                [data.item_histories[r] for r in rows],
                [data.user_histories[r] for r in rows],
            )
            loss = unbiased_loss(cfg, data.clicks[rows], logits, p_item[rows], p_user[rows])
            total.append(_check(loss.item(), "unbiased loss", 2, epoch))
            _step(store, loss, groups, cfg.lr)
        model.training = False
        score = None
        if validation is not None:
            score = evaluate(model, validation.log, validation.index, ks=(10,), policy=validation.policy).ndcg[10]
            if score > best_score:
                best_score, best_state, run.best_epoch = score, store.snapshot(groups), epoch
        run.records.append(EpochRecord(2, epoch, ar_u, ar_i, None, None, math.fsum(total), score))
    if best_state is not None:
        store.restore(best_state)
    return run
