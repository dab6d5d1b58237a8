"""Run configuration and the simulate -> split -> train -> evaluate chain."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .evaluation import MetricTable, evaluate
from .interactions import (
    InteractionLog,
    SequenceIndex,
    SplitSpec,
    build_sequence_index,
    load_log,
    temporal_debiased_split,
)
from .propensity import PropensityEstimator
from .recommender import DepsModel, ModelConfig
from .simulator import ExposureParams, SimulatedLog, SyntheticWorld, generate_world, simulate_log
from .training import (
    IPS_MODES,
    LossConfig,
    TrainingData,
    TrainingRun,
    Validation,
    prepare_training_data,
    stage1_train,
    stage2_train,
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    log_path: str | None = None
    # model
    dim: int = 16
    layers: int = 2
    heads: int = 2
    max_len: int = 50
    dropout: float = 0.1
    mask_prob: float = 0.2
    # optimisation
    lr: float = 0.01
    batch_size: int = 256
    alpha: float = 0.5
    clip: float = 0.05
    lambda_p: float = 0.5
    n_p: int = 20
    n_u: int = 10
    n_b: int = 2
    ips_mode: str = "dual"
    stage1: bool = True
    seed: int = 0
    # split and evaluation
    train_fraction: float = 0.5
    validation_fraction: float = 0.4
    gamma: float = -1.0
    split_seed: int = 0
    policy: str = "all_unseen_items"
    ks: list = field(default_factory=lambda: [5, 10, 20])
    # synthetic world
    world_seed: int = 0
    n_users: int = 100
    n_items: int = 100
    d_w: int = 4
    horizon: int = 5000
    relevance_scale: float = 3.0
    relevance_bias: float = 0.0
    activity_skew: float = 1.0
    pop_exponent: float = 0.5
    recency_exponent: float = 0.3
    affinity: float = 1.0
    kappa: float = 1.0
    affinity_window: int = 5
    # oracle checks and experiment grids
    verify_replications: int = 10_000
    verify_events: int = 50
    verify_alphas: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    verify_clips: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    sweep_key: str = "clip"
    sweep_values: list = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1, 0.2])

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(doc)

    def replace(self, **changes) -> RunConfig:
        doc = asdict(self)
        doc.update(changes)
        return RunConfig.from_dict(doc)

    def validate(self) -> None:
        checks = [
            ("dim", self.dim >= 1),
            ("heads", self.heads >= 1 and self.dim % max(self.heads, 1) == 0),
            ("layers", self.layers >= 1),
            ("max_len", self.max_len >= 1),
            ("dropout", 0.0 <= self.dropout < 1.0),
            ("mask_prob", 0.0 < self.mask_prob < 1.0),
            ("lr", self.lr > 0),
            ("batch_size", self.batch_size >= 1),
            ("alpha", 0.0 <= self.alpha <= 1.0),
            ("clip", 0.0 <= self.clip < 1.0),
            ("n_p", self.n_p >= 0),
            ("n_u", self.n_u >= 0),
            ("n_b", self.n_b >= 1),
            ("ips_mode", self.ips_mode in IPS_MODES),
            ("train_fraction", 0.0 < self.train_fraction < 1.0),
            ("validation_fraction", 0.0 < self.validation_fraction < 1.0),
            ("gamma", self.gamma <= 0),
            ("policy", self.policy in ("all_items", "all_unseen_items")),
            ("ks", bool(self.ks) and all(isinstance(k, int) and k >= 1 for k in self.ks)),
            ("n_users", self.n_users >= 2),
            ("n_items", self.n_items >= 2),
            ("horizon", self.horizon >= 1),
            ("kappa", self.kappa > 0),
            ("verify_replications", self.verify_replications >= 1000),
            ("verify_events", self.verify_events >= 1),
            ("seeds", bool(self.seeds)),
            ("sweep_key", self.sweep_key in ("clip", "alpha", "lambda_p", "gamma", "lr", "n_b")),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {key!r}: {getattr(self, key)!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    # -- views onto the component configs

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            clip=self.clip,
            lambda_p=self.lambda_p,
            n_p=self.n_p if self.stage1 else 0,
            n_u=self.n_u,
            n_b=self.n_b,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            ips_mode=self.ips_mode,
            mask_prob=self.mask_prob,
        )

    def model_config(self, n_users: int, n_items: int) -> ModelConfig:
        return ModelConfig(n_users, n_items, self.dim, self.layers, self.heads, self.max_len, self.dropout)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_fraction, self.validation_fraction, self.gamma, self.split_seed)

    def exposure(self) -> ExposureParams:
        return ExposureParams(self.pop_exponent, self.recency_exponent, self.affinity, self.kappa, self.affinity_window)


def build_world(cfg: RunConfig) -> SyntheticWorld:
    return generate_world(
        cfg.world_seed,
        cfg.n_users,
        cfg.n_items,
        cfg.d_w,
        cfg.exposure(),
        cfg.relevance_scale,
        cfg.relevance_bias,
        cfg.activity_skew,
    )


def simulate(cfg: RunConfig) -> tuple[SyntheticWorld, SimulatedLog]:
    world = build_world(cfg)
    return world, simulate_log(world, cfg.horizon)


@dataclass
class Dataset:
    """Full log, its three splits, and the indexes training and evaluation read."""

    full: InteractionLog
    train: InteractionLog
    valid: InteractionLog
    test: InteractionLog
    split_info: dict
    full_index: SequenceIndex
    training: TrainingData


def prepare_dataset(cfg: RunConfig, log: InteractionLog | None = None) -> Dataset:
    if log is None:
        log = load_log(cfg.log_path) if cfg.log_path else simulate(cfg)[1].log
    train, valid, test, info = temporal_debiased_split(log, cfg.split_spec())
    return Dataset(
        log, train, valid, test, info, build_sequence_index(log), prepare_training_data(train, cfg.max_len)
    )


def build_model(cfg: RunConfig, data: Dataset) -> tuple[DepsModel, PropensityEstimator]:
    model = DepsModel(cfg.model_config(data.full.user_count, data.full.item_count), seed=cfg.seed)
    estimator = PropensityEstimator(model.store, model.embeddings, cfg.dim, cfg.clip, seed=cfg.seed)
    return model, estimator


def train(cfg: RunConfig, data: Dataset, stage1_state: dict | None = None):
    """Both stages; ``stage1_state`` (from :func:`stage1_snapshot`) skips recomputing stage 1."""
    loss_cfg = cfg.loss_config()
    model, estimator = build_model(cfg, data)
    if stage1_state is None:
        run = stage1_train(model, estimator, data.training, loss_cfg)
    else:
        model.store.load_state(stage1_state["store"])
        model.dropout_rng.bit_generator.state = stage1_state["dropout_rng"]
        run = TrainingRun(list(stage1_state["records"]))
    validation = Validation(data.valid, data.full_index, cfg.policy) if len(data.valid.clicked()) else None
    stage2_train(model, estimator, data.training, loss_cfg, validation, run)
    return model, estimator, run


def stage1_snapshot(cfg: RunConfig, data: Dataset) -> dict:
    model, estimator = build_model(cfg, data)
    run = stage1_train(model, estimator, data.training, cfg.loss_config())
    return {
        "store": model.store.state(),
        "dropout_rng": model.dropout_rng.bit_generator.state,
        "records": run.records,
    }


def evaluate_model(cfg: RunConfig, model: DepsModel, data: Dataset) -> MetricTable:
    meta = {"seed": cfg.seed, "ips_mode": cfg.ips_mode, "clip": cfg.clip, "alpha": cfg.alpha, "stage1": cfg.stage1}
    return evaluate(model, data.test, data.full_index, tuple(cfg.ks), cfg.policy, meta)


def grid(cfg: RunConfig, data: Dataset, variants: list[dict], seeds=None, progress=None) -> list[dict]:
    """Train and test every variant for every seed, sharing stage 1 across variants of a seed.

    Each variant is a dict of config overrides; the result rows carry the
    variant, the seed and the test metric table.
    """
    seeds = list(cfg.seeds if seeds is None else seeds)
    rows = []
    for seed in seeds:
        cache: dict[str, dict] = {}
        for variant in variants:
            vcfg = cfg.replace(seed=seed, **variant)
            key = json.dumps(
                [vcfg.stage1, vcfg.n_p, vcfg.lr, vcfg.lambda_p, vcfg.mask_prob, vcfg.dim, vcfg.layers, vcfg.heads,
                 vcfg.max_len, vcfg.dropout]
            )
            if key not in cache:
                cache[key] = stage1_snapshot(vcfg, data)
            model, _, run = train(vcfg, data, cache[key])
            table = evaluate_model(vcfg, model, data)
            rows.append({"seed": seed, "variant": variant, "metrics": table, "run": run})
            if progress is not None:
                progress(rows[-1])
    return rows


def ndcg_matrix(rows: list[dict], variants: list[dict], k: int = 10) -> np.ndarray:
    """``[len(variants), n_seeds]`` NDCG@k in seed order."""
    seeds = sorted({r["seed"] for r in rows})
    out = np.full((len(variants), len(seeds)), np.nan)
    for r in rows:
        out[variants.index(r["variant"]), seeds.index(r["seed"])] = r["metrics"].ndcg[k]
    return out
