"""Interaction logs, the two sequence views, and temporal splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np


class LogParseError(ValueError):
    pass


class LogValidationError(ValueError):
    pass


class SplitError(ValueError):
    pass


DEFAULT_MAX_LEN = 50


@dataclass
class InteractionLog:
    """Timestamped (user, item, click) records with dense integer ids.

    Records are kept in canonical order: by timestamp, then user id, then
    item id. ``user_labels``/``item_labels`` map dense ids back to the raw
    tokens of the source file when it had any.
    """

    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    clicks: np.ndarray
    user_count: int
    item_count: int
    user_labels: list[str] | None = None
    item_labels: list[str] | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.int64)
        self.clicks = np.asarray(self.clicks, dtype=np.int64)
        n = len(self.users)
        if not (len(self.items) == len(self.times) == len(self.clicks) == n):
            raise LogValidationError("record columns have different lengths")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.user_count:
                raise LogValidationError("user id outside [0, user_count)")
            if self.items.min() < 0 or self.items.max() >= self.item_count:
                raise LogValidationError("item id outside [0, item_count)")
            if not np.isin(self.clicks, (0, 1)).all():
                raise LogValidationError("click values must be 0 or 1")
        order = np.lexsort((self.items, self.users, self.times))
        if not np.array_equal(order, np.arange(n)):
            self.users, self.items = self.users[order], self.items[order]
            self.times, self.clicks = self.times[order], self.clicks[order]

    def __len__(self) -> int:
        return len(self.users)

    def records(self) -> Iterator[tuple[int, int, int, int]]:
        for row in zip(self.users.tolist(), self.items.tolist(), self.times.tolist(), self.clicks.tolist()):
            yield row

    def subset(self, mask_or_index) -> InteractionLog:
        return InteractionLog(
            self.users[mask_or_index],
            self.items[mask_or_index],
            self.times[mask_or_index],
            self.clicks[mask_or_index],
            self.user_count,
            self.item_count,
            self.user_labels,
            self.item_labels,
        )

    def clicked(self) -> InteractionLog:
        return self.subset(self.clicks == 1)


def _dense_ids(tokens: list[str]) -> tuple[dict[str, int], list[str]]:
    unique = sorted(set(tokens))
    if all(t.lstrip("-").isdigit() for t in unique):
        unique.sort(key=int)
    return {t: k for k, t in enumerate(unique)}, unique


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_log(path: str | Path) -> InteractionLog:
    """Read ``user<TAB>item<TAB>timestamp<TAB>click`` rows.

    Raw ids are remapped to dense integers. When a JSON sidecar written by
    :func:`write_log` sits next to the file its label tables are reused, so
    ids and vocabulary sizes survive a round trip.
    """
    rows: list[tuple[str, str, int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise LogParseError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(parts)}")
            user, item, ts, click = parts
            try:
                ts_val, click_val = int(ts), int(click)
            except ValueError as exc:
                raise LogParseError(f"{path}:{lineno}: timestamp and click must be integers") from exc
            if click_val not in (0, 1):
                raise LogValidationError(f"{path}:{lineno}: click must be 0 or 1, got {click_val}")
            rows.append((user.strip(), item.strip(), ts_val, click_val))

    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        user_labels, item_labels = meta["user_labels"], meta["item_labels"]
        user_map = {t: k for k, t in enumerate(user_labels)}
        item_map = {t: k for k, t in enumerate(item_labels)}
    else:
        user_map, user_labels = _dense_ids([r[0] for r in rows])
        item_map, item_labels = _dense_ids([r[1] for r in rows])
    try:
        users = [user_map[r[0]] for r in rows]
        items = [item_map[r[1]] for r in rows]
    except KeyError as exc:
        raise LogValidationError(f"{path}: id {exc.args[0]!r} missing from sidecar mapping") from exc
    return InteractionLog(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array([r[2] for r in rows], dtype=np.int64),
        np.array([r[3] for r in rows], dtype=np.int64),
        len(user_labels),
        len(item_labels),
        list(user_labels),
        list(item_labels),
    )


def write_log(path: str | Path, log: InteractionLog, metadata: dict | None = None) -> None:
    """Write the TSV plus a JSON sidecar holding id tables and ``metadata``."""
    user_labels = log.user_labels or [str(k) for k in range(log.user_count)]
    item_labels = log.item_labels or [str(k) for k in range(log.item_count)]
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t, c in log.records():
            fh.write(f"{user_labels[u]}\t{item_labels[i]}\t{t}\t{c}\n")
    side = {"user_labels": user_labels, "item_labels": item_labels, "records": len(log)}
    if metadata:
        side["metadata"] = metadata
    sidecar_path(path).write_text(json.dumps(side, indent=1))


# ---------------------------------------------------------------- sequence views


@dataclass
class SequenceIndex:
    """Both views of the click cube.

    ``user_items[u]``/``user_times[u]``: items clicked by ``u`` in time order.
    ``item_users[i]``/``item_times[i]``: users who clicked ``i`` in time order.
    """

    user_items: list[np.ndarray]
    user_times: list[np.ndarray]
    item_users: list[np.ndarray]
    item_times: list[np.ndarray]
    user_clicks: np.ndarray = field(repr=False)
    item_clicks: np.ndarray = field(repr=False)

    @property
    def user_count(self) -> int:
        return len(self.user_items)

    @property
    def item_count(self) -> int:
        return len(self.item_users)

    def user_history_length(self, users: np.ndarray, times: np.ndarray) -> np.ndarray:
        """l(u, t) for paired arrays of users and times."""
        return np.array(
            [np.searchsorted(self.user_times[u], t, side="left") for u, t in zip(users.tolist(), times.tolist())],
            dtype=np.int64,
        )

    def item_history_length(self, items: np.ndarray, times: np.ndarray) -> np.ndarray:
        return np.array(
            [np.searchsorted(self.item_times[i], t, side="left") for i, t in zip(items.tolist(), times.tolist())],
            dtype=np.int64,
        )

    def flatten_user_view(self) -> list[tuple[int, int, int]]:
        return sorted(
            (u, int(i), int(t))
            for u in range(self.user_count)
            for i, t in zip(self.user_items[u], self.user_times[u])
        )

    def flatten_item_view(self) -> list[tuple[int, int, int]]:
        return sorted(
            (int(u), i, int(t))
            for i in range(self.item_count)
            for u, t in zip(self.item_users[i], self.item_times[i])
        )


def build_sequence_index(log: InteractionLog) -> SequenceIndex:
    clicked = log.clicked()
    # canonical order is already (time, user, item); stable sorts keep it per key
    by_user = np.argsort(clicked.users, kind="stable")
    by_item = np.argsort(clicked.items, kind="stable")
    user_bounds = np.searchsorted(clicked.users[by_user], np.arange(log.user_count + 1))
    item_bounds = np.searchsorted(clicked.items[by_item], np.arange(log.item_count + 1))
    user_items, user_times, item_users, item_times = [], [], [], []
    for u in range(log.user_count):
        rows = by_user[user_bounds[u] : user_bounds[u + 1]]
        user_items.append(clicked.items[rows])
        user_times.append(clicked.times[rows])
    for i in range(log.item_count):
        rows = by_item[item_bounds[i] : item_bounds[i + 1]]
        item_users.append(clicked.users[rows])
        item_times.append(clicked.times[rows])
    return SequenceIndex(
        user_items,
        user_times,
        item_users,
        item_times,
        np.bincount(clicked.users, minlength=log.user_count),
        np.bincount(clicked.items, minlength=log.item_count),
    )


def item_view_sequence(index: SequenceIndex, u: int, t: int, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    """h_u^{<t}: items ``u`` clicked strictly before ``t``, most recent ``max_len``."""
    end = int(np.searchsorted(index.user_times[u], t, side="left"))
    return index.user_items[u][max(0, end - max_len) : end]


def user_view_sequence(index: SequenceIndex, i: int, t: int, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    """h_i^{<t}: users who clicked ``i`` strictly before ``t``, most recent ``max_len``."""
    end = int(np.searchsorted(index.item_times[i], t, side="left"))
    return index.item_users[i][max(0, end - max_len) : end]


def full_sequences(index: SequenceIndex, view: str, max_len: int = DEFAULT_MAX_LEN) -> list[np.ndarray]:
    """Every entity's complete history in one view, truncated to the latest ``max_len``."""
    source = index.user_items if view == "item" else index.item_users
    return [seq[-max_len:] for seq in source if len(seq)]


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    validation_fraction: float = 0.4
    gamma: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise SplitError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise SplitError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.gamma > 0:
            raise SplitError(f"resampling exponent gamma must be <= 0, got {self.gamma}")

    @property
    def test_fraction(self) -> float:
        return 1.0 - self.validation_fraction


def acceptance_weights(item_clicks: np.ndarray, gamma: float) -> np.ndarray:
    """(m_i)^gamma scaled so the largest weight is 1; counts are floored at 1."""
    if gamma == 0:
        return np.ones(len(item_clicks))
    raw = np.maximum(item_clicks, 1).astype(np.float64) ** gamma
    top = raw.max()
    if not np.isfinite(top) or top <= 0:
        raise SplitError("acceptance weights are degenerate")
    return raw / top


def temporal_debiased_split(log: InteractionLog, spec: SplitSpec = SplitSpec()):
    """Return ``(train, validation, test, info)``.

    Train is the earliest ``train_fraction`` of records. The rest is thinned
    with per-record acceptance probability from :func:`acceptance_weights`
    and the accepted records are cut by time into validation and test.
    """
    n = len(log)
    if n == 0:
        raise SplitError("cannot split an empty log")
    n_train = int(np.floor(spec.train_fraction * n))
    if n_train > 0:
        # never cut through a timestamp: ties stay on the train side
        n_train = int(np.searchsorted(log.times, log.times[n_train - 1], side="right"))
    if n_train == 0 or n_train == n:
        raise SplitError(f"train fraction {spec.train_fraction} leaves an empty part of {n} records")
    rest = np.arange(n_train, n)
    item_clicks = np.bincount(log.items[log.clicks == 1], minlength=log.item_count)
    weights = acceptance_weights(item_clicks, spec.gamma)[log.items[rest]]
    if not np.any(weights > 0):
        raise SplitError("all acceptance weights are zero")
    rng = np.random.default_rng(spec.seed)
    accepted = rest[rng.random(len(rest)) < weights] if spec.gamma != 0 else rest
    if len(accepted) < 2:
        raise SplitError(f"resampling kept only {len(accepted)} records")
    n_valid = int(np.floor(spec.validation_fraction * len(accepted)))
    n_valid = min(max(n_valid, 1), len(accepted) - 1)
    accepted_times = log.times[accepted]
    n_valid = int(np.searchsorted(accepted_times, accepted_times[n_valid - 1], side="right"))
    if n_valid >= len(accepted):
        raise SplitError("validation cut swallowed the whole test period (timestamps all tied)")
    info = {
        "train_records": n_train,
        "remainder_records": len(rest),
        "accepted_records": int(len(accepted)),
        "validation_records": n_valid,
        "test_records": int(len(accepted) - n_valid),
        "gamma": spec.gamma,
        "seed": spec.seed,
        "train_fraction": spec.train_fraction,
        "validation_fraction": spec.validation_fraction,
    }
    return (
        log.subset(np.arange(n_train)),
        log.subset(accepted[:n_valid]),
        log.subset(accepted[n_valid:]),
        info,
    )


def item_frequency_kl_to_uniform(log: InteractionLog) -> float:
    """KL(empirical item distribution || uniform over the item vocabulary)."""
    counts = np.bincount(log.items, minlength=log.item_count).astype(np.float64)
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(np.sum(p * np.log(p * log.item_count)))
