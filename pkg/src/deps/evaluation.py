"""Full-ranking NDCG@K / HR@K over held-out click records."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError, no_grad
from .interactions import InteractionLog, SequenceIndex

POLICIES = ("all_items", "all_unseen_items")
DEFAULT_KS = (5, 10, 20)


class EvaluationError(ValueError):
    pass


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError(f"rank and K must be >= 1, got rank={rank}, K={k}")
    return 1.0 / np.log2(rank + 1.0) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> int:
    if rank < 1 or k < 1:
        raise ValueError(f"rank and K must be >= 1, got rank={rank}, K={k}")
    return int(rank <= k)


def rank_of(scores: np.ndarray, candidates: np.ndarray, target: int) -> int:
    """1-based rank of ``target`` among ``candidates``; higher score first, ties by lower id."""
    candidates = np.asarray(candidates)
    pos = np.flatnonzero(candidates == target)
    if len(pos) == 0:
        raise ContractError(f"target item {target} is not among the candidates")
    s = scores[pos[0]]
    ahead = (scores > s) | ((scores == s) & (candidates < target))
    return int(ahead.sum()) + 1


def candidate_items(index: SequenceIndex, u: int, t: int, target: int, policy: str) -> np.ndarray:
    n_items = index.item_count
    if policy == "all_items":
        return np.arange(n_items)
    if policy == "all_unseen_items":
        seen = index.user_items[u][: np.searchsorted(index.user_times[u], t, side="left")]
        keep = np.ones(n_items, dtype=bool)
        keep[seen] = False
        keep[target] = True
        return np.flatnonzero(keep)
    raise ValueError(f"unknown candidate policy {policy!r}; expected one of {POLICIES}")


class EncodingCache:
    """Sequence encodings keyed by (entity, prefix length) against one index.

    Valid only while the model is frozen.
    """

    def __init__(self, model, index: SequenceIndex, batch: int = 256):
        self.model = model
        self.index = index
        self.batch = batch
        self.users: dict[tuple[int, int], np.ndarray] = {}
        self.items: dict[tuple[int, int], np.ndarray] = {}

    def _fill(self, keys, store: dict, sequences, encode) -> None:
        todo = sorted({k for k in keys if k not in store})
        max_len = self.model.cfg.max_len
        for start in range(0, len(todo), self.batch):
            chunk = todo[start : start + self.batch]
            hist = [sequences[e][max(0, n - max_len) : n] for e, n in chunk]
            enc = encode(hist).data
            for key, row in zip(chunk, enc):
                store[key] = row

    def user_side(self, keys) -> np.ndarray:
        """e(h_u^{<t}) for keys ``(u, l(u,t))``."""
        keys = [tuple(k) for k in keys]
        self._fill(keys, self.users, self.index.user_items, self.model.encode_item_history)
        return np.stack([self.users[k] for k in keys])

    def item_side(self, keys) -> np.ndarray:
        """e(h_i^{<t}) for keys ``(i, l(i,t))``."""
        keys = [tuple(k) for k in keys]
        self._fill(keys, self.items, self.index.item_users, self.model.encode_user_history)
        return np.stack([self.items[k] for k in keys])


def score_candidates(model, cache: EncodingCache, u: int, t: int, candidates: np.ndarray) -> np.ndarray:
    """predict(u, j, h_u^{<t}, h_j^{<t}) for every candidate ``j``."""
    index = cache.index
    l_u = int(np.searchsorted(index.user_times[u], t, side="left"))
    l_j = [int(np.searchsorted(index.item_times[j], t, side="left")) for j in candidates.tolist()]
    enc_u = cache.user_side([(u, l_u)])
    enc_j = cache.item_side(list(zip(candidates.tolist(), l_j)))
    with no_grad():
        logits = model.head_logits(
            ag.Tensor(np.repeat(enc_u, len(candidates), axis=0)),
            candidates,
            ag.Tensor(enc_j),
            np.full(len(candidates), u),
        )
        return ag.sigmoid(logits).data


def rank_target(model, u: int, target: int, t: int, index: SequenceIndex, policy: str = "all_unseen_items", cache=None) -> int:
    """Rank of the clicked ``target`` for ``u`` at time ``t`` among the policy's candidates."""
    cache = cache if cache is not None else EncodingCache(model, index)
    candidates = candidate_items(index, u, t, target, policy)
    if target not in set(candidates.tolist()):
        raise ContractError(f"policy {policy} excludes target item {target}")
    return rank_of(score_candidates(model, cache, u, t, candidates), candidates, target)


@dataclass
class MetricTable:
    ks: tuple[int, ...]
    ndcg: dict[int, float]
    hr: dict[int, float]
    count: int
    metadata: dict = field(default_factory=dict)
    ranks: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "NDCG": {str(k): self.ndcg[k] for k in self.ks},
            "HR": {str(k): self.hr[k] for k in self.ks},
            "count": self.count,
            "metadata": self.metadata,
        }

    def to_tsv(self) -> str:
        lines = ["metric\t" + "\t".join(f"@{k}" for k in self.ks)]
        lines.append("NDCG\t" + "\t".join(f"{self.ndcg[k]:.6f}" for k in self.ks))
        lines.append("HR\t" + "\t".join(f"{self.hr[k]:.6f}" for k in self.ks))
        for key in sorted(self.metadata):
            lines.append(f"# {key}\t{self.metadata[key]}")
        return "\n".join(lines) + "\n"

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".tsv").write_text(self.to_tsv())
        stem.with_suffix(".json").write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))


def metrics_from_ranks(ranks, ks=DEFAULT_KS, metadata: dict | None = None) -> MetricTable:
    ranks = np.asarray(ranks, dtype=np.int64)
    if len(ranks) == 0:
        raise EvaluationError("no test interactions to evaluate")
    ks = tuple(sorted(ks))
    # fsum is exact, so the table does not depend on record order
    n = len(ranks)
    ndcg = {k: math.fsum(ndcg_at_k(int(r), k) for r in ranks) / n for k in ks}
    hr = {k: math.fsum(hr_at_k(int(r), k) for r in ranks) / n for k in ks}
    return MetricTable(ks, ndcg, hr, len(ranks), dict(metadata or {}), ranks)


def evaluate(
    model,
    test: InteractionLog,
    index: SequenceIndex,
    ks=DEFAULT_KS,
    policy: str = "all_unseen_items",
    metadata: dict | None = None,
) -> MetricTable:
    """Macro-averaged metrics over the click records of ``test``.

    ``index`` supplies the histories and must cover every event before each
    test timestamp (normally the index of the full log).
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown candidate policy {policy!r}; expected one of {POLICIES}")
    clicks = test.clicked()
    if len(clicks) == 0:
        raise EvaluationError("test split has no click records")
    cache = EncodingCache(model, index)
    ranks = [
        rank_target(model, u, i, t, index, policy, cache)
        for u, i, t, _ in clicks.records()
    ]
    meta = {"policy": policy, **(metadata or {})}
    return metrics_from_ranks(ranks, ks, meta)


__all__ = [
    "POLICIES",
    "EvaluationError",
    "EncodingCache",
    "MetricTable",
    "candidate_items",
    "evaluate",
    "hr_at_k",
    "metrics_from_ranks",
    "ndcg_at_k",
    "rank_of",
    "rank_target",
    "score_candidates",
]
