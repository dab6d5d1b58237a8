"""Parameter initialisers and small building blocks shared by both networks."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import ParameterStore


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    def __init__(self, store: ParameterStore, group: str, name: str, fan_in: int, fan_out: int, rng):
        self.weight = store.add(group, f"{name}.weight", xavier(rng, fan_in, fan_out))
        self.bias = store.add(group, f"{name}.bias", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias


class LayerNorm:
    def __init__(self, store: ParameterStore, group: str, name: str, dim: int):
        self.gamma = store.add(group, f"{name}.gamma", np.ones(dim))
        self.beta = store.add(group, f"{name}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


def pad_sequences(seqs, pad_id: int, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences to ``length`` (default: longest). Returns ids and validity mask."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max(initial=1)) if length is None else length
    width = max(width, 1)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for row, seq in enumerate(seqs):
        ids[row, : len(seq)] = seq
    mask = np.arange(width)[None, :] < lengths[:, None]
    return ids, mask
