"""Grouped parameter storage, Adam, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .autograd import ContractError, Tensor, parameter

GROUPS = ("theta_e", "theta_p", "theta_t", "theta_m")
MAGIC = b"DEPSCKPT1"


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParameterStore:
    """Named tensors partitioned into the four fixed groups.

    Full names are ``"<group>/<name>"``; every trainable tensor lives in
    exactly one group.
    """

    def __init__(self):
        self.groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        self.adam: dict[str, AdamState] = {}

    def add(self, group: str, name: str, value) -> Tensor:
        if group not in self.groups:
            raise KeyError(f"unknown parameter group {group!r}; expected one of {GROUPS}")
        full = f"{group}/{name}"
        if any(name in members for members in self.groups.values()):
            raise KeyError(f"parameter {name!r} already registered")
        tensor = parameter(value, name=full)
        self.groups[group][name] = tensor
        return tensor

    def _selected(self, groups: Iterable[str] | None) -> tuple[str, ...]:
        if groups is None:
            return GROUPS
        groups = tuple(groups)
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        return tuple(g for g in GROUPS if g in groups)

    def named(self, groups: Iterable[str] | None = None) -> Iterator[tuple[str, Tensor]]:
        for g in self._selected(groups):
            for name, tensor in self.groups[g].items():
                yield f"{g}/{name}", tensor

    def tensors(self, groups: Iterable[str] | None = None) -> list[Tensor]:
        return [t for _, t in self.named(groups)]

    def get(self, full_name: str) -> Tensor:
        group, name = full_name.split("/", 1)
        return self.groups[group][name]

    def zero_grad(self, groups: Iterable[str] | None = None) -> None:
        for _, t in self.named(groups):
            t.grad = np.zeros_like(t.data)

    def clear_grad(self) -> None:
        for _, t in self.named():
            t.grad = None

    def parameter_count(self, groups: Iterable[str] | None = None) -> int:
        return sum(t.size for t in self.tensors(groups))

    def checksum(self, groups: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for name, t in self.named(groups):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def snapshot(self, groups: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named(groups)}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            target = self.get(name)
            if target.shape != arr.shape:
                raise ContractError(f"shape mismatch restoring {name}: {target.shape} vs {arr.shape}")
            target.data[...] = arr

    def state(self) -> dict:
        """Deep copy of values and Adam moments, for later :meth:`load_state`."""
        adam = {n: AdamState(s.m.copy(), s.v.copy(), s.t) for n, s in self.adam.items()}
        return {"values": self.snapshot(), "adam": adam}

    def load_state(self, state: dict) -> None:
        self.restore(state["values"])
        self.adam = {n: AdamState(s.m.copy(), s.v.copy(), s.t) for n, s in state["adam"].items()}

    def step_count(self, group: str) -> int:
        counts = [self.adam[n].t for n, _ in self.named([group]) if n in self.adam]
        return max(counts, default=0)


def adam_step(
    store: ParameterStore,
    groups: Iterable[str],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of the tensors in ``groups`` only."""
    selected = list(store.named(groups))
    missing = [name for name, t in selected if t.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[:3]}")
    for name, t in selected:
        state = store.adam.get(name)
        if state is None:
            state = store.adam[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        g = t.grad
        state.t += 1
        state.m = beta1 * state.m + (1.0 - beta1) * g
        state.v = beta2 * state.v + (1.0 - beta2) * g * g
        m_hat = state.m / (1.0 - beta1**state.t)
        v_hat = state.v / (1.0 - beta2**state.t)
        t.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- checkpoints


def _write_tensor(fh, name: str, values: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    values = np.asarray(values, dtype="<f8")
    fh.write(struct.pack("<Q", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<Q", values.ndim))
    for dim in values.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(values.tobytes(order="C"))


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, values in tensors.items():
            _write_tensor(fh, name, np.asarray(values, dtype=np.float64))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a DEPS checkpoint (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path: str | Path, store: ParameterStore) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in store.named():
        tensors[name] = t.data
        state = store.adam.get(name)
        if state is not None:
            tensors[f"{name}.m"] = state.m
            tensors[f"{name}.v"] = state.v
            tensors[f"{name}.t"] = np.array(float(state.t))
    write_tensors(path, tensors)


def load_checkpoint(path: str | Path, store: ParameterStore) -> None:
    tensors = read_tensors(path)
    for name, t in store.named():
        if name not in tensors:
            raise ContractError(f"checkpoint {path} lacks tensor {name}")
        if tensors[name].shape != t.shape:
            raise ContractError(f"checkpoint {name} has shape {tensors[name].shape}, model expects {t.shape}")
        t.data[...] = tensors[name]
        if f"{name}.t" in tensors:
            store.adam[name] = AdamState(
                tensors[f"{name}.m"].copy(),
                tensors[f"{name}.v"].copy(),
                int(tensors[f"{name}.t"]),
            )
