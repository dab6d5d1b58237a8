"""Sequential propensity estimation from both views of the click cube.

Two GRUs read a history and score every candidate continuation with a
softmax over embedding dot products:

* item view: given the items ``u`` clicked before ``t``, how likely is item ``i`` next;
* user view: given the users who clicked ``i`` before ``t``, how likely is user ``u`` next.

Scores used as IPS denominators are floored at the clip value ``M``;
the autoregressive training losses use the raw softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .interactions import SequenceIndex
from .layers import pad_sequences, xavier
from .optim import ParameterStore


class PropensityError(ValueError):
    pass


class GruCell:
    """GRU with fused gate weights; column blocks are [update | reset | candidate].

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    n = tanh(x W_n + b_n + r * (h U_n))
    h' = (1 - z) * n + z * h

    The output of a step is the new hidden state.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.w_input = store.add("theta_p", f"{name}.w_input", np.hstack([xavier(rng, dim, dim) for _ in range(3)]))
        self.w_hidden = store.add("theta_p", f"{name}.w_hidden", np.hstack([xavier(rng, dim, dim) for _ in range(3)]))
        self.bias = store.add("theta_p", f"{name}.bias", np.zeros(3 * dim))

    def step(self, x: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        gx = ag.matmul(x, self.w_input) + self.bias
        return self._step_from_gates(gx, h)

    def _step_from_gates(self, gx: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        d = self.dim
        gh = ag.matmul(h, self.w_hidden)
        z = ag.sigmoid(gx[..., :d] + gh[..., :d])
        r = ag.sigmoid(gx[..., d : 2 * d] + gh[..., d : 2 * d])
        n = ag.tanh(gx[..., 2 * d :] + r * gh[..., 2 * d :])
        new = (1.0 - z) * n + z * h
        return new, new

    def run(self, x: Tensor) -> list[Tensor]:
        """Scan ``x`` of shape ``[B, L, d]`` from a zero state; return L outputs of shape ``[B, d]``."""
        batch, length, _ = x.shape
        gates = ag.matmul(x, self.w_input) + self.bias
        h = Tensor(np.zeros((batch, self.dim)))
        outputs = []
        for k in range(length):
            y, h = self._step_from_gates(gates[:, k, :], h)
            outputs.append(y)
        return outputs


def gru_step(cell: GruCell, x, hidden) -> tuple[Tensor, Tensor]:
    x, hidden = ag.as_tensor(x), ag.as_tensor(hidden)
    squeeze = x.ndim == 1
    if squeeze:
        x, hidden = x.reshape(1, -1), hidden.reshape(1, -1)
    if x.shape[-1] != cell.dim or hidden.shape[-1] != cell.dim:
        raise ag.ShapeError(f"gru_step expects width {cell.dim}, got {x.shape} and {hidden.shape}")
    y, z = cell.step(x, hidden)
    if squeeze:
        y = z = y.reshape(cell.dim)
    return y, z


def clip(p, M: float):
    """max{p, M}."""
    return np.maximum(p, M)


class PropensityEstimator:
    """GRU_1 over item histories and GRU_2 over user histories.

    Embedding tables come from the recommender (group ``theta_e``) and are
    never updated by this class's losses unless asked.
    """

    def __init__(self, store: ParameterStore, embeddings, dim: int, clip_value: float = 0.05, seed: int = 0):
        if not 0.0 <= clip_value < 1.0:
            raise PropensityError(f"clip value must lie in [0, 1), got {clip_value}")
        rng = np.random.default_rng([seed, 101])
        self.store = store
        self.embeddings = embeddings
        self.clip_value = clip_value
        self.gru_item = GruCell(store, "gru_item", dim, rng)
        self.gru_user = GruCell(store, "gru_user", dim, rng)

    def _view(self, view: str):
        if view == "item":
            return self.gru_item, self.embeddings.item
        if view == "user":
            return self.gru_user, self.embeddings.user
        raise ValueError(f"view must be 'item' or 'user', got {view!r}")

    # -- scoring

    def next_distribution(self, view: str, histories) -> np.ndarray:
        """Unclipped softmax over the whole vocabulary after each history, ``[B, V]``."""
        cell, table = self._view(view)
        with no_grad():
            final = _final_states(cell, table, histories)
            logits = final @ table.data.T
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def propensities(self, view: str, targets, histories, clip_value: float | None = None) -> np.ndarray:
        M = self.clip_value if clip_value is None else clip_value
        targets = np.asarray(targets, dtype=np.int64)
        _, table = self._view(view)
        if targets.size and (targets.min() < 0 or targets.max() >= table.shape[0]):
            raise IndexError(f"target id out of range for {view} vocabulary of size {table.shape[0]}")
        probs = self.next_distribution(view, histories)
        return clip(probs[np.arange(len(targets)), targets], M)

    def item_view_propensity(self, i: int, h_u) -> float:
        """P~(i, h_u^{<t})."""
        return float(self.propensities("item", [i], [np.asarray(h_u, dtype=np.int64)])[0])

    def user_view_propensity(self, u: int, h_i) -> float:
        """P~(u, h_i^{<t})."""
        return float(self.propensities("user", [u], [np.asarray(h_i, dtype=np.int64)])[0])

    # -- autoregressive losses

    def ar_loss(self, view: str, sequences, train_embeddings: bool = False) -> Tensor:
        """Sum over sequences and positions of -log P(x_m | x_1..x_{m-1}).

        Position 1 is predicted from the zero initial state.
        """
        cell, table = self._view(view)
        sequences = [np.asarray(s, dtype=np.int64) for s in sequences if len(s)]
        if not sequences:
            return Tensor(0.0)
        if not train_embeddings:
            table = Tensor(table.data)
        ids, mask = pad_sequences(sequences, 0)
        batch, length = ids.shape
        contexts = [Tensor(np.zeros((batch, cell.dim)))]
        if length > 1:
            contexts += cell.run(ag.gather_rows(table, ids[:, :-1]))
        h = ag.stack(contexts, axis=1)
        logp = ag.log_softmax(ag.matmul(h, table.transpose()), axis=-1)
        rows, cols = np.nonzero(mask)
        return -ag.sum_(logp[rows, cols, ids[rows, cols]])

    def ar_loss_item_view(self, sequences, train_embeddings: bool = False) -> Tensor:
        return self.ar_loss("item", sequences, train_embeddings)

    def ar_loss_user_view(self, sequences, train_embeddings: bool = False) -> Tensor:
        return self.ar_loss("user", sequences, train_embeddings)


def _final_states(cell: GruCell, table: Tensor, histories) -> np.ndarray:
    """Last GRU output per history (zero vector for an empty one)."""
    histories = [np.asarray(h, dtype=np.int64) for h in histories]
    lengths = np.array([len(h) for h in histories], dtype=np.int64)
    out = np.zeros((len(histories), cell.dim))
    if not len(histories) or lengths.max(initial=0) == 0:
        return out
    ids, _ = pad_sequences(histories, 0)
    outputs = cell.run(ag.gather_rows(Tensor(table.data), ids))
    states = np.stack([o.data for o in outputs], axis=1)
    has = lengths > 0
    out[has] = states[np.flatnonzero(has), lengths[has] - 1]
    return out


@dataclass
class FrequencyPropensity:
    """Static propensities m / max m per item and per user."""

    p_item: np.ndarray
    p_user: np.ndarray


def frequency_propensity(index: SequenceIndex) -> FrequencyPropensity:
    m_i = index.item_clicks.astype(np.float64)
    m_u = index.user_clicks.astype(np.float64)
    if m_i.max(initial=0) <= 0 or m_u.max(initial=0) <= 0:
        raise PropensityError("frequency propensity needs at least one click")
    return FrequencyPropensity(m_i / m_i.max(), m_u / m_u.max())
