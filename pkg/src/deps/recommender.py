"""Dual-transformer preference model.

``r_hat = sigmoid(MLP([e(h_u) || e(i) || e(h_i) || e(u)]))`` where
``e(h_u)`` mean-pools a transformer over the user's item history and
``e(h_i)`` mean-pools a second transformer over the item's user history.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .layers import LayerNorm, Linear, pad_sequences
from .optim import ParameterStore, load_checkpoint, save_checkpoint


@dataclass
class ModelConfig:
    n_users: int
    n_items: int
    dim: int = 16
    layers: int = 2
    heads: int = 2
    max_len: int = 50
    dropout: float = 0.1
    ffn_mult: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("vocabularies must be non-empty")


class VocabEmbedding:
    """One vocabulary's table plus its padding and mask tokens (all theta_e)."""

    def __init__(self, store: ParameterStore, name: str, size: int, dim: int, rng):
        self.size = size
        self.table = store.add("theta_e", f"{name}.table", rng.normal(0.0, 1.0, size=(size, dim)))
        self.pad_token = store.add("theta_e", f"{name}.pad_token", rng.normal(0.0, 0.1, size=(1, dim)))
        self.mask_token = store.add("theta_e", f"{name}.mask_token", rng.normal(0.0, 0.1, size=(1, dim)))

    @property
    def pad_id(self) -> int:
        return self.size

    @property
    def mask_id(self) -> int:
        return self.size + 1

    def with_specials(self) -> Tensor:
        return ag.concat([self.table, self.pad_token, self.mask_token], axis=0)


class Embeddings:
    def __init__(self, store: ParameterStore, n_users: int, n_items: int, dim: int, rng):
        self.users = VocabEmbedding(store, "user", n_users, dim, rng)
        self.items = VocabEmbedding(store, "item", n_items, dim, rng)

    # the propensity GRUs use the bare tables
    @property
    def user(self) -> Tensor:
        return self.users.table

    @property
    def item(self) -> Tensor:
        return self.items.table


class TransformerEncoder:
    """Post-norm encoder stack with learned positions (group theta_t)."""

    def __init__(self, store: ParameterStore, name: str, cfg: ModelConfig, rng):
        d, g = cfg.dim, "theta_t"
        self.dim, self.heads = d, cfg.heads
        self.dropout = cfg.dropout
        self.position = store.add(g, f"{name}.position", rng.normal(0.0, 0.1, size=(cfg.max_len + 1, d)))
        self.blocks = []
        for k in range(cfg.layers):
            p = f"{name}.layer{k}"
            self.blocks.append(
                {
                    "q": Linear(store, g, f"{p}.query", d, d, rng),
                    "k": Linear(store, g, f"{p}.key", d, d, rng),
                    "v": Linear(store, g, f"{p}.value", d, d, rng),
                    "o": Linear(store, g, f"{p}.out", d, d, rng),
                    "ln1": LayerNorm(store, g, f"{p}.norm1", d),
                    "ff1": Linear(store, g, f"{p}.ff1", d, cfg.ffn_mult * d, rng),
                    "ff2": Linear(store, g, f"{p}.ff2", cfg.ffn_mult * d, d, rng),
                    "ln2": LayerNorm(store, g, f"{p}.norm2", d),
                }
            )

    def __call__(self, x: Tensor, mask: np.ndarray, training: bool = False, rng=None) -> Tensor:
        batch, length, d = x.shape
        if length > self.position.shape[0]:
            raise ag.ShapeError(f"sequence length {length} exceeds position table {self.position.shape[0]}")
        h, dh = self.heads, d // self.heads
        x = x + self.position[:length]
        key_bias = np.where(mask, 0.0, -1e9)[:, None, None, :]
        for blk in self.blocks:

            def heads(t: Tensor) -> Tensor:
                return t.reshape(batch, length, h, dh).transpose(0, 2, 1, 3)

            q, k, v = heads(blk["q"](x)), heads(blk["k"](x)), heads(blk["v"](x))
            scores = ag.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)) + key_bias
            attn = ag.dropout(ag.softmax(scores, axis=-1), self.dropout, rng, training)
            ctx = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(batch, length, d)
            x = blk["ln1"](x + blk["o"](ctx))
            ff = blk["ff2"](ag.relu(blk["ff1"](x)))
            x = blk["ln2"](x + ag.dropout(ff, self.dropout, rng, training))
        return x


class DepsModel:
    """Embeddings (theta_e), two transformers (theta_t) and the MLP head (theta_m).

    The propensity GRUs (theta_p) are attached later to the same store by
    :class:`deps.propensity.PropensityEstimator`.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng([seed, 7])
        self.embeddings = Embeddings(self.store, cfg.n_users, cfg.n_items, cfg.dim, rng)
        self.transformer_item = TransformerEncoder(self.store, "transformer_item", cfg, rng)
        self.transformer_user = TransformerEncoder(self.store, "transformer_user", cfg, rng)
        self.mlp_hidden = Linear(self.store, "theta_m", "mlp.hidden", 4 * cfg.dim, cfg.dim, rng)
        self.mlp_out = Linear(self.store, "theta_m", "mlp.out", cfg.dim, 1, rng)
        self.training = False
        self.dropout_rng = np.random.default_rng([seed, 11])

    # -- encoders

    def _encode(self, encoder: TransformerEncoder, vocab: VocabEmbedding, ids: np.ndarray, mask: np.ndarray):
        x = ag.gather_rows(vocab.with_specials(), ids)
        return encoder(x, mask, self.training, self.dropout_rng), mask

    def _encode_pooled(self, encoder: TransformerEncoder, vocab: VocabEmbedding, histories) -> Tensor:
        """Mean-pooled encodings of a batch of histories, ``[B, d]``.

        Each row is padded to a width fixed by its own length (next power of
        two, capped at max_len) and rows of equal width are encoded together,
        so a row's result never depends on the rest of the batch.
        """
        seqs = [np.asarray(h, dtype=np.int64)[-self.cfg.max_len :] for h in histories]
        # empty history -> a single learned padding token
        seqs = [s if len(s) else np.array([vocab.pad_id]) for s in seqs]
        widths = np.array([canonical_width(len(s), self.cfg.max_len) for s in seqs])
        parts, order = [], []
        for width in np.unique(widths):
            rows = np.flatnonzero(widths == width)
            ids, mask = pad_sequences([seqs[r] for r in rows], vocab.pad_id, int(width))
            out, _ = self._encode(encoder, vocab, ids, mask)
            parts.append(ag.masked_mean(out, mask))
            order.append(rows)
        if len(parts) == 1:
            return parts[0]
        order = np.concatenate(order)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return ag.concat(parts, axis=0)[inverse]

    def encode_item_history(self, histories) -> Tensor:
        """e(h_u^{<t}) for a batch of item-id histories, ``[B, d]``."""
        return self._encode_pooled(self.transformer_item, self.embeddings.items, histories)

    def encode_user_history(self, histories) -> Tensor:
        """e(h_i^{<t}) for a batch of user-id histories, ``[B, d]``."""
        return self._encode_pooled(self.transformer_user, self.embeddings.users, histories)

    # -- prediction

    def head_logits(self, enc_hu: Tensor, items, enc_hi: Tensor, users) -> Tensor:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        features = ag.concat(
            [
                enc_hu,
                ag.gather_rows(self.embeddings.items.table, items),
                enc_hi,
                ag.gather_rows(self.embeddings.users.table, users),
            ],
            axis=-1,
        )
        hidden = ag.relu(self.mlp_hidden(features))
        return self.mlp_out(hidden).reshape(-1)

    def logits(self, users, items, item_histories, user_histories) -> Tensor:
        """Pre-sigmoid scores; ``item_histories`` are the h_u, ``user_histories`` the h_i."""
        return self.head_logits(
            self.encode_item_history(item_histories),
            items,
            self.encode_user_history(user_histories),
            users,
        )

    def predict(self, users, items, item_histories, user_histories) -> np.ndarray:
        """r_hat in (0, 1) per pair, evaluated without dropout or graph."""
        was = self.training
        self.training = False
        try:
            with no_grad():
                return ag.sigmoid(self.logits(users, items, item_histories, user_histories)).data
        finally:
            self.training = was

    def predict_one(self, u: int, i: int, h_u, h_i) -> float:
        return float(self.predict([u], [i], [h_u], [h_i])[0])

    # -- masked-token pretraining

    def mlm_loss(self, sequences, view: str, mask_prob: float, rng: np.random.Generator) -> Tensor:
        """Mean -log softmax of the true token at masked positions.

        ``view="item"`` runs transformer_item over item sequences and scores
        against the item table; ``view="user"`` is the dual.
        """
        if not 0.0 < mask_prob < 1.0:
            raise ValueError(f"mask_prob must lie in (0, 1), got {mask_prob}")
        if view == "item":
            encoder, vocab = self.transformer_item, self.embeddings.items
        elif view == "user":
            encoder, vocab = self.transformer_user, self.embeddings.users
        else:
            raise ValueError(f"view must be 'item' or 'user', got {view!r}")
        seqs = [np.asarray(s, dtype=np.int64)[-self.cfg.max_len :] for s in sequences if len(s)]
        if not seqs:
            return Tensor(0.0)
        ids, mask = pad_sequences(seqs, vocab.pad_id)
        chosen = select_mask_positions([len(s) for s in seqs], mask_prob, rng, ids.shape[1])
        targets = ids[chosen]
        masked_ids = ids.copy()
        masked_ids[chosen] = vocab.mask_id
        out, _ = self._encode(encoder, vocab, masked_ids, mask)
        rows, cols = np.nonzero(chosen)
        picked = out[rows, cols]
        logp = ag.log_softmax(ag.matmul(picked, vocab.table.transpose()), axis=-1)
        return -ag.mean(logp[np.arange(len(rows)), targets])

    # -- persistence

    def save(self, checkpoint: str | Path, manifest: str | Path | None = None, extra: dict | None = None):
        save_checkpoint(checkpoint, self.store)
        if manifest is not None:
            doc = {"model": asdict(self.cfg)}
            if extra:
                doc.update(extra)
            Path(manifest).write_text(json.dumps(doc, indent=2, sort_keys=True))

    def load(self, checkpoint: str | Path) -> None:
        load_checkpoint(checkpoint, self.store)


def canonical_width(length: int, max_len: int) -> int:
    width = 1
    while width < length:
        width *= 2
    return min(width, max(max_len, length))


def select_mask_positions(lengths, mask_prob: float, rng: np.random.Generator, width: int) -> np.ndarray:
    """Boolean ``[B, width]``: each valid position with prob ``mask_prob``, at least one per row."""
    lengths = np.asarray(lengths, dtype=np.int64)
    valid = np.arange(width)[None, :] < lengths[:, None]
    chosen = (rng.random((len(lengths), width)) < mask_prob) & valid
    empty = ~chosen.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        chosen[rows, (rng.random(len(rows)) * lengths[rows]).astype(np.int64)] = True
    return chosen
