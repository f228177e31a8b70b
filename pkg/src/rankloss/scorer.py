"""Decayed-pooling dot-product scorer with hand-written gradients and Adam.

The query vector is an exponentially decayed average of the history's
input embeddings; an item's score is its output embedding dotted with the
query vector plus a per-item bias.  With ``tied=True`` the input and output
tables are the same matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

INIT_STD = 0.02


@dataclass
class ScorerParams:
    embeddings: np.ndarray                      # (N, d) output item vectors
    bias: Optional[np.ndarray] = None           # (N,)
    decay: float = 0.8
    input_embeddings: Optional[np.ndarray] = None  # (N, d); None when tied

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-d array")
        if self.input_embeddings is not None:
            self.input_embeddings = np.asarray(self.input_embeddings, dtype=np.float64)
            if self.input_embeddings.shape != self.embeddings.shape:
                raise ValueError("input and output tables differ in shape")

    @property
    def item_count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def tied(self) -> bool:
        return self.input_embeddings is None

    @property
    def history_table(self) -> np.ndarray:
        return self.embeddings if self.input_embeddings is None else self.input_embeddings

    def tables(self) -> dict:
        out = {"embeddings": self.embeddings}
        if self.input_embeddings is not None:
            out["input_embeddings"] = self.input_embeddings
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            embeddings=self.embeddings.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            decay=self.decay,
            input_embeddings=None if self.input_embeddings is None else self.input_embeddings.copy(),
        )

    def to_dict(self) -> dict:
        out = {
            "item_count": self.item_count,
            "dim": self.dim,
            "decay": self.decay,
            "tied": self.tied,
            "embeddings": self.embeddings.ravel().tolist(),
            "bias": None if self.bias is None else self.bias.tolist(),
        }
        if not self.tied:
            out["input_embeddings"] = self.input_embeddings.ravel().tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScorerParams":
        shape = (int(data["item_count"]), int(data["dim"]))
        emb = np.asarray(data["embeddings"], dtype=np.float64).reshape(shape)
        bias = data.get("bias")
        inp = data.get("input_embeddings")
        return cls(
            embeddings=emb,
            bias=None if bias is None else np.asarray(bias, dtype=np.float64),
            decay=float(data["decay"]),
            input_embeddings=None if inp is None else np.asarray(inp, dtype=np.float64).reshape(shape),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ScorerParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class HistoryState:
    pooled: np.ndarray
    weights: np.ndarray
    items: np.ndarray


@dataclass
class PooledBatch:
    """Padded batch of pooled histories; padding slots carry zero weight."""

    pooled: np.ndarray   # (B, d)
    items: np.ndarray    # (B, L) item indices
    weights: np.ndarray  # (B, L)


def init_params(catalog_size: int, dim: int, seed: int, decay: float = 0.8,
                tied: bool = False, use_bias: bool = True) -> ScorerParams:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if catalog_size < 1:
        raise ValueError("catalog_size must be >= 1")
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, INIT_STD, size=(catalog_size, dim))
    inp = None if tied else rng.normal(0.0, INIT_STD, size=(catalog_size, dim))
    bias = np.zeros(catalog_size) if use_bias else None
    return ScorerParams(embeddings=emb, bias=bias, decay=decay, input_embeddings=inp)


def pooling_weights(length: int, decay: float) -> np.ndarray:
    """Weights oldest-first: ``w_i = decay^(t-i) / sum_j decay^(t-j)``."""
    w = decay ** np.arange(length - 1, -1, -1, dtype=np.float64)
    return w / w.sum()


def pool_history(history, params: ScorerParams, max_history: int = 50) -> HistoryState:
    items = np.asarray(history, dtype=np.int64)[-max_history:]
    if items.size == 0:
        raise ValueError("history is empty")
    if items.min() < 0 or items.max() >= params.item_count:
        raise IndexError("history item out of range")
    w = pooling_weights(items.size, params.decay)
    return HistoryState(pooled=w @ params.history_table[items], weights=w, items=items)


def pool_batch(histories, params: ScorerParams, max_history: int = 50) -> PooledBatch:
    lengths = [min(len(h), max_history) for h in histories]
    if min(lengths) == 0:
        raise ValueError("history is empty")
    width = max(lengths)
    items = np.zeros((len(histories), width), dtype=np.int64)
    weights = np.zeros((len(histories), width))
    # right-aligned so the most recent item sits in the last column
    for row, (h, n) in enumerate(zip(histories, lengths)):
        items[row, width - n:] = h[len(h) - n:]
        weights[row, width - n:] = pooling_weights(n, params.decay)
    pooled = np.einsum("bl,bld->bd", weights, params.history_table[items])
    return PooledBatch(pooled=pooled, items=items, weights=weights)


def score_item(state: HistoryState, v: int, params: ScorerParams) -> float:
    if not 0 <= v < params.item_count:
        raise IndexError(f"item {v} out of range")
    s = float((params.embeddings[v] * state.pooled).sum())
    if params.bias is not None:
        s += params.bias[v]
    return s


def score_all(state: HistoryState, params: ScorerParams) -> np.ndarray:
    # same elementwise-product reduction as score_item, so entries agree bit for bit
    out = (params.embeddings * state.pooled).sum(axis=1)
    if params.bias is not None:
        out = out + params.bias
    return out


def score_all_batch(batch: PooledBatch, params: ScorerParams) -> np.ndarray:
    scores = batch.pooled @ params.embeddings.T
    if params.bias is not None:
        scores += params.bias
    return scores


def score_candidates(batch: PooledBatch, candidates: np.ndarray, params: ScorerParams) -> np.ndarray:
    """Scores for a (B, C) array of candidate indices."""
    scores = np.einsum("bd,bcd->bc", batch.pooled, params.embeddings[candidates])
    if params.bias is not None:
        scores += params.bias[candidates]
    return scores


@dataclass
class SparseGrad:
    """Row-sparse gradient: for each table, the touched rows and their values."""

    rows: dict = field(default_factory=dict)    # table name -> (n,) int
    values: dict = field(default_factory=dict)  # table name -> (n, d) or (n,)

    def dense(self, params: ScorerParams) -> dict:
        out = {}
        for name, table in params.tables().items():
            g = np.zeros_like(table)
            if name in self.rows:
                g[self.rows[name]] = self.values[name]
            out[name] = g
        return out


def _segment_sum(indices, values):
    """Sum ``values`` rows sharing an index; returns (unique_indices, sums)."""
    indices = np.asarray(indices).ravel()
    return _scatter(indices, np.ones(indices.size), np.arange(indices.size), values)


def _scatter(indices, coeffs, sources, dense):
    """For each unique index u, sum ``coeffs[j] * dense[sources[j]]`` over j with indices[j] == u."""
    unique, inverse = np.unique(indices, return_inverse=True)
    gather = sparse.csr_matrix((coeffs, (inverse.ravel(), sources)),
                               shape=(unique.size, dense.shape[0]))
    return unique, np.asarray(gather @ dense)


def batch_gradients(batch: PooledBatch, params: ScorerParams, score_grads: np.ndarray,
                    candidates: Optional[np.ndarray] = None) -> SparseGrad:
    """Chain rule from per-score gradients to parameter gradients.

    ``score_grads`` is (B, C) against ``candidates`` (B, C); with
    ``candidates=None`` it is (B, N) against the whole catalog.
    """
    B, d = batch.pooled.shape
    grad = SparseGrad()
    if candidates is None:
        out_rows = np.arange(params.item_count)
        out_vals = score_grads.T @ batch.pooled
        grad_pooled = score_grads @ params.embeddings
        bias_vals = score_grads.sum(axis=0)
    else:
        C = candidates.shape[1]
        owner = np.repeat(np.arange(B), C)
        flat = candidates.ravel()
        # pooled gets a trailing ones column so the bias sum rides along
        extended = np.hstack([batch.pooled, np.ones((B, 1))])
        out_rows, sums = _scatter(flat, score_grads.ravel(), owner, extended)
        out_vals, bias_vals = sums[:, :d], sums[:, d]
        grad_pooled = np.einsum("bc,bcd->bd", score_grads, params.embeddings[candidates])

    live = batch.weights.ravel() > 0
    owner = np.repeat(np.arange(B), batch.items.shape[1])[live]
    hist_rows, hist_vals = _scatter(batch.items.ravel()[live], batch.weights.ravel()[live],
                                    owner, grad_pooled)

    if params.tied:
        rows, vals = _segment_sum(np.r_[out_rows, hist_rows], np.vstack([out_vals, hist_vals]))
        grad.rows["embeddings"], grad.values["embeddings"] = rows, vals
    else:
        grad.rows["embeddings"], grad.values["embeddings"] = out_rows, out_vals
        grad.rows["input_embeddings"], grad.values["input_embeddings"] = hist_rows, hist_vals
    if params.bias is not None:
        grad.rows["bias"], grad.values["bias"] = out_rows, bias_vals
    return grad


def scorer_gradients(history, target: int, negatives, loss_grads, params: ScorerParams,
                     max_history: int = 50) -> SparseGrad:
    """Gradient for one example.

    ``loss_grads`` holds dl/ds for the target followed by each negative.
    """
    candidates = np.asarray([target, *negatives], dtype=np.int64)[None, :]
    loss_grads = np.asarray(loss_grads, dtype=np.float64)[None, :]
    if loss_grads.shape != candidates.shape:
        raise ValueError("need one score gradient per candidate (target first)")
    batch = pool_batch([list(history)], params, max_history)
    return batch_gradients(batch, params, loss_grads, candidates)


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def init_adam(params: ScorerParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    tables = params.tables()
    return AdamState(
        first_moment={k: np.zeros_like(v) for k, v in tables.items()},
        second_moment={k: np.zeros_like(v) for k, v in tables.items()},
        lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def adam_step(params: ScorerParams, grads: SparseGrad, state: AdamState):
    """Bias-corrected Adam applied to the touched rows only (in place)."""
    for vals in grads.values.values():
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    tables = params.tables()
    for name, rows in grads.rows.items():
        g = grads.values[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m_rows = b1 * m[rows] + (1.0 - b1) * g
        v_rows = b2 * v[rows] + (1.0 - b2) * g * g
        m[rows], v[rows] = m_rows, v_rows
        m_hat = m_rows / (1.0 - b1 ** t)
        v_hat = v_rows / (1.0 - b2 ** t)
        tables[name][rows] -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state
