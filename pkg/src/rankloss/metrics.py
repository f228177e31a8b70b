"""Target rank and the NDCG / RR / HR metrics built on it."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

METRIC_KINDS = ("NDCG", "RR", "HR")
# users scored per matmul; fixed so threaded and serial runs see identical blocks
EVAL_CHUNK = 256


@dataclass(frozen=True)
class RankResult:
    rank: int
    tied_count: int


@dataclass
class MetricReport:
    cutoffs: dict = field(default_factory=dict)  # k -> {"ndcg", "hr", "mrr"}
    user_count: int = 0

    def at(self, k: int, name: str) -> float:
        return self.cutoffs[k][name]

    def to_records(self) -> list:
        return [
            {"k": k, "ndcg": v["ndcg"], "hr": v["hr"], "mrr": v["mrr"], "users": self.user_count}
            for k, v in sorted(self.cutoffs.items())
        ]

    def to_json(self) -> str:
        return json.dumps(self.to_records())

    @classmethod
    def from_records(cls, records: list) -> "MetricReport":
        cutoffs = {}
        users = 0
        for r in records:
            cutoffs[int(r["k"])] = {"ndcg": r["ndcg"], "hr": r["hr"], "mrr": r["mrr"]}
            users = int(r["users"])
        return cls(cutoffs=cutoffs, user_count=users)


def rank_of_target(scores, target_index: int) -> RankResult:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    s_pos = scores[target_index]
    rank = int(np.count_nonzero(scores >= s_pos))
    tied = int(np.count_nonzero(scores == s_pos)) - 1
    return RankResult(rank=rank, tied_count=tied)


def ranks_of_targets(scores, target_index) -> np.ndarray:
    """Batched ``r+``: ``scores`` is (B, N), ``target_index`` is (B,)."""
    scores = np.asarray(scores, dtype=np.float64)
    s_pos = np.take_along_axis(scores, np.asarray(target_index)[:, None], axis=1)
    return np.count_nonzero(scores >= s_pos, axis=1)


def metric_value(kind: str, r_plus, k=None):
    """NDCG = 1/log2(1+r), RR = 1/r, HR = 1; zero beyond the cutoff ``k``.

    Accepts a scalar rank or an integer array of ranks.
    """
    r = np.asarray(r_plus)
    if np.any(r < 1):
        raise ValueError("rank must be >= 1")
    if kind == "NDCG":
        value = 1.0 / np.log2(1.0 + r)
    elif kind == "RR":
        value = 1.0 / r
    elif kind == "HR":
        value = np.ones(r.shape)
    else:
        raise ValueError(f"unknown metric {kind!r}")
    if k is not None:
        value = np.where(r > k, 0.0, value)
    if value.ndim == 0:
        return float(value)
    return value


def neg_log_metric(kind: str, r_plus):
    """``-ln metric(r+)`` without a cutoff; the quantity the loss bounds refer to."""
    r = np.asarray(r_plus, dtype=np.float64)
    if kind == "NDCG":
        out = np.log(np.log2(1.0 + r))
    elif kind == "RR":
        out = np.log(r)
    else:
        raise ValueError(f"bounds are defined for NDCG and RR, not {kind!r}")
    return float(out) if out.ndim == 0 else out


def report_from_ranks(ranks, cutoffs) -> MetricReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no users to evaluate")
    out = {}
    for k in sorted(cutoffs):
        out[k] = {
            "ndcg": float(np.mean(metric_value("NDCG", ranks, k))),
            "hr": float(np.mean(metric_value("HR", ranks, k))),
            "mrr": float(np.mean(metric_value("RR", ranks, k))),
        }
    return MetricReport(cutoffs=out, user_count=int(ranks.size))


def evaluate_scorer(params, dataset, split: str = "validation", cutoffs=(1, 5, 10),
                    max_history: int = 50, threads: int = 1) -> MetricReport:
    """Full-catalog evaluation of every user, reduced in ascending user-id order."""
    from .scorer import pool_batch, score_all_batch

    if split not in ("validation", "test"):
        raise ValueError("split must be 'validation' or 'test'")
    users = sorted(dataset.splits)
    if not users:
        raise ValueError("dataset has no users")
    histories, targets = [], []
    for u in users:
        train, val, test = dataset.splits[u]
        if split == "validation":
            histories.append(train)
            targets.append(val)
        else:
            histories.append(list(train) + [val])
            targets.append(test)
    targets = np.asarray(targets)

    def rank_chunk(start):
        stop = min(start + EVAL_CHUNK, len(users))
        pooled = pool_batch(histories[start:stop], params, max_history)
        scores = score_all_batch(pooled, params)
        return ranks_of_targets(scores, targets[start:stop])

    starts = range(0, len(users), EVAL_CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(rank_chunk, starts))
    else:
        chunks = [rank_chunk(s) for s in starts]
    return report_from_ranks(np.concatenate(chunks), cutoffs)


def admissible(kind: str, r_plus: int, m: int) -> bool:
    """Whether ``-ln metric(r+) <= m ln 2`` follows from the rank condition."""
    # integer forms of r <= 2^(2^m) - 1 and r <= 2^m, safe for large m
    r_plus = int(r_plus)
    if kind == "NDCG":
        return r_plus.bit_length() <= 2 ** m
    if kind == "RR":
        return (r_plus - 1).bit_length() <= m
    raise ValueError(f"unknown metric {kind!r}")
