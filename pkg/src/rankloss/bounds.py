"""Loss-versus-metric bounds: analytic probabilities, pointwise floors, Monte Carlo.

The inequality under study is ``-ln metric(r+) <= loss``.  The rank
condition ``r+ <= 2^(2^m) - 1`` (NDCG) or ``r+ <= 2^m`` (RR) caps the left
side at ``m ln 2``; the sampled losses clear ``m ln 2`` once enough sampled
items land in the right region, which is a binomial event.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import losses
from .metrics import admissible, neg_log_metric, rank_of_target

BOUND_KINDS = ("NCE", "NEG", "SCE", "IS")
MAX_M = 40
CONFIDENCE = 0.99
MIN_TRIALS = 1000
# trials per independently seeded block; fixed so threading cannot change results
MC_BLOCK = 10_000
# absorbs last-ulp rounding where the bound is tight (e.g. softplus(0) vs ln 2)
COMPARE_RTOL = 1e-12


def _le(lhs, rhs):
    return lhs <= rhs + COMPARE_RTOL * np.maximum(1.0, np.abs(rhs))


@dataclass(frozen=True)
class BoundQuery:
    loss_kind: str
    metric_kind: str
    r_plus: int
    catalog_size: int
    K: int
    alpha: float = 1.0
    s_plus_count: Optional[int] = None
    s_plus_prime_count: Optional[int] = None
    m: Optional[int] = None

    def __post_init__(self):
        if self.loss_kind not in BOUND_KINDS:
            raise ValueError(f"no bound for loss {self.loss_kind!r}")
        if self.metric_kind not in ("NDCG", "RR"):
            raise ValueError(f"no bound for metric {self.metric_kind!r}")
        if not 1 <= self.r_plus <= self.catalog_size:
            raise ValueError("r_plus must lie in [1, catalog_size]")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for count in (self.s_plus_count, self.s_plus_prime_count):
            if count is not None and not 0 <= count <= self.catalog_size:
                raise ValueError("counts must lie in [0, catalog_size]")
        if self.loss_kind == "NEG" and self.s_plus_count is None:
            raise ValueError("NEG needs s_plus_count")
        if self.loss_kind == "NCE" and self.s_plus_prime_count is None:
            raise ValueError("NCE needs s_plus_prime_count")


@dataclass
class BoundReport:
    analytic_lower: float
    empirical: float
    trials: int
    ci_halfwidth: float
    holds: str  # "supported" | "vacuous" | "violated"
    m: Optional[int] = None
    r_plus: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PointwiseCheck:
    holds: bool
    slack: float        # loss - (-ln metric)
    xi: Optional[int]
    floor: Optional[float]
    floor_slack: Optional[float]  # loss - lemma floor
    loss: float
    neg_log_metric: float


def admissible_m(metric_kind: str, r_plus: int) -> int:
    if r_plus < 1:
        raise ValueError("r_plus must be >= 1")
    m = 0
    while not admissible(metric_kind, r_plus, m):
        m += 1
    return m


def bound_at_m(query: BoundQuery, m: int) -> float:
    """The bounding probability for one fixed ``m``."""
    N = query.catalog_size
    if m == 0 and query.loss_kind != "IS":
        # r+ = 1 so the left side is 0, and these losses are nonnegative
        return 1.0
    if query.loss_kind in ("NCE", "NEG"):
        count = query.s_plus_prime_count if query.loss_kind == "NCE" else query.s_plus_count
        q = count / N
        return 1.0 - m * (1.0 - q) ** (query.K // m)
    p = query.r_plus / N
    width = 2.0 ** m
    if query.loss_kind == "SCE":
        return 1.0 - width / query.alpha * (1.0 - p) ** math.floor(query.alpha * query.K / width)
    return 1.0 - width * (1.0 - p) ** math.floor(query.K / width)


def analytic_bound_with_m(query: BoundQuery):
    """Best (value, m) over admissible m up to ``MAX_M``, or at ``query.m`` if set."""
    if query.m is not None:
        return bound_at_m(query, query.m), query.m
    lo = admissible_m(query.metric_kind, query.r_plus)
    best, best_m = -math.inf, lo
    for m in range(lo, MAX_M + 1):
        value = bound_at_m(query, m)
        if value > best:
            best, best_m = value, m
    return best, best_m


def analytic_bound_probability(query: BoundQuery) -> float:
    return analytic_bound_with_m(query)[0]


def binomial_tail_exact(K: int, p: float, m: int) -> float:
    """P(X >= m) for X ~ Binomial(K, p), summed term by term."""
    if K > 64:
        raise ValueError("exact summation is limited to K <= 64")
    if m <= 0:
        return 1.0
    if m > K:
        return 0.0
    terms = [math.comb(K, j) * p ** j * (1.0 - p) ** (K - j) for j in range(m, K + 1)]
    return min(1.0, math.fsum(terms))


def binomial_lemma_bound(K: int, p: float, m: int) -> float:
    """``1 - m (1-p)^floor(K/m)``, a lower bound on P(X >= m)."""
    if not 0 <= m <= K:
        raise ValueError("need 0 <= m <= K")
    if m == 0:
        return 1.0
    return 1.0 - m * (1.0 - p) ** (K // m)


def lemma_counter(spec: losses.LossSpec, instance: losses.LossInstance):
    """The sampled-item count and the loss floor it implies, per loss kind."""
    s_pos = float(instance.target_score)
    neg = np.asarray(instance.negative_scores, dtype=np.float64)
    if spec.kind == "NCE":
        corrected = losses.nce_corrected_score(neg, spec.c, neg.size, spec.catalog_size)
        xi = int(np.count_nonzero(corrected >= 0))
        return xi, xi * math.log(2.0)
    if spec.kind == "NEG":
        xi = int(np.count_nonzero(neg >= 0))
        return xi, xi * math.log(2.0)
    if spec.kind == "SCE":
        xi = int(np.count_nonzero(neg >= s_pos))
        return xi, math.log1p(spec.alpha * xi)
    if spec.kind == "IS":
        xi = int(np.count_nonzero(neg >= s_pos))
        return xi, math.log(xi) if xi > 0 else -math.inf
    return None, None


def pointwise_bound_check(spec: losses.LossSpec, instance: losses.LossInstance, full_scores,
                          target_index: int, metric_kind: str = "NDCG") -> PointwiseCheck:
    """Evaluate the loss against ``-ln metric(r+)`` and against its lemma floor.

    ``full_scores`` fixes ``r+``; for the full-catalog kinds it is also the
    loss input, so ``instance`` may leave ``negative_scores`` empty.
    """
    full_scores = np.asarray(full_scores, dtype=np.float64)
    r_plus = rank_of_target(full_scores, target_index).rank
    lhs = neg_log_metric(metric_kind, r_plus)
    if spec.kind in losses.FULL_KINDS:
        instance = losses.LossInstance(negative_scores=full_scores, target_index=target_index)
    loss = float(losses.compute_loss(spec, instance))
    xi, floor = lemma_counter(spec, instance)
    return PointwiseCheck(
        holds=bool(_le(lhs, loss)),
        slack=loss - lhs,
        xi=xi,
        floor=floor,
        floor_slack=None if floor is None else loss - floor,
        loss=loss,
        neg_log_metric=lhs,
    )


def hoeffding_halfwidth(trials: int, confidence: float = CONFIDENCE) -> float:
    return math.sqrt(math.log(2.0 / (1.0 - confidence)) / (2.0 * trials))


def query_from_scores(full_scores, target: int, spec: losses.LossSpec, K: int,
                      metric_kind: str, m: Optional[int] = None) -> BoundQuery:
    full_scores = np.asarray(full_scores, dtype=np.float64)
    N = full_scores.size
    c = spec.c if spec.kind == "NCE" else 0.0
    corrected = losses.nce_corrected_score(full_scores, c, K, N)
    return BoundQuery(
        loss_kind=spec.kind,
        metric_kind=metric_kind,
        r_plus=rank_of_target(full_scores, target).rank,
        catalog_size=N,
        K=K,
        alpha=spec.alpha if spec.kind == "SCE" else 1.0,
        s_plus_count=int(np.count_nonzero(full_scores >= 0)),
        s_plus_prime_count=int(np.count_nonzero(corrected >= 0)),
        m=m,
    )


def sampled_losses(spec: losses.LossSpec, s_pos: float, sample_scores: np.ndarray,
                   catalog_size: int) -> np.ndarray:
    """Loss per row of ``sample_scores`` (trials, K) with uniform sampling."""
    s_pos = np.full(sample_scores.shape[0], s_pos)
    if spec.kind == "NEG":
        return losses.neg_loss(s_pos, sample_scores)
    if spec.kind == "NCE":
        return losses.nce_loss(s_pos, sample_scores, spec.c, catalog_size)
    if spec.kind == "SCE":
        return losses.sce_loss(s_pos, sample_scores, spec.alpha)
    if spec.kind == "IS":
        logq = math.log(1.0 / catalog_size)
        return losses.is_loss(s_pos, logq, sample_scores, np.full(sample_scores.shape, logq))
    raise ValueError(f"no sampled bound for {spec.kind!r}")


def monte_carlo_bound_probability(full_scores, target: int, spec: losses.LossSpec, K: int,
                                  metric_kind: str = "NDCG", trials: int = 100_000,
                                  seed: int = 0, m: Optional[int] = None,
                                  threads: int = 1) -> BoundReport:
    """Estimate P(-ln metric(r+) <= loss) when K items are drawn uniformly from
    the whole catalog (the target may be drawn)."""
    if trials < MIN_TRIALS:
        raise ValueError(f"need at least {MIN_TRIALS} trials")
    full_scores = np.asarray(full_scores, dtype=np.float64)
    N = full_scores.size
    if spec.kind == "NCE" and spec.catalog_size != N:
        spec = losses.LossSpec("NCE", K=K, c=spec.c, catalog_size=N)
    query = query_from_scores(full_scores, target, spec, K, metric_kind, m)
    analytic, best_m = analytic_bound_with_m(query)
    lhs = neg_log_metric(metric_kind, query.r_plus)
    s_pos = full_scores[target]

    sizes = [min(MC_BLOCK, trials - start) for start in range(0, trials, MC_BLOCK)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))

    def run_block(i):
        rng = np.random.default_rng(seeds[i])
        idx = rng.integers(0, N, size=(sizes[i], K))
        loss = sampled_losses(spec, s_pos, full_scores[idx], N)
        return int(np.count_nonzero(_le(lhs, loss)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            hits = sum(pool.map(run_block, range(len(sizes))))
    else:
        hits = sum(run_block(i) for i in range(len(sizes)))

    empirical = hits / trials
    ci = hoeffding_halfwidth(trials)
    if analytic <= 0:
        verdict = "vacuous"
    elif empirical >= analytic - ci:
        verdict = "supported"
    else:
        verdict = "violated"
    return BoundReport(analytic_lower=analytic, empirical=empirical, trials=trials,
                       ci_halfwidth=ci, holds=verdict, m=best_m, r_plus=query.r_plus)


def sce_is_equivalence_check(target_score, negative_scores, alpha: float, catalog_size: int):
    """|SCE - IS| where IS uses the target-skewed proposal over {target} + negatives.

    Batched inputs (leading axes on both arguments) give an array of gaps.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    neg = np.asarray(negative_scores, dtype=np.float64)
    target = np.asarray(target_score, dtype=np.float64)
    denom = catalog_size - 1 + alpha
    log_target = math.log(alpha / denom)
    log_other = math.log(1.0 / denom)
    sce = losses.sce_loss(target, neg, alpha)
    samples = np.concatenate([target[..., None], neg], axis=-1)
    logq = np.full(samples.shape, log_other)
    logq[..., 0] = log_target
    is_value = losses.is_loss(target, log_target, samples, logq)
    gap = np.abs(sce - is_value)
    return float(gap) if gap.ndim == 0 else gap
