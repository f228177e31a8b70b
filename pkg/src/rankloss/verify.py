"""Randomized and exhaustive checks of the loss identities and bounds.

Each suite returns a list of flat records with the same keys:
``suite, check, query, analytic, empirical, ci, verdict`` plus
suite-specific counters.  A verdict of "violated" in any record makes the
``verify-bounds`` command fail.
"""

from __future__ import annotations

import math

import numpy as np

from . import bounds, losses
from .metrics import neg_log_metric, ranks_of_targets

SUITES = ("identities", "propositions", "lemmas", "binomial", "theorems")
IDENTITY_RTOL = 1e-9
GRID_CATALOG = 100
GRID_SCORE_STD = 2.0


def _record(suite, check, verdict, query=None, analytic=None, empirical=None, ci=None, **extra):
    out = {"suite": suite, "check": check, "query": query or {}, "analytic": analytic,
           "empirical": empirical, "ci": ci, "verdict": verdict}
    out.update(extra)
    return out


def _rel_gap(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def _random_scores(rng, shape, ties=False):
    scale = rng.choice([0.1, 1.0, 5.0])
    scores = rng.normal(0.0, scale, size=shape)
    if ties:
        scores = np.round(scores)
    return scores


def identity_suite(trials: int = 1000, seed: int = 0, block: int = 25):
    """Worst relative gap of each identity over ``trials`` random instances.

    Instances come in blocks that share a catalog size, K, c and alpha.
    """
    rng = np.random.default_rng(seed)
    gaps = {name: 0.0 for name in
            ("sce_alpha1_all_items_vs_ce", "nce_vs_neg", "sce_vs_is_skewed_proposal",
             "ce_eta0_vs_ce_topn_rplus", "ce_topn_full_vs_ce")}

    def worst(name, a, b):
        gaps[name] = max(gaps[name], _rel_gap(a, b))

    remaining, index = trials, 0
    while remaining > 0:
        B = min(block, remaining)
        remaining -= B
        N = int(rng.integers(2, 65))
        scores = _random_scores(rng, (B, N), ties=index % 4 == 0)
        index += 1
        t = rng.integers(0, N, size=B)
        ce = losses.ce_loss(t, scores)
        keep = np.arange(N) != t[:, None]
        others = scores[keep].reshape(B, N - 1)
        worst("sce_alpha1_all_items_vs_ce", losses.sce_loss(scores[np.arange(B), t], others, 1.0), ce)
        worst("ce_topn_full_vs_ce", losses.ce_topn_loss(t, scores, N), ce)
        r_plus = ranks_of_targets(scores, t)
        worst("ce_eta0_vs_ce_topn_rplus", losses.ce_eta_loss(t, scores, 0.0),
              losses.ce_topn_loss(t, scores, r_plus))

        K = int(rng.integers(1, 33))
        catalog = int(rng.integers(K, 10 * K + 2))
        s_pos = _random_scores(rng, B)
        neg = _random_scores(rng, (B, K))
        c = math.log(catalog / K)
        worst("nce_vs_neg", losses.nce_loss(s_pos, neg, c, catalog), losses.neg_loss(s_pos, neg))
        alpha = float(rng.uniform(1.0, 200.0))
        gap = bounds.sce_is_equivalence_check(s_pos, neg, alpha, catalog)
        sce = losses.sce_loss(s_pos, neg, alpha)
        gaps["sce_vs_is_skewed_proposal"] = max(gaps["sce_vs_is_skewed_proposal"],
                                                float(np.max(gap / np.maximum(1.0, np.abs(sce)))))
    return [
        _record("identities", name, "supported" if gap <= IDENTITY_RTOL else "violated",
                query={"instances": trials, "rtol": IDENTITY_RTOL}, empirical=gap, max_rel_gap=gap)
        for name, gap in gaps.items()
    ]


def proposition_suite(trials: int = 10_000, seed: int = 0, ce_trials: int = 100_000):
    """``-ln metric(r+) <= CE_TopN(n)`` for every n >= r+, and the plain CE bound."""
    rng = np.random.default_rng(seed)
    records = []
    sizes = rng.integers(2, 65, size=trials)
    checked = {"NDCG": 0, "RR": 0}
    violations = {"NDCG": 0, "RR": 0}
    worst = {"NDCG": math.inf, "RR": math.inf}
    for N in np.unique(sizes):
        B = int(np.count_nonzero(sizes == N))
        scores = _random_scores(rng, (B, N), ties=bool(rng.integers(2)))
        targets = rng.integers(0, N, size=B)
        r_plus = ranks_of_targets(scores, targets)
        for n in range(1, int(N) + 1):
            live = r_plus <= n
            if not np.any(live):
                continue
            loss = losses.ce_topn_loss(targets[live], scores[live], n)
            for metric in ("NDCG", "RR"):
                lhs = neg_log_metric(metric, r_plus[live])
                ok = bounds._le(lhs, loss)
                checked[metric] += int(live.sum())
                violations[metric] += int(np.count_nonzero(~ok))
                worst[metric] = min(worst[metric], float(np.min(loss - lhs)))
    for metric in ("NDCG", "RR"):
        records.append(_record(
            "propositions", f"ce_topn_all_n_ge_rplus_{metric}",
            "violated" if violations[metric] else "supported",
            query={"vectors": trials, "max_catalog": 64}, instances=checked[metric],
            violations=violations[metric], min_slack=worst[metric]))

    remaining, block = ce_trials, 10_000
    ce_violations, ce_worst = 0, math.inf
    while remaining > 0:
        B = min(block, remaining)
        remaining -= B
        N = int(rng.integers(2, 65))
        scores = _random_scores(rng, (B, N), ties=bool(rng.integers(2)))
        targets = rng.integers(0, N, size=B)
        r_plus = ranks_of_targets(scores, targets)
        loss = losses.ce_loss(targets, scores)
        lhs = neg_log_metric("NDCG", r_plus)
        ce_violations += int(np.count_nonzero(~bounds._le(lhs, loss)))
        ce_worst = min(ce_worst, float(np.min(loss - lhs)))
    records.append(_record("propositions", "ce_unconditional_NDCG",
                           "violated" if ce_violations else "supported",
                           query={"vectors": ce_trials}, instances=ce_trials,
                           violations=ce_violations, min_slack=ce_worst))
    return records


def _lemma_block(kind, rng, B):
    """One block of B random sampled-loss instances: (loss, floor, applicable)."""
    K = int(rng.integers(1, 33))
    catalog = int(rng.integers(K + 1, 50 * K + 2))
    ties = bool(rng.integers(2))
    s_pos = _random_scores(rng, B, ties=ties)
    neg = _random_scores(rng, (B, K), ties=ties)
    if rng.integers(3) == 0:
        # plant negatives at the target score to exercise the equality edge
        neg[:, : K // 2] = s_pos[:, None]
    applicable = np.ones(B, dtype=bool)
    if kind == "NCE":
        c = float(rng.uniform(-5.0, 10.0))
        loss = losses.nce_loss(s_pos, neg, c, catalog)
        xi = np.count_nonzero(losses.nce_corrected_score(neg, c, K, catalog) >= 0, axis=1)
        floor = xi * math.log(2.0)
    elif kind == "NEG":
        loss = losses.neg_loss(s_pos, neg)
        floor = np.count_nonzero(neg >= 0, axis=1) * math.log(2.0)
    elif kind == "SCE":
        alpha = float(rng.choice([1.0, 2.0, 10.0, 100.0, rng.uniform(1.0, 500.0)]))
        loss = losses.sce_loss(s_pos, neg, alpha)
        floor = np.log1p(alpha * np.count_nonzero(neg >= s_pos[:, None], axis=1))
    elif kind == "IS":
        logq = -math.log(catalog)
        loss = losses.is_loss(s_pos, logq, neg, np.full(neg.shape, logq))
        xi = np.count_nonzero(neg >= s_pos[:, None], axis=1)
        applicable = xi >= 1
        floor = np.log(np.maximum(xi, 1))
    else:
        raise ValueError(kind)
    return loss, floor, applicable


def lemma_suite(trials: int = 100_000, seed: int = 0, block: int = 1000):
    records = []
    for offset, kind in enumerate(("NCE", "NEG", "SCE", "IS")):
        rng = np.random.default_rng([seed, offset])
        remaining, violations, checked, worst = trials, 0, 0, math.inf
        while remaining > 0:
            B = min(block, remaining)
            remaining -= B
            loss, floor, live = _lemma_block(kind, rng, B)
            ok = bounds._le(floor[live], loss[live])
            violations += int(np.count_nonzero(~ok))
            checked += int(live.sum())
            if live.any():
                worst = min(worst, float(np.min(loss[live] - floor[live])))
        records.append(_record("lemmas", f"{kind}_floor", "violated" if violations else "supported",
                               query={"loss_kind": kind, "instances": trials}, instances=checked,
                               violations=violations, min_slack=worst))
    return records


def binomial_suite(max_K: int = 20):
    ps = [round(0.05 * i, 2) for i in range(1, 20)]
    violations, checked, worst = 0, 0, math.inf
    for K in range(1, max_K + 1):
        for m in range(0, K + 1):
            for p in ps:
                lemma = bounds.binomial_lemma_bound(K, p, m)
                exact = bounds.binomial_tail_exact(K, p, m)
                checked += 1
                worst = min(worst, exact - lemma)
                if not bounds._le(lemma, exact):
                    violations += 1
    return [_record("binomial", "lemma_le_exact_tail", "violated" if violations else "supported",
                    query={"max_K": max_K, "p_grid": "0.05..0.95"}, instances=checked,
                    violations=violations, min_slack=worst)]


# (loss spec, K, metric, r+). SCE cells keep alpha a power of two no larger than
# 2^m, the range in which the stated SCE probability is a valid lower bound.
THEOREM_GRID = (
    (losses.LossSpec("SCE", K=8, alpha=4.0), 8, "NDCG", 4),
    (losses.LossSpec("SCE", K=256, alpha=1.0), 256, "NDCG", 4),
    (losses.LossSpec("SCE", K=16, alpha=4.0), 16, "NDCG", 8),
    (losses.LossSpec("SCE", K=4, alpha=4.0), 4, "NDCG", 15),
    (losses.LossSpec("NEG", K=8), 8, "NDCG", 3),
    (losses.LossSpec("NEG", K=16), 16, "NDCG", 10),
    (losses.LossSpec("NCE", K=8, c=1.0), 8, "NDCG", 3),
    (losses.LossSpec("NCE", K=16, c=0.5), 16, "NDCG", 10),
    (losses.LossSpec("IS", K=64), 64, "NDCG", 3),
    (losses.LossSpec("IS", K=128), 128, "NDCG", 10),
    (losses.LossSpec("SCE", K=8, alpha=2.0), 8, "RR", 2),
    (losses.LossSpec("SCE", K=16, alpha=4.0), 16, "RR", 4),
    (losses.LossSpec("SCE", K=8, alpha=8.0), 8, "RR", 8),
    (losses.LossSpec("SCE", K=8, alpha=8.0), 8, "RR", 5),
    (losses.LossSpec("NEG", K=8), 8, "RR", 2),
    (losses.LossSpec("NEG", K=32), 32, "RR", 4),
    (losses.LossSpec("NCE", K=8, c=1.0), 8, "RR", 2),
    (losses.LossSpec("NCE", K=32, c=2.0), 32, "RR", 4),
    (losses.LossSpec("IS", K=128), 128, "RR", 2),
    (losses.LossSpec("IS", K=256), 256, "RR", 8),
)


def grid_scores(index: int, r_plus: int, catalog_size: int = GRID_CATALOG):
    """Random distinct scores and the index of the item ranked ``r_plus``."""
    rng = np.random.default_rng([7919, index])
    scores = rng.normal(0.0, GRID_SCORE_STD, size=catalog_size)
    target = int(np.argsort(-scores, kind="stable")[r_plus - 1])
    return scores, target


def theorem_suite(trials: int = 100_000, seed: int = 0, threads: int = 1, grid=THEOREM_GRID):
    records = []
    for i, (spec, K, metric, r_plus) in enumerate(grid):
        scores, target = grid_scores(i, r_plus)
        report = bounds.monte_carlo_bound_probability(scores, target, spec, K, metric, trials=trials,
                                                      seed=seed + i, threads=threads)
        query = {"loss": spec.to_dict(), "metric_kind": metric, "r_plus": r_plus,
                 "catalog_size": scores.size, "K": K, "m": report.m}
        records.append(_record("theorems", f"{spec.kind}_{metric}_r{r_plus}_K{K}", report.holds,
                               query=query, analytic=report.analytic_lower,
                               empirical=report.empirical, ci=report.ci_halfwidth,
                               trials=report.trials))
    return records


def run_suite(name: str, trials=None, seed: int = 0, threads: int = 1):
    if name == "identities":
        return identity_suite(trials or 1000, seed)
    if name == "propositions":
        return proposition_suite(trials or 10_000, seed)
    if name == "lemmas":
        return lemma_suite(trials or 100_000, seed)
    if name == "binomial":
        return binomial_suite()
    if name == "theorems":
        return theorem_suite(trials or 100_000, seed, threads)
    if name == "all":
        out = []
        for suite in SUITES:
            out.extend(run_suite(suite, trials, seed, threads))
        return out
    raise ValueError(f"unknown suite {name!r}; expected one of {SUITES + ('all',)}")

