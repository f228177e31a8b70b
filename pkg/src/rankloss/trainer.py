"""Training loop, convergence-epoch detection and the hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import losses
from .losses import LossInstance, LossSpec
from .metrics import MetricReport, evaluate_scorer
from .sampling import sample_uniform_batch
from .scorer import (PooledBatch, adam_step, batch_gradients, init_adam, init_params,
                     pooling_weights, score_all_batch, score_candidates)

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


def default_epochs(kind: str) -> int:
    return 200 if kind in losses.FULL_KINDS else 300


@dataclass
class TrainConfig:
    loss: LossSpec = field(default_factory=lambda: LossSpec("CE"))
    epochs: Optional[int] = None  # None: 200 for full-catalog losses, 300 otherwise
    lr: float = 1e-3
    batch_size: int = 128
    max_history: int = 50
    sliding_window: bool = False
    eval_every: int = 1
    seed: int = 0
    cutoffs: tuple = (1, 5, 10)
    dim: int = 64
    decay: float = 0.8
    tied: bool = False
    use_bias: bool = True
    include_target: bool = False
    replacement: bool = True
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec.from_dict(self.loss)
        self.cutoffs = tuple(sorted(set(int(k) for k in self.cutoffs) | {10}))
        if self.epochs is None:
            self.epochs = default_epochs(self.loss.kind)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.max_history < 1:
            raise ValueError("max_history must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["loss"] = self.loss.to_dict()
        out["cutoffs"] = list(self.cutoffs)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    seconds: float
    validation: Optional[MetricReport] = None


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    test: Optional[MetricReport] = None
    best_epoch: Optional[int] = None
    params: object = None  # best-validation ScorerParams
    config: Optional[TrainConfig] = None

    def validation_series(self, metric: str = "ndcg", k: int = 10):
        return [(e.epoch, e.validation.at(k, metric)) for e in self.epochs if e.validation is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "ndcg@10", "hr@10", "mrr@10"])
        for e in self.epochs:
            v = e.validation
            metrics = ["", "", ""] if v is None else [repr(v.at(10, m)) for m in ("ndcg", "hr", "mrr")]
            writer.writerow([e.epoch, repr(e.train_loss), *metrics])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "epochs": [
                {"epoch": e.epoch, "train_loss": e.train_loss,
                 "validation": None if e.validation is None else e.validation.to_records()}
                for e in self.epochs
            ],
            "best_epoch": self.best_epoch,
            "test": None if self.test is None else self.test.to_records(),
            "config": None if self.config is None else self.config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class TrainingExamples:
    items: np.ndarray    # (E, L) right-aligned history
    weights: np.ndarray  # (E, L)
    targets: np.ndarray  # (E,)

    def __len__(self):
        return self.targets.size


def build_examples(dataset, max_history: int, decay: float, sliding_window: bool) -> TrainingExamples:
    """Next-item examples from every training prefix.

    Without the sliding window only the last ``max_history + 1`` items of a
    prefix yield examples, as a model truncated to ``max_history`` would see.
    """
    histories, targets = [], []
    for user in dataset.users:
        prefix = dataset.splits[user][0]
        first = 1 if sliding_window else max(1, len(prefix) - max_history)
        for t in range(first, len(prefix)):
            histories.append(prefix[max(0, t - max_history):t])
            targets.append(prefix[t])
    if not targets:
        raise ValueError("dataset yields no training examples")
    width = max(len(h) for h in histories)
    items = np.zeros((len(histories), width), dtype=np.int64)
    weights = np.zeros((len(histories), width))
    table = {n: pooling_weights(n, decay) for n in range(1, width + 1)}
    for row, h in enumerate(histories):
        items[row, width - len(h):] = h
        weights[row, width - len(h):] = table[len(h)]
    return TrainingExamples(items=items, weights=weights, targets=np.asarray(targets, dtype=np.int64))


def _streams(seed: int):
    init_seq, shuffle_seq, negative_seq = np.random.SeedSequence(seed).spawn(3)
    return (int(init_seq.generate_state(1)[0]), np.random.default_rng(shuffle_seq),
            np.random.default_rng(negative_seq))


def batch_loss_and_score_grads(spec: LossSpec, batch: PooledBatch, targets, params, rng,
                               include_target: bool = False, replacement: bool = True):
    """Per-example losses plus dl/ds, with the candidate layout they refer to."""
    N = params.item_count
    if spec.kind in losses.FULL_KINDS:
        scores = score_all_batch(batch, params)
        inst = LossInstance(negative_scores=scores, target_index=targets)
        value = losses.compute_loss(spec, inst)
        g_pos, g_all = losses.loss_score_gradient(spec, inst)
        g_all[np.arange(targets.size), targets] += g_pos
        return value, g_all, None
    K = spec.num_negatives
    negatives = sample_uniform_batch(K, N, targets, rng, include_target=include_target,
                                     replacement=replacement)
    candidates = np.concatenate([targets[:, None], negatives], axis=1)
    scores = score_candidates(batch, candidates, params)
    inst = LossInstance(target_score=scores[:, 0], negative_scores=scores[:, 1:])
    if spec.kind == "IS":
        inst.proposal_logprobs = np.full(negatives.shape, -math.log(N))
        inst.target_proposal_logprob = -math.log(N)
    if spec.kind == "NCE" and spec.catalog_size != N:
        spec = replace(spec, catalog_size=N)
    value = losses.compute_loss(spec, inst)
    g_pos, g_neg = losses.loss_score_gradient(spec, inst)
    return value, np.concatenate([np.asarray(g_pos)[:, None], g_neg], axis=1), candidates


def train(config: TrainConfig, dataset, on_epoch=None, on_step=None) -> RunRecord:
    """``on_step(epoch, step, mean_loss)`` sees every optimizer step."""
    N = dataset.item_count
    spec = config.loss
    if spec.kind == "NCE":
        spec = replace(spec, catalog_size=N)
    if spec.kind == "CE_TopN" and spec.n > N:
        raise ValueError("CE_TopN n exceeds catalog size")
    if spec.kind in losses.SAMPLED_KINDS and not config.replacement:
        pool = N if config.include_target else N - 1
        if spec.K > pool:
            raise ValueError(f"cannot draw {spec.K} distinct negatives from {pool} items")

    init_seed, shuffle_rng, negative_rng = _streams(config.seed)
    params = init_params(N, config.dim, init_seed, decay=config.decay, tied=config.tied,
                         use_bias=config.use_bias)
    adam = init_adam(params, lr=config.lr)
    examples = build_examples(dataset, config.max_history, config.decay, config.sliding_window)

    record = RunRecord(config=config)
    best = -math.inf
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(examples))
        total = 0.0
        for lo in range(0, order.size, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            items, weights, targets = examples.items[idx], examples.weights[idx], examples.targets[idx]
            pooled = np.einsum("bl,bld->bd", weights, params.history_table[items])
            batch = PooledBatch(pooled=pooled, items=items, weights=weights)
            value, score_grads, candidates = batch_loss_and_score_grads(
                spec, batch, targets, params, negative_rng,
                include_target=config.include_target, replacement=config.replacement)
            batch_total = float(np.sum(value))
            if not math.isfinite(batch_total):
                raise TrainingDiverged(
                    f"non-finite {spec.kind} loss at epoch {epoch}, batch starting {lo}")
            total += batch_total
            if on_step is not None:
                on_step(epoch, lo // config.batch_size, batch_total / idx.size)
            grads = batch_gradients(batch, params, score_grads / idx.size, candidates)
            adam_step(params, grads, adam)
        entry = EpochRecord(epoch=epoch, train_loss=total / len(examples),
                            seconds=time.perf_counter() - start)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            entry.validation = evaluate_scorer(params, dataset, "validation", config.cutoffs,
                                               config.max_history, config.threads)
            score = entry.validation.at(10, "ndcg")
            if score > best:
                best = score
                record.best_epoch = epoch
                record.params = params.copy()
        record.epochs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        logger.debug("epoch %d loss %.5f", epoch, entry.train_loss)
    record.test = evaluate_scorer(record.params, dataset, "test", config.cutoffs,
                                  config.max_history, config.threads)
    return record


def measure_step_time(spec: LossSpec, catalog_size: int = 5000, batch_size: int = 128,
                      dim: int = 64, history: int = 10, repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` seconds for one batch: sampling, scoring, loss and score gradients."""
    rng = np.random.default_rng(seed)
    params = init_params(catalog_size, dim, seed)
    items = rng.integers(0, catalog_size, size=(batch_size, history))
    weights = np.tile(pooling_weights(history, params.decay), (batch_size, 1))
    pooled = np.einsum("bl,bld->bd", weights, params.history_table[items])
    batch = PooledBatch(pooled=pooled, items=items, weights=weights)
    targets = rng.integers(0, catalog_size, size=batch_size)
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        batch_loss_and_score_grads(spec, batch, targets, params, rng)
        best = min(best, time.perf_counter() - start)
    return best


def convergence_epoch(record: RunRecord, fraction: float = 0.99, metric: str = "ndcg",
                      k: int = 10) -> int:
    """First evaluated epoch whose validation metric reaches ``fraction`` of the run maximum."""
    series = record.validation_series(metric, k) if isinstance(record, RunRecord) else list(record)
    if not series:
        raise ValueError("record has no validation entries")
    peak = max(v for _, v in series)
    for epoch, value in series:
        if value >= fraction * peak:
            return epoch
    raise AssertionError("unreachable: the peak itself crosses the threshold")


def converged(record: RunRecord, fraction: float = 0.99) -> bool:
    """False when the threshold is first crossed only at the final evaluation."""
    series = record.validation_series()
    return convergence_epoch(record, fraction) < series[-1][0]


def _summary(record: RunRecord) -> dict:
    series = record.validation_series()
    return {
        "best_val_ndcg@10": max(v for _, v in series),
        "best_epoch": record.best_epoch,
        "convergence_epoch": convergence_epoch(record),
        "converged": converged(record),
        "test_ndcg@10": record.test.at(10, "ndcg"),
        "test_hr@10": record.test.at(10, "hr"),
        "test_mrr@10": record.test.at(10, "mrr"),
    }


def _with_loss(base: TrainConfig, spec: LossSpec) -> TrainConfig:
    return replace(base, loss=spec)


def run_eta_sweep(base: TrainConfig, etas, dataset) -> list:
    rows = []
    for eta in etas:
        rec = train(_with_loss(base, LossSpec("CE_Eta", eta=float(eta))), dataset)
        rows.append({"loss": "CE_Eta", "eta": float(eta), **_summary(rec)})
    rec = train(_with_loss(base, LossSpec("CE")), dataset)
    rows.append({"loss": "CE", "eta": math.inf, **_summary(rec)})
    return rows


def run_c_sweep(base: TrainConfig, cs, dataset) -> list:
    K = base.loss.K if base.loss.kind in losses.SAMPLED_KINDS else 1
    rows = []
    for c in cs:
        rec = train(_with_loss(base, LossSpec("NCE", K=K, c=float(c))), dataset)
        rows.append({"loss": "NCE", "c": float(c), "K": K, **_summary(rec)})
    return rows


def run_k_sweep(base: TrainConfig, Ks, dataset) -> list:
    """Same loss family at several negative counts."""
    rows = []
    for K in Ks:
        spec = replace(base.loss, K=int(K))
        rec = train(_with_loss(base, spec), dataset)
        rows.append({**spec.to_dict(), **_summary(rec)})
    return rows


def run_alpha_k_grid(base: TrainConfig, alphas, Ks, dataset) -> list:
    rows = []
    for alpha in alphas:
        for K in Ks:
            rec = train(_with_loss(base, LossSpec("SCE", K=int(K), alpha=float(alpha))), dataset)
            rows.append({"loss": "SCE", "alpha": float(alpha), "K": int(K), **_summary(rec)})
    rec = train(_with_loss(base, LossSpec("CE")), dataset)
    rows.append({"loss": "CE", "alpha": None, "K": None, **_summary(rec)})
    return rows


def run_length_sweep(base: TrainConfig, lengths, dataset) -> list:
    rows = []
    for L in lengths:
        rec = train(replace(base, max_history=int(L)), dataset)
        rows.append({"loss": base.loss.kind, "max_history": int(L),
                     "sliding_window": base.sliding_window, **_summary(rec)})
    return rows


def rows_to_csv(rows: list) -> str:
    if not rows:
        return ""
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})
    return buf.getvalue()
