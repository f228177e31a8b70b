"""Cross-entropy and its sampled approximations, written as ``-s_+ + log Z``.

Every function broadcasts over leading batch axes: a single instance uses
1-d arrays (or scalars), a batch of ``B`` instances uses a leading axis of
length ``B``.  All logs are natural.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

KINDS = ("CE", "CE_TopN", "CE_Eta", "BCE", "BPR", "NCE", "NEG", "IS", "SCE")
FULL_KINDS = ("CE", "CE_TopN", "CE_Eta")
SAMPLED_KINDS = ("NCE", "NEG", "IS", "SCE")
PAIRWISE_KINDS = ("BCE", "BPR")

# keys written for each kind, besides "kind"
_JSON_KEYS = {
    "CE": (),
    "CE_TopN": ("n",),
    "CE_Eta": ("eta",),
    "BCE": (),
    "BPR": (),
    "NCE": ("c", "K"),
    "NEG": ("K",),
    "IS": ("K",),
    "SCE": ("alpha", "K"),
}


@dataclass(frozen=True)
class LossSpec:
    kind: str
    K: int = 1
    n: Optional[int] = None
    eta: Optional[float] = None
    c: Optional[float] = None
    alpha: Optional[float] = None
    catalog_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        for key in _JSON_KEYS[self.kind]:
            if getattr(self, key) is None:
                raise ValueError(f"{self.kind} requires {key!r}")
        if self.kind == "CE_TopN" and self.n < 1:
            raise ValueError("n must be >= 1")
        if self.kind == "CE_Eta" and self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.kind == "SCE" and self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.kind == "NCE" and not math.isfinite(self.c):
            raise ValueError("c must be finite")
        if self.kind in SAMPLED_KINDS and self.K < 1:
            raise ValueError("K must be >= 1 for sampled kinds")
        if self.kind in PAIRWISE_KINDS and self.K != 1:
            raise ValueError(f"{self.kind} uses exactly one negative (K=1)")

    @property
    def num_negatives(self) -> int:
        if self.kind in FULL_KINDS:
            return 0
        return self.K

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for key in _JSON_KEYS[self.kind]:
            out[key] = getattr(self, key)
        if self.catalog_size is not None:
            out["catalog_size"] = self.catalog_size
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "LossSpec":
        data = dict(data)
        kind = data.pop("kind", None)
        if kind not in KINDS:
            raise ValueError(f"unknown loss kind {kind!r}")
        allowed = set(_JSON_KEYS[kind]) | {"catalog_size"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unexpected keys for {kind}: {sorted(unknown)}")
        return cls(kind=kind, **data)

    @classmethod
    def from_json(cls, text: str) -> "LossSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class LossInstance:
    """Scores entering one loss evaluation.

    For the full-catalog kinds ``negative_scores`` is the whole score vector
    and ``target_index`` locates the target inside it; ``target_score`` is
    then ignored.
    """

    target_score: object = 0.0
    negative_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    target_index: Optional[object] = None
    proposal_logprobs: Optional[np.ndarray] = None
    target_proposal_logprob: Optional[object] = None


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("scores must be finite")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _take_target(scores, target_index):
    target_index = np.asarray(target_index)
    return np.take_along_axis(scores, target_index[..., None], axis=-1)[..., 0]


def _masked_ce(scores, target_index, keep):
    s_pos = _take_target(scores, target_index)
    masked = np.where(keep, scores, -np.inf)
    return -s_pos + logsumexp(masked, axis=-1)


def ce_loss(target_index, scores):
    scores = np.asarray(scores, dtype=np.float64)
    _finite(scores)
    s_pos = _take_target(scores, target_index)
    return -s_pos + logsumexp(scores, axis=-1)


def topn_mask(scores, target_index, n):
    """Items whose score ties or beats the n-th largest score, plus the target.

    Tie groups straddling position n are kept whole.
    """
    size = scores.shape[-1]
    n = np.asarray(n)
    if np.any(n < 1) or np.any(n > size):
        raise ValueError(f"n must lie in [1, {size}]")
    # n-th largest value along the last axis
    if n.ndim == 0:
        kth = -np.partition(-scores, int(n) - 1, axis=-1)[..., int(n) - 1]
    else:
        ordered = -np.sort(-scores, axis=-1)
        kth = np.take_along_axis(ordered, (n - 1)[..., None], axis=-1)[..., 0]
    keep = scores >= kth[..., None]
    target_index = np.asarray(target_index)
    np.put_along_axis(keep, target_index[..., None], True, axis=-1)
    return keep


def eta_mask(scores, target_index, eta):
    s_pos = _take_target(scores, target_index)[..., None]
    # the target satisfies its own condition with equality
    keep = scores - s_pos >= -eta * np.abs(s_pos)
    np.put_along_axis(keep, np.asarray(target_index)[..., None], True, axis=-1)
    return keep


def ce_topn_loss(target_index, scores, n):
    scores = np.asarray(scores, dtype=np.float64)
    _finite(scores)
    return _masked_ce(scores, target_index, topn_mask(scores, target_index, n))


def ce_eta_loss(target_index, scores, eta):
    if eta < 0:
        raise ValueError("eta must be >= 0")
    scores = np.asarray(scores, dtype=np.float64)
    _finite(scores)
    return _masked_ce(scores, target_index, eta_mask(scores, target_index, eta))


def bce_loss(target_score, negative_score):
    _finite(target_score, negative_score)
    return softplus(-np.asarray(target_score, dtype=np.float64)) + softplus(negative_score)


def bpr_loss(target_score, negative_score):
    _finite(target_score, negative_score)
    return softplus(np.asarray(negative_score, dtype=np.float64) - target_score)


def nce_corrected_score(score, c, K, catalog_size):
    if K < 1 or catalog_size < 1:
        raise ValueError("K and catalog_size must be >= 1")
    return np.asarray(score, dtype=np.float64) - c - math.log(K / catalog_size)


def neg_loss(target_score, negative_scores):
    negative_scores = np.asarray(negative_scores, dtype=np.float64)
    if negative_scores.shape[-1] == 0:
        raise ValueError("at least one negative is required")
    _finite(target_score, negative_scores)
    return softplus(-np.asarray(target_score, dtype=np.float64)) + softplus(negative_scores).sum(axis=-1)


def nce_loss(target_score, negative_scores, c, catalog_size):
    negative_scores = np.asarray(negative_scores, dtype=np.float64)
    K = negative_scores.shape[-1]
    if K == 0:
        raise ValueError("at least one negative is required")
    return neg_loss(
        nce_corrected_score(target_score, c, K, catalog_size),
        nce_corrected_score(negative_scores, c, K, catalog_size),
    )


def is_loss(target_score, target_proposal_logprob, sample_scores, sample_proposal_logprobs):
    sample_scores = np.asarray(sample_scores, dtype=np.float64)
    sample_proposal_logprobs = np.asarray(sample_proposal_logprobs, dtype=np.float64)
    if sample_scores.shape[-1] == 0:
        raise ValueError("importance sampling needs a non-empty sample set")
    if sample_scores.shape != sample_proposal_logprobs.shape:
        raise ValueError("sample scores and log-probabilities differ in shape")
    _finite(target_score, sample_scores)
    corrected_pos = np.asarray(target_score, dtype=np.float64) - target_proposal_logprob
    return -corrected_pos + logsumexp(sample_scores - sample_proposal_logprobs, axis=-1)


def _sce_logits(target_score, negative_scores, alpha):
    target_score = np.asarray(target_score, dtype=np.float64)
    stacked = np.concatenate(
        [target_score[..., None], negative_scores + math.log(alpha)], axis=-1
    )
    return target_score, stacked


def sce_loss(target_score, negative_scores, alpha):
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    negative_scores = np.asarray(negative_scores, dtype=np.float64)
    if negative_scores.shape[-1] == 0:
        raise ValueError("at least one negative is required")
    _finite(target_score, negative_scores)
    s_pos, logits = _sce_logits(target_score, negative_scores, alpha)
    return -s_pos + logsumexp(logits, axis=-1)


def compute_loss(spec: LossSpec, instance: LossInstance):
    """Dispatch ``instance`` to the loss named by ``spec``."""
    kind = spec.kind
    neg = instance.negative_scores
    if kind in FULL_KINDS:
        if instance.target_index is None:
            raise ValueError(f"{kind} needs target_index into the full score vector")
        if kind == "CE":
            return ce_loss(instance.target_index, neg)
        if kind == "CE_TopN":
            return ce_topn_loss(instance.target_index, neg, spec.n)
        return ce_eta_loss(instance.target_index, neg, spec.eta)
    if kind in PAIRWISE_KINDS:
        neg = np.asarray(neg, dtype=np.float64)
        if neg.shape[-1] != 1:
            raise ValueError(f"{kind} takes exactly one negative")
        fn = bce_loss if kind == "BCE" else bpr_loss
        return fn(instance.target_score, neg[..., 0])
    if kind == "NEG":
        return neg_loss(instance.target_score, neg)
    if kind == "NCE":
        size = spec.catalog_size
        if size is None:
            raise ValueError("NCE needs catalog_size in its LossSpec")
        return nce_loss(instance.target_score, neg, spec.c, size)
    if kind == "SCE":
        return sce_loss(instance.target_score, neg, spec.alpha)
    _check_is_instance(instance)
    return is_loss(
        instance.target_score,
        instance.target_proposal_logprob,
        neg,
        instance.proposal_logprobs,
    )


def _check_is_instance(instance):
    if instance.proposal_logprobs is None or instance.target_proposal_logprob is None:
        raise ValueError("IS needs proposal log-probabilities for target and samples")


def loss_score_gradient(spec: LossSpec, instance: LossInstance):
    """Analytic gradient of the loss with respect to the scores.

    Returns ``(grad_target, grad_others)``.  For sampled and pairwise kinds
    ``grad_others`` lines up with ``instance.negative_scores``.  For the
    full-catalog kinds it is a full-length vector whose target entry is zero;
    the target's gradient is carried by ``grad_target`` alone.
    """
    kind = spec.kind
    neg = np.asarray(instance.negative_scores, dtype=np.float64)
    _finite(neg)
    if kind in FULL_KINDS:
        if instance.target_index is None:
            raise ValueError(f"{kind} needs target_index into the full score vector")
        tidx = np.asarray(instance.target_index)
        if kind == "CE":
            keep = np.ones(neg.shape, dtype=bool)
        elif kind == "CE_TopN":
            keep = topn_mask(neg, tidx, spec.n)
        else:
            keep = eta_mask(neg, tidx, spec.eta)
        masked = np.where(keep, neg, -np.inf)
        probs = np.exp(masked - logsumexp(masked, axis=-1, keepdims=True))
        g_pos = _take_target(probs, tidx) - 1.0
        np.put_along_axis(probs, tidx[..., None], 0.0, axis=-1)
        return g_pos, probs

    s_pos = np.asarray(instance.target_score, dtype=np.float64)
    _finite(s_pos)
    if kind in PAIRWISE_KINDS:
        if neg.shape[-1] != 1:
            raise ValueError(f"{kind} takes exactly one negative")
        if kind == "BCE":
            return sigmoid(s_pos) - 1.0, sigmoid(neg)
        p = sigmoid(neg[..., 0] - s_pos)
        return -p, p[..., None]
    if neg.shape[-1] == 0:
        raise ValueError("at least one negative is required")
    if kind in ("NEG", "NCE"):
        if kind == "NCE":
            if spec.catalog_size is None:
                raise ValueError("NCE needs catalog_size in its LossSpec")
            K = neg.shape[-1]
            s_pos = nce_corrected_score(s_pos, spec.c, K, spec.catalog_size)
            neg = nce_corrected_score(neg, spec.c, K, spec.catalog_size)
        return sigmoid(s_pos) - 1.0, sigmoid(neg)
    if kind == "SCE":
        _, logits = _sce_logits(s_pos, neg, spec.alpha)
        probs = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        return probs[..., 0] - 1.0, probs[..., 1:]
    if kind == "IS":
        _check_is_instance(instance)
        logq = np.asarray(instance.proposal_logprobs, dtype=np.float64)
        corrected = neg - logq
        probs = np.exp(corrected - logsumexp(corrected, axis=-1, keepdims=True))
        return -np.ones_like(s_pos), probs
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_and_gradient(spec: LossSpec, instance: LossInstance):
    return compute_loss(spec, instance), loss_score_gradient(spec, instance)
