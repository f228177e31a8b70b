"""Uniform negative samplers and the target-skewed proposal that turns IS into SCE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

# sampling more than this share of the catalog defeats the point of sampling
LARGE_K_FRACTION = 0.05


@dataclass(frozen=True)
class SamplerConfig:
    K: int
    include_target: bool = False
    replacement: bool = True
    seed: int = 0

    def validate(self, catalog_size: int) -> None:
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.replacement:
            pool = catalog_size if self.include_target else catalog_size - 1
            if self.K > pool:
                raise ValueError(f"cannot draw {self.K} distinct items from {pool} candidates")
        if self.K > LARGE_K_FRACTION * catalog_size:
            warnings.warn(
                f"K={self.K} exceeds {LARGE_K_FRACTION:.0%} of the {catalog_size}-item catalog",
                stacklevel=2,
            )

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_uniform_batch(K: int, catalog_size: int, targets, rng: np.random.Generator,
                         include_target: bool = False, replacement: bool = True) -> np.ndarray:
    """(B, K) uniform draws, one row per target."""
    targets = np.asarray(targets, dtype=np.int64)
    B = targets.shape[0]
    if replacement:
        if include_target:
            return rng.integers(0, catalog_size, size=(B, K))
        if catalog_size < 2:
            raise ValueError("no candidate besides the target")
        draws = rng.integers(0, catalog_size - 1, size=(B, K))
        # skip over the target to stay uniform on the other items
        return draws + (draws >= targets[:, None])
    pool = catalog_size if include_target else catalog_size - 1
    if K > pool:
        raise ValueError(f"cannot draw {K} distinct items from {pool} candidates")
    keys = rng.random((B, catalog_size))
    if not include_target:
        keys[np.arange(B), targets] = 2.0
    return np.argsort(keys, axis=1, kind="stable")[:, :K]


def sample_uniform_negatives(config: SamplerConfig, catalog_size: int, target: int,
                             rng: np.random.Generator) -> list:
    config.validate(catalog_size)
    rows = sample_uniform_batch(config.K, catalog_size, [target], rng,
                                include_target=config.include_target,
                                replacement=config.replacement)
    return rows[0].tolist()


@dataclass(frozen=True)
class ProposalDistribution:
    target_index: int
    target_mass: float
    other_mass: float
    catalog_size: int

    def __post_init__(self):
        total = self.target_mass + (self.catalog_size - 1) * self.other_mass
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"proposal masses sum to {total}, not 1")

    def mass(self, v) -> np.ndarray:
        v = np.asarray(v)
        return np.where(v == self.target_index, self.target_mass, self.other_mass)

    def logprob(self, v) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.mass(v))


def build_sce_proposal(alpha: float, catalog_size: int, target: int) -> ProposalDistribution:
    """Target gets ``alpha / (N - 1 + alpha)``, every other item ``1 / (N - 1 + alpha)``."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    denom = catalog_size - 1 + alpha
    return ProposalDistribution(
        target_index=target,
        target_mass=alpha / denom,
        other_mass=1.0 / denom,
        catalog_size=catalog_size,
    )


def uniform_proposal(catalog_size: int, target: int) -> ProposalDistribution:
    return build_sce_proposal(1.0, catalog_size, target)


def sample_from_proposal(dist: ProposalDistribution, K: int, rng: np.random.Generator):
    """K i.i.d. draws and their log-probabilities under ``dist``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    hit = rng.random(K) < dist.target_mass
    others = rng.integers(0, dist.catalog_size - 1, size=K) if dist.catalog_size > 1 \
        else np.zeros(K, dtype=np.int64)
    others = others + (others >= dist.target_index)
    draws = np.where(hit, dist.target_index, others)
    return draws, dist.logprob(draws)


def log_uniform(catalog_size: int) -> float:
    return -math.log(catalog_size)
