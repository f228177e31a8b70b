"""Interaction logs, k-core filtering, leave-one-out splits, synthetic Markov data."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int


@dataclass
class Catalog:
    raw_ids: list = field(default_factory=list)  # dense index -> raw item id

    def __post_init__(self):
        self.index = {raw: i for i, raw in enumerate(self.raw_ids)}
        if len(self.index) != len(self.raw_ids):
            raise DataError("duplicate raw item id in catalog")

    @property
    def item_count(self) -> int:
        return len(self.raw_ids)

    def to_dense(self, raw_id: int) -> int:
        return self.index[raw_id]

    def to_raw(self, dense: int) -> int:
        return self.raw_ids[dense]


@dataclass
class SequenceDataset:
    sequences: dict  # user -> full dense item sequence
    splits: dict     # user -> (train prefix, validation target, test target)
    catalog: Catalog
    dropped_users: int = 0

    @property
    def item_count(self) -> int:
        return self.catalog.item_count

    @property
    def users(self) -> list:
        return sorted(self.splits)

    def to_dict(self) -> dict:
        users = self.users
        return {
            "item_count": self.item_count,
            "sequences": {str(u): list(self.sequences[u]) for u in users},
            "val_targets": {str(u): self.splits[u][1] for u in users},
            "test_targets": {str(u): self.splits[u][2] for u in users},
            "item_ids": list(self.catalog.raw_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, data: dict) -> "SequenceDataset":
        try:
            n = int(data["item_count"])
            seqs, vals, tests = data["sequences"], data["val_targets"], data["test_targets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"dataset JSON missing field: {exc}") from exc
        raw = data.get("item_ids") or list(range(n))
        if len(raw) != n:
            raise DataError("item_ids length differs from item_count")
        splits, sequences = {}, {}
        for key, seq in seqs.items():
            u = int(key)
            try:
                val, test = int(vals[key]), int(tests[key])
            except KeyError as exc:
                raise DataError(f"user {key} lacks a validation or test target") from exc
            full = [int(v) for v in seq]
            if len(full) < 3 or full[-2:] != [val, test]:
                raise DataError(f"user {key}: sequence must end with its validation and test targets")
            if min(full) < 0 or max(full) >= n:
                raise DataError(f"user {key}: item index out of range")
            train = full[:-2]
            splits[u] = (train, val, test)
            sequences[u] = full
        if not splits:
            raise DataError("dataset has no users")
        return cls(sequences=sequences, splits=splits, catalog=Catalog(list(raw)))

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from exc
        return cls.from_dict(data)


def load_interactions(path) -> list:
    """Parse ``user<TAB>item<TAB>timestamp`` lines, preserving order."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                user, item, ts = (int(p) for p in parts)
            except ValueError as exc:
                raise DataError(f"line {lineno}: non-integer field") from exc
            if user < 0 or item < 0 or ts < 0:
                raise DataError(f"line {lineno}: negative field")
            out.append(Interaction(user, item, ts))
    if not out:
        raise DataError(f"{path}: no interactions")
    return out


def write_interactions(log, path) -> None:
    with open(path, "w") as fh:
        for x in log:
            fh.write(f"{x.user_id}\t{x.item_id}\t{x.timestamp}\n")


def k_core_filter(log, k: int = 5) -> list:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(log)
    while True:
        users = Counter(x.user_id for x in current)
        items = Counter(x.item_id for x in current)
        kept = [x for x in current if users[x.user_id] >= k and items[x.item_id] >= k]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise DataError("empty after k-core")
    return current


def leave_one_out_split(log, min_len: int = 3) -> SequenceDataset:
    per_user: dict = {}
    for order, x in enumerate(log):
        per_user.setdefault(x.user_id, []).append((x.timestamp, order, x.item_id))
    kept = {u for u, events in per_user.items() if len(events) >= min_len}
    dropped = len(per_user) - len(kept)
    if dropped:
        logger.warning("dropped %d users shorter than %d interactions", dropped, min_len)
    if not kept:
        raise DataError("no user has enough interactions to split")

    # dense ids follow first appearance in the input log
    raw_ids: list = []
    seen: dict = {}
    for x in log:
        if x.user_id in kept and x.item_id not in seen:
            seen[x.item_id] = len(raw_ids)
            raw_ids.append(x.item_id)

    sequences, splits = {}, {}
    for user in sorted(kept):
        # (timestamp, input position) keeps ties in file order
        seq = [seen[item] for _, _, item in sorted(per_user[user])]
        sequences[user] = seq
        splits[user] = (seq[:-2], seq[-2], seq[-1])
    return SequenceDataset(sequences=sequences, splits=splits, catalog=Catalog(raw_ids),
                           dropped_users=dropped)


def generate_markov_dataset(n_users: int, n_items: int, seq_len_range=(8, 24),
                            self_consistency: float = 0.8, seed: int = 0) -> SequenceDataset:
    """Users walk a hidden permutation cycle, jumping uniformly at random with
    probability ``1 - self_consistency`` at every step."""
    if n_items < 10:
        raise ValueError("n_items must be >= 10")
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    if not 0.0 <= self_consistency <= 1.0:
        raise ValueError("self_consistency must lie in [0, 1]")
    lo, hi = seq_len_range
    if not 3 <= lo <= hi:
        raise ValueError("sequence lengths must satisfy 3 <= lo <= hi")
    rng = np.random.default_rng(seed)
    successor = _random_cycle(rng, n_items)

    sequences, splits = {}, {}
    for user in range(n_users):
        length = int(rng.integers(lo, hi + 1))
        follow = rng.random(length) < self_consistency
        jumps = rng.integers(0, n_items, size=length)
        seq = [int(jumps[0])]
        for step in range(1, length):
            seq.append(int(successor[seq[-1]]) if follow[step] else int(jumps[step]))
        sequences[user] = seq
        splits[user] = (seq[:-2], seq[-2], seq[-1])
    return SequenceDataset(sequences=sequences, splits=splits, catalog=Catalog(list(range(n_items))))


def hidden_successor(n_items: int, seed: int) -> np.ndarray:
    """The cycle used by ``generate_markov_dataset`` for the same seed."""
    return _random_cycle(np.random.default_rng(seed), n_items)


def _random_cycle(rng, n_items):
    order = rng.permutation(n_items)
    successor = np.empty(n_items, dtype=np.int64)
    successor[order] = np.roll(order, -1)
    return successor
