"""Dataset ingestion, binarization and positive leave-one-out splitting.

Supported on-disk formats:

* ``ml100k`` -- tab-separated ``user item rating timestamp`` (the
  MovieLens-100K ``u.data`` layout, no header);
* ``csv`` -- comma-separated with a ``user,item,rating,timestamp``
  header row.

Raw ids are remapped to dense 0-based indices in first-seen order; the
mapping is kept on the load result for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Interaction",
    "LabeledInteraction",
    "LoadedData",
    "Split",
    "SplitDataset",
    "DataError",
    "load_tabular",
    "binarize",
    "leave_one_out_split",
    "synth_dataset",
]


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class LabeledInteraction:
    user: int
    item: int
    label: int
    timestamp: int


@dataclass
class LoadedData:
    interactions: list[Interaction]
    n_users: int
    n_items: int
    user_index: dict = field(default_factory=dict)  # raw id -> dense id
    item_index: dict = field(default_factory=dict)


@dataclass
class Split:
    """One side of a split as parallel arrays."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_rows(cls, rows) -> "Split":
        if rows:
            u, i, y = zip(*rows)
        else:
            u, i, y = (), (), ()
        return cls(
            np.asarray(u, dtype=np.int64),
            np.asarray(i, dtype=np.int64),
            np.asarray(y, dtype=np.float64),
        )

    def __len__(self):
        return len(self.users)


@dataclass
class SplitDataset:
    train: Split
    validation: Split
    test: Split
    n_users: int
    n_items: int


def load_tabular(path, fmt: str) -> LoadedData:
    if fmt not in ("ml100k", "csv"):
        raise DataError(f"unknown format {fmt!r} (expected 'ml100k' or 'csv')")
    sep = "\t" if fmt == "ml100k" else ","
    user_index: dict = {}
    item_index: dict = {}
    interactions: list[Interaction] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 0
    if fmt == "csv":
        if not lines:
            raise DataError(f"{path}: empty file")
        header = [c.strip() for c in lines[0].split(sep)]
        if header != ["user", "item", "rating", "timestamp"]:
            raise DataError(f"{path}:1: expected header user,item,rating,timestamp")
        start = 1
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            u_raw, i_raw, rating, ts = (int(p) for p in parts)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer field") from None
        if not 1 <= rating <= 5:
            raise DataError(f"{path}:{lineno}: rating {rating} outside [1, 5]")
        u = user_index.setdefault(u_raw, len(user_index))
        i = item_index.setdefault(i_raw, len(item_index))
        interactions.append(Interaction(u, i, rating, ts))
    if not interactions:
        raise DataError(f"{path}: no interactions")
    return LoadedData(interactions, len(user_index), len(item_index), user_index, item_index)


def binarize(interactions) -> list[LabeledInteraction]:
    """Ratings >= 4 become label 1, the rest label 0."""
    out = []
    for it in interactions:
        if not 1 <= it.rating <= 5:
            raise DataError(f"rating {it.rating} outside [1, 5]")
        out.append(LabeledInteraction(it.user, it.item, int(it.rating >= 4), it.timestamp))
    return out


def leave_one_out_split(
    labeled, n_users: int | None = None, n_items: int | None = None
) -> SplitDataset:
    """Positive leave-one-out (per user, by timestamp, stable on ties).

    The last positive plus everything after it goes to test; the
    second-to-last positive plus the interactions between it and the
    last positive go to validation; the rest is train. Users with fewer
    than 5 interactions (or without the needed positives) keep all
    their interactions in train.
    """
    if n_users is None:
        n_users = max((r.user for r in labeled), default=-1) + 1
    if n_items is None:
        n_items = max((r.item for r in labeled), default=-1) + 1
    per_user: dict[int, list[LabeledInteraction]] = {}
    for r in labeled:
        per_user.setdefault(r.user, []).append(r)
    train_rows, val_rows, test_rows = [], [], []

    def rows(seq):
        return [(r.user, r.item, r.label) for r in seq]

    for user in sorted(per_user):
        seq = sorted(per_user[user], key=lambda r: r.timestamp)  # stable on ties
        pos_idx = [k for k, r in enumerate(seq) if r.label == 1]
        if len(seq) < 5 or not pos_idx:
            train_rows += rows(seq)
            continue
        last = pos_idx[-1]
        test_rows += rows(seq[last:])
        if len(pos_idx) >= 2:
            second = pos_idx[-2]
            val_rows += rows(seq[second:last])
            train_rows += rows(seq[:second])
        else:
            train_rows += rows(seq[:last])
    return SplitDataset(
        Split.from_rows(train_rows),
        Split.from_rows(val_rows),
        Split.from_rows(test_rows),
        n_users,
        n_items,
    )


def synth_dataset(
    n_users: int, n_items: int, rank: int, noise: float, seed: int
) -> SplitDataset:
    """Dense synthetic interactions from a low-rank score matrix.

    Factors are drawn around a shared mean direction so the matrix
    carries popularity/activity structure along with the interaction
    signal, as rating data does. Labels are 1 where the score exceeds
    the global median, then flipped independently with probability
    ``noise``. Timestamps enumerate a per-user random item order so the
    leave-one-out rule applies.
    """
    if rank > min(n_users, n_items):
        raise DataError("rank must not exceed min(n_users, n_items)")
    rng = np.random.default_rng(seed)
    loc = np.zeros(rank)
    loc[0] = 1.0
    u_fac = rng.normal(loc=loc, size=(n_users, rank))
    i_fac = rng.normal(loc=loc, size=(n_items, rank))
    scores = u_fac @ i_fac.T
    labels = (scores > np.median(scores)).astype(int)
    if noise > 0:
        flips = rng.random(labels.shape) < noise
        labels = np.where(flips, 1 - labels, labels)
    labeled = []
    for user in range(n_users):
        order = rng.permutation(n_items)
        for t, item in enumerate(order):
            labeled.append(LabeledInteraction(user, int(item), int(labels[user, item]), t))
    return leave_one_out_split(labeled, n_users, n_items)
