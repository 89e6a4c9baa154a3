"""Synthetic data, CSV ingestion and client partitioning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fedhenn.nn import Architecture

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DatasetError(f"features {X.shape} and labels {y.shape} do not line up")
        if not np.all(np.isfinite(X)):
            raise DatasetError("features contain non-finite values")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    arch: Architecture

    @property
    def n_i(self) -> int:
        return len(self.train)


def _lattice_centres(n_classes: int, dim: int, sep: float) -> np.ndarray:
    # centres on an integer grid of side ceil(n^(1/dim)); class c takes the c-th grid point
    side = max(2, math.ceil(n_classes ** (1.0 / dim) - 1e-9))
    centres = np.zeros((n_classes, dim))
    for c in range(n_classes):
        k = c
        for axis in range(dim):
            centres[c, axis] = k % side
            k //= side
    return sep * centres


def synth_gaussian_mixture(
    n_classes: int, dim: int, n_per_class: int, class_sep: float, seed: int
) -> LabeledDataset:
    """Unit-variance Gaussian blobs centred on a ``class_sep``-spaced lattice."""
    if min(n_classes, dim, n_per_class) < 1:
        raise ValueError("n_classes, dim and n_per_class must all be >= 1")
    if not class_sep > 0:
        raise ValueError(f"class_sep must be > 0, got {class_sep}")
    rng = np.random.default_rng(seed)
    centres = _lattice_centres(n_classes, dim, class_sep)
    X = np.concatenate([centres[c] + rng.standard_normal((n_per_class, dim)) for c in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return LabeledDataset(X, y, n_classes)


def load_csv_dataset(path) -> LabeledDataset:
    """Read a header-first CSV whose last column, ``label``, holds class indices."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[-1] != "label":
        raise DatasetError(f"{path}: last header column must be 'label', got {header[-1:]}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise DatasetError(f"{path}: no data rows (empty dataset)")
    feats, labels = [], []
    # row numbers are 1-based file lines, header is row 1
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
        try:
            feats.append([float(v) for v in row[:-1]])
        except ValueError:
            col = next(i for i, v in enumerate(row[:-1]) if not _is_float(v))
            raise DatasetError(
                f"{path}: non-numeric cell {row[col]!r} at row {lineno}, column {header[col]!r}"
            ) from None
        try:
            lab = int(row[-1])
        except ValueError:
            raise DatasetError(f"{path}: non-integer label {row[-1]!r} at row {lineno}") from None
        if lab < 0:
            raise DatasetError(f"{path}: negative label at row {lineno}")
        labels.append(lab)
    X = np.array(feats, dtype=np.float64).reshape(len(labels), len(header) - 1)
    y = np.array(labels, dtype=np.int64)
    return LabeledDataset(X, y, int(y.max()) + 1)


def _is_float(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def split_public_pool(ds: LabeledDataset, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Carve ``size`` rows out as an unlabeled public pool.

    Returns ``(pool_features, remaining_row_indices)``; the pool never carries labels.
    """
    if not 0 < size < len(ds):
        raise DatasetError(f"public pool size {size} must be in (0, {len(ds)})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    pool_idx, rest = np.sort(perm[:size]), np.sort(perm[size:])
    return ds.features[pool_idx].copy(), rest


def partition_noniid(
    ds: LabeledDataset,
    n_clients: int,
    classes_per_client: int,
    seed: int,
    indices=None,
    strict: bool = False,
) -> list[np.ndarray]:
    """Give each client ``classes_per_client`` random classes and deal rows out round-robin.

    Each client's class set is drawn uniformly without replacement. The rows
    of a class are shuffled and dealt to that class's holders in ascending
    client order. Rows of classes nobody holds are dropped (or raise, if
    ``strict``).
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if not 1 <= classes_per_client <= ds.n_classes:
        raise ValueError(f"classes_per_client must be in [1, {ds.n_classes}], got {classes_per_client}")
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
    rng = np.random.default_rng(seed)
    class_sets = [
        np.sort(rng.choice(ds.n_classes, size=classes_per_client, replace=False)) for _ in range(n_clients)
    ]
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    labels = ds.labels[idx]
    for c in range(ds.n_classes):
        holders = [i for i, s in enumerate(class_sets) if c in s]
        rows = idx[labels == c]
        if not holders:
            if strict:
                raise DatasetError(f"class {c} is assigned to no client")
            if rows.size:
                log.warning("class %d assigned to no client; dropping %d rows", c, rows.size)
            continue
        rows = rows[rng.permutation(rows.size)]
        for k, r in enumerate(rows):
            shards[holders[k % len(holders)]].append(int(r))
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


def split_train_test(indices, ds: LabeledDataset, test_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split of ``indices`` into (train, test) index arrays.

    Stratified by class when every class present has at least two rows.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if not 0.0 < test_frac < 1.0:
        raise ValueError(f"test_frac must be in (0, 1), got {test_frac}")
    n = idx.size
    if n < 2:
        raise DatasetError(f"need at least 2 rows to split, got {n}")
    rng = np.random.default_rng(seed)
    n_test = min(max(1, int(round(test_frac * n))), n - 1)
    labels = ds.labels[idx]
    classes, counts = np.unique(labels, return_counts=True)

    if counts.min() >= 2 and n_test >= classes.size:
        quota = test_frac * counts
        take = np.clip(np.floor(quota).astype(int), 1, counts - 1)
        # largest remainder to hit the total; ties broken by class order
        order = np.argsort(-(quota - np.floor(quota)), kind="stable")
        while take.sum() < n_test:
            grew = False
            for k in order:
                if take.sum() == n_test:
                    break
                if take[k] < counts[k] - 1:
                    take[k] += 1
                    grew = True
            if not grew:
                break
        while take.sum() > n_test:
            k = int(np.argmax(take))
            take[k] -= 1
        test_parts, train_parts = [], []
        for c, k in zip(classes, take):
            rows = idx[labels == c]
            rows = rows[rng.permutation(rows.size)]
            test_parts.append(rows[:k])
            train_parts.append(rows[k:])
        return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))

    perm = idx[rng.permutation(n)]
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def shrink_clients(shards: list[ClientShard], fraction_of_clients: float, shrink_to: float, seed: int) -> list[ClientShard]:
    """Subsample the train sets of a random ``ceil(fraction * N)`` clients to ``shrink_to`` of their size."""
    if not 0.0 < fraction_of_clients <= 1.0 or not 0.0 < shrink_to <= 1.0:
        raise ValueError("fraction_of_clients and shrink_to must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    k = math.ceil(fraction_of_clients * len(shards) - 1e-9)
    picked = set(int(i) for i in rng.choice(len(shards), size=k, replace=False))
    out = []
    for i, shard in enumerate(shards):
        if i not in picked:
            out.append(shard)
            continue
        keep = int(round(shrink_to * shard.n_i))
        if keep < 1:
            raise DatasetError(f"shrinking client {shard.client_id} to {shrink_to} would empty its train set")
        rows = np.sort(rng.permutation(shard.n_i)[:keep])
        out.append(replace(shard, train=shard.train.subset(rows)))
    return out
