"""Dataset synthesis, CSV ingestion, and federated partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParseError
from .rng import derive_rng


@dataclass
class Dataset:
    """Feature matrix (n, d) with integer class labels (n,)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise InputError("features must be 2-d and labels 1-d")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


Partition = list[np.ndarray]


def synth_blobs(
    num_classes: int, dim: int, n_samples: int, separation: float, seed: int
) -> Dataset:
    """Gaussian class clusters, near-balanced labels, deterministic in seed.

    Class means are standard normal draws scaled by separation; features
    add unit-variance noise. separation=0 collapses every class onto the
    same cloud.
    """
    if num_classes < 2:
        raise InputError(f"need at least 2 classes, got {num_classes}")
    if dim < 1 or n_samples < 1:
        raise InputError("dim and n_samples must be positive")
    rng = derive_rng(seed, "dataset")
    means = separation * rng.standard_normal((num_classes, dim))
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    features = means[labels] + rng.standard_normal((n_samples, dim))
    return Dataset(features=features, labels=labels, num_classes=num_classes)


def load_csv(path, label_column: str, standardize: bool = True) -> Dataset:
    """Read a numeric-feature CSV with a header row, preserving row order.

    The label column must hold integer class ids. Features are z-scored per
    dimension unless standardize is False; constant columns are left at
    zero rather than divided by a zero deviation.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not found", line=1)
        label_idx = header.index(label_column)
        features: list[list[float]] = []
        labels: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", line=line_no
                )
            try:
                labels.append(int(row[label_idx]))
                features.append(
                    [float(v) for i, v in enumerate(row) if i != label_idx]
                )
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
    if not features:
        raise ParseError("no data rows", line=2)
    matrix = np.array(features, dtype=np.float64)
    label_arr = np.array(labels, dtype=np.int64)
    if label_arr.min() < 0:
        raise ParseError("labels must be non-negative")
    if standardize:
        mean = matrix.mean(axis=0)
        std = matrix.std(axis=0)
        std[std == 0.0] = 1.0
        matrix = (matrix - mean) / std
    return Dataset(
        features=matrix, labels=label_arr, num_classes=int(label_arr.max()) + 1
    )


def save_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    """Write a dataset as CSV with full float64 precision."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + [label_column])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def partition_iid(dataset: Dataset, num_clients: int, seed: int) -> Partition:
    """Shuffle and deal indices into near-equal shares (sizes differ by <= 1)."""
    n = len(dataset)
    if num_clients < 1 or num_clients > n:
        raise InputError(f"need 1 <= clients <= {n}, got {num_clients}")
    rng = derive_rng(seed, "partition")
    order = rng.permutation(n)
    base, extra = divmod(n, num_clients)
    sizes = [base + (1 if k < extra else 0) for k in range(num_clients)]
    bounds = np.cumsum(sizes)[:-1]
    return [np.sort(part) for part in np.split(order, bounds)]


def partition_dirichlet(
    dataset: Dataset, num_clients: int, beta: float, seed: int
) -> Partition:
    """Label-skewed partition: each class is dealt to clients by Dirichlet
    proportions. Clients left empty receive one sample from the largest one."""
    if beta <= 0:
        raise InputError(f"beta must be positive, got {beta}")
    n = len(dataset)
    if num_clients < 1 or num_clients > n:
        raise InputError(f"need 1 <= clients <= {n}, got {num_clients}")
    rng = derive_rng(seed, "partition")
    shares: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, beta))
        bounds = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, part in enumerate(np.split(idx, bounds)):
            shares[k].append(part)
    parts = [
        np.concatenate(s) if s else np.array([], dtype=np.int64) for s in shares
    ]
    while any(len(p) == 0 for p in parts):
        empty = min(range(num_clients), key=lambda k: len(parts[k]))
        donor = max(range(num_clients), key=lambda k: len(parts[k]))
        take = int(rng.integers(len(parts[donor])))
        moved = parts[donor][take]
        parts[donor] = np.delete(parts[donor], take)
        parts[empty] = np.array([moved], dtype=np.int64)
    return [np.sort(p) for p in parts]


def label_histogram(dataset: Dataset, indices: np.ndarray) -> np.ndarray:
    """Per-class sample counts within one client's share."""
    return np.bincount(dataset.labels[indices], minlength=dataset.num_classes)


def iterate_batches(
    dataset: Dataset,
    indices: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle one client's share and slice it into batches.

    The final batch may be short. An empty share gives no batches.
    """
    if batch_size < 1:
        raise InputError(f"batch size must be >= 1, got {batch_size}")
    if len(indices) == 0:
        return []
    order = indices[rng.permutation(len(indices))]
    return [
        (dataset.features[chunk], dataset.labels[chunk])
        for chunk in (
            order[i : i + batch_size] for i in range(0, len(order), batch_size)
        )
    ]
