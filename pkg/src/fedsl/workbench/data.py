"""Synthetic Gaussian-blob data and client partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedsl.errors import ValidationError
from fedsl.sim_core import rng_stream


class DegeneratePartitionError(ValidationError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValidationError("dataset must contain at least one sample")
        if self.features.shape[0] != len(self.labels):
            raise ValidationError("features and labels disagree on sample count")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def class_means(d: int, classes: int) -> np.ndarray:
    """Unit-norm class centres with pairwise distance >= 1."""
    means = np.zeros((classes, d))
    if classes <= d:
        # Centred regular simplex on the first `classes` axes.
        means[:, :classes] = np.eye(classes) - 1.0 / classes
    elif classes <= 6:
        # Points on the unit circle; chord 2*sin(pi/K) >= 1 for K <= 6.
        ang = 2.0 * math.pi * np.arange(classes) / classes
        means[:, 0], means[:, 1] = np.cos(ang), np.sin(ang)
    else:
        raise ValidationError(f"cannot place {classes} separated unit means in {d} dims")
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def gen_blobs(seed: int, n: int, d: int, classes: int, spread: float) -> Dataset:
    if classes < 2 or d < 2 or n < 1:
        raise ValidationError("need classes >= 2, d >= 2 and n >= 1")
    if spread < 0:
        raise ValidationError("spread must be non-negative")
    rng = rng_stream(seed, "data.blobs")
    labels = rng.permutation(np.arange(n) % classes)
    noise = rng.standard_normal((n, d))
    features = class_means(d, classes)[labels] + spread * noise
    return Dataset(features, labels.astype(np.int64), classes)


def partition_uniform(ds: Dataset, num_clients: int, seed: int) -> list[np.ndarray]:
    if not 1 <= num_clients <= len(ds):
        raise ValidationError(f"cannot split {len(ds)} samples across {num_clients} clients")
    perm = rng_stream(seed, "data.partition").permutation(len(ds))
    return list(np.array_split(perm, num_clients))


def partition_dirichlet(
    ds: Dataset, num_clients: int, alpha: float, seed: int, max_retries: int = 100
) -> list[np.ndarray]:
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    if not 1 <= num_clients <= len(ds):
        raise ValidationError(f"cannot split {len(ds)} samples across {num_clients} clients")
    rng = rng_stream(seed, "data.dirichlet")
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for _ in range(max_retries):
        shards: list[list[int]] = [[] for _ in range(num_clients)]
        for idx in by_class:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for shard, part in zip(shards, np.split(idx, cuts)):
                shard.extend(part.tolist())
        if all(shards):
            return [np.sort(np.asarray(s)) for s in shards]
    raise DegeneratePartitionError(
        f"no partition with all {num_clients} shards non-empty after {max_retries} tries"
    )
