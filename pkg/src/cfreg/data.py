"""Synthetic datasets, label corruption, the A/B split and epoch batching.

Every generator is a pure function of its arguments: the same seed always
yields bit-identical arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Tuple

import numpy as np

from .nn import ConfigError

SIDE_A = 0
SIDE_B = 1


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.labels)
        if n < 2:
            raise ConfigError(f"a dataset needs at least 2 samples, got {n}")
        if self.inputs.shape[0] != n:
            raise ConfigError(f"{self.inputs.shape[0]} inputs but {n} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.num_classes, dict(self.provenance))


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def gen_gaussian_clusters(K: int, d: int, n: int, sep: float, seed: int) -> Dataset:
    """Unit-variance isotropic clusters whose means sit on a sphere of radius ``sep``."""
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    if n < K:
        raise ConfigError(f"need n >= K samples, got n={n}, K={K}")
    rng = np.random.default_rng([seed, 101])
    directions = rng.standard_normal((K, d))
    means = sep * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    labels = _balanced_labels(n, K, rng)
    x = means[labels] + rng.standard_normal((n, d))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    return Dataset(x, labels, K, {"generator": "gaussian", "seed": seed, "noise_rate": 0.0})


def pattern_template(k: int, hw: int) -> np.ndarray:
    """Class ``k``'s procedural image: bar orientation cycles with k, frequency grows with k // 4."""
    r, c = np.mgrid[0:hw, 0:hw]
    period = 2 + k // 4
    kind = k % 4
    if kind == 0:
        coord = r
    elif kind == 1:
        coord = c
    elif kind == 2:
        coord = r + c
    else:
        return np.where(((r // period) + (c // period)) % 2 == 0, 1.0, -1.0)
    return np.where((coord // period) % 2 == 0, 1.0, -1.0)


def gen_pattern_images(K: int, hw: int, n: int, seed: int, noise: float = 0.3) -> Dataset:
    if hw < 8:
        raise ConfigError(f"image side must be >= 8, got {hw}")
    if K < 2 or n < K:
        raise ConfigError(f"need K >= 2 and n >= K, got K={K}, n={n}")
    rng = np.random.default_rng([seed, 102])
    templates = np.stack([pattern_template(k, hw) for k in range(K)])
    labels = _balanced_labels(n, K, rng)
    x = templates[labels] + noise * rng.standard_normal((n, hw, hw))
    return Dataset(x[:, None, :, :], labels, K, {"generator": "patterns", "seed": seed, "noise_rate": 0.0})


def randomize_labels(ds: Dataset, seed: int) -> Dataset:
    """Replace every label by an independent uniform draw over all classes."""
    rng = np.random.default_rng([seed, 103])
    labels = rng.integers(0, ds.num_classes, size=len(ds))
    prov = dict(ds.provenance, randomized=True, label_seed=seed)
    return replace(ds, labels=labels, provenance=prov)


def inject_label_noise(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Give exactly ``round(rate * n)`` uniformly chosen samples a uniform wrong label."""
    if not 0 <= rate <= 1:
        raise ConfigError(f"noise rate must lie in [0, 1], got {rate}")
    n = len(ds)
    rng = np.random.default_rng([seed, 104])
    flip = rng.choice(n, size=int(round(rate * n)), replace=False)
    labels = ds.labels.copy()
    # shift by 1..K-1 so the new label always differs
    labels[flip] = (labels[flip] + rng.integers(1, ds.num_classes, size=flip.size)) % ds.num_classes
    prov = dict(ds.provenance, noise_rate=rate, noise_seed=seed)
    return replace(ds, labels=labels, provenance=prov)


def train_val_split(ds: Dataset, n_val: int, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < n_val < len(ds) - 1:
        raise ConfigError(f"n_val must leave both parts with >= 2 samples, got {n_val} of {len(ds)}")
    perm = np.random.default_rng([seed, 105]).permutation(len(ds))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


@dataclass(frozen=True)
class SplitAssignment:
    side: np.ndarray
    p: float

    @property
    def a_index(self) -> np.ndarray:
        return np.flatnonzero(self.side == SIDE_A)

    @property
    def b_index(self) -> np.ndarray:
        return np.flatnonzero(self.side == SIDE_B)


def split_ab(n: int, p: float, split_seed: int) -> SplitAssignment:
    """Assign a uniformly random subset of ``round(p * n)`` samples to side A, the rest to B."""
    if not 0 < p < 1:
        raise ConfigError(f"split fraction p must lie in (0, 1), got {p}")
    n_a = int(round(p * n))
    if not 1 <= n_a <= n - 1:
        raise ConfigError(f"split of n={n} with p={p} leaves a side empty")
    rng = np.random.default_rng([split_seed, 106])
    side = np.full(n, SIDE_B, dtype=np.int8)
    side[rng.permutation(n)[:n_a]] = SIDE_A
    return SplitAssignment(side, p)


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 107, epoch]).permutation(n)


def batches(ds: Dataset, plan: BatchPlan, epoch: int,
            split: SplitAssignment) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(inputs, labels, sides)`` for one shuffled epoch; the last batch may be short."""
    n = len(ds)
    if not 1 <= plan.batch_size <= n:
        raise ConfigError(f"batch_size must lie in [1, {n}], got {plan.batch_size}")
    order = plan.permutation(n, epoch)
    for start in range(0, n, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield ds.inputs[idx], ds.labels[idx], split.side[idx]


def load_csv(path, num_classes: int = 0) -> Dataset:
    """Read ``label,x0,x1,...`` rows; ``num_classes=0`` infers K from the largest label."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ConfigError(f"{path}: header must start with 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    k = num_classes or int(labels.max()) + 1
    return Dataset(x, labels, k, {"generator": "csv", "path": str(path), "noise_rate": 0.0})
