"""Synthetic datasets, client partitioning, and small-file loaders."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, PartitionError, SpecificationError


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError(f"features {self.features.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) < 1:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class BlobSplit:
    train: Dataset
    test: Dataset
    centers: np.ndarray  # (C, clusters_per_class, d)
    embedding: np.ndarray | None = None  # (d, ambient_dim) orthonormal rows


def _balanced_labels(n: int, c: int) -> np.ndarray:
    return np.repeat(np.arange(c), [n // c + (k < n % c) for k in range(c)])


def make_blobs(
    n: int,
    d: int,
    num_classes: int,
    separation: float,
    seed: int,
    n_test: int | None = None,
    clusters_per_class: int = 1,
    ambient_dim: int | None = None,
) -> BlobSplit:
    """Class-balanced Gaussian clusters with unit noise.

    Cluster centres are ``separation * N(0, I_d)``; with ``clusters_per_class > 1``
    each class is a mixture of several centres, which makes the classes
    non-linearly separable. A held-out test split (default ``n // 4``) is drawn
    from the same centres.

    With ``ambient_dim`` the ``d``-dimensional samples are mapped into
    ``ambient_dim`` dimensions through a random map with orthonormal rows and
    unit isotropic noise is added there, giving wide, image-like inputs whose
    class structure lives in a low-dimensional subspace.
    """
    if n < num_classes or d < 1 or num_classes < 2 or clusters_per_class < 1:
        raise SpecificationError(
            f"need n >= C >= 2, d >= 1, clusters >= 1 (got n={n}, d={d}, C={num_classes}, clusters={clusters_per_class})"
        )
    if not separation > 0:
        raise SpecificationError(f"separation must be positive, got {separation}")
    n_test = n // 4 if n_test is None else n_test
    if n_test < num_classes:
        raise SpecificationError(f"test split of {n_test} cannot cover {num_classes} classes")
    if ambient_dim is not None and ambient_dim < d:
        raise SpecificationError(f"ambient_dim {ambient_dim} is smaller than d={d}")
    rng = np.random.default_rng(seed)
    centers = separation * rng.normal(size=(num_classes, clusters_per_class, d))
    embedding = None
    if ambient_dim is not None:
        q, _ = np.linalg.qr(rng.normal(size=(ambient_dim, d)))
        embedding = q.T

    def draw(count: int) -> Dataset:
        y = rng.permutation(_balanced_labels(count, num_classes))
        which = rng.integers(clusters_per_class, size=count)
        x = centers[y, which] + rng.normal(size=(count, d))
        if embedding is not None:
            x = x @ embedding + rng.normal(size=(count, embedding.shape[1]))
        return Dataset(x, y, num_classes)

    train = draw(n)
    return BlobSplit(train, draw(n_test), centers, embedding)


PARTITION_SCHEMES = ("iid", "dirichlet", "label_subset")


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"
    clients: int = 8
    seed: int = 0
    beta: float = 0.3
    fraction: float = 0.3

    def __post_init__(self):
        if self.scheme not in PARTITION_SCHEMES:
            raise SpecificationError(f"unknown partition scheme {self.scheme!r}; expected one of {PARTITION_SCHEMES}")
        if self.clients < 1:
            raise SpecificationError("need at least one client")
        if self.scheme == "dirichlet" and not self.beta > 0:
            raise SpecificationError(f"Dirichlet beta must be positive, got {self.beta}")
        if self.scheme == "label_subset" and not 0 < self.fraction <= 1:
            raise SpecificationError(f"label fraction must be in (0, 1], got {self.fraction}")


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions``."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_proportions(num_classes: int, clients: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Row ``c`` is label ``c``'s split over clients, drawn from Dir(beta)."""
    return rng.dirichlet(np.full(clients, beta), size=num_classes)


def label_assignment(num_classes: int, clients: int, fraction: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Labels held by each client: ``ceil(fraction * C)`` distinct labels each.

    Clients take consecutive blocks of a seeded label permutation (wrapping
    around), so every label is held by someone whenever ``clients * k >= C``.
    """
    k = math.ceil(fraction * num_classes - 1e-9)
    if clients * k < num_classes:
        raise PartitionError(
            f"{clients} clients x {k} labels cannot cover {num_classes} classes; "
            "raise the label fraction or the client count"
        )
    perm = rng.permutation(num_classes)
    return [np.sort(perm[(j * k + np.arange(k)) % num_classes]) for j in range(clients)]


def _repair_empty(shards: list[list[int]]) -> None:
    for j, shard in enumerate(shards):
        if not shard:
            donor = max(range(len(shards)), key=lambda q: (len(shards[q]), -q))
            if len(shards[donor]) < 2:
                raise PartitionError("not enough samples to give every client one")
            shard.append(shards[donor].pop())


def partition(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split sample indices into ``spec.clients`` disjoint, non-empty shards."""
    n, k = len(ds), spec.clients
    if n < k:
        raise PartitionError(f"{n} samples cannot give {k} clients one each")
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "iid":
        return [np.sort(s) for s in np.array_split(rng.permutation(n), k)]

    shards: list[list[int]] = [[] for _ in range(k)]
    if spec.scheme == "dirichlet":
        props = dirichlet_proportions(ds.num_classes, k, spec.beta, rng)
        for c in range(ds.num_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            counts = largest_remainder(len(idx), props[c])
            for j, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                shards[j].extend(chunk.tolist())
    else:
        held = label_assignment(ds.num_classes, k, spec.fraction, rng)
        for c in range(ds.num_classes):
            owners = [j for j in range(k) if c in held[j]]
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            for j, chunk in zip(owners, np.array_split(idx, len(owners))):
                shards[j].extend(chunk.tolist())
    _repair_empty(shards)
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


# ---------------------------------------------------------------------------
# loaders


def load_csv(path: str | Path, label_column: int = -1, skip_header: bool | None = None) -> Dataset:
    """Numeric CSV: feature columns plus one integer label column."""
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise DataError(f"{path}: empty CSV")
    if skip_header is None:
        try:
            [float(v) for v in text[0].split(",")]
            skip_header = False
        except ValueError:
            skip_header = True
    rows = text[1:] if skip_header else text
    try:
        table = np.array([[float(v) for v in r.split(",")] for r in rows if r.strip()])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric field ({exc})") from None
    if table.ndim != 2 or table.shape[1] < 2:
        raise DataError(f"{path}: need at least one feature column and a label column")
    labels = table[:, label_column]
    if not np.all(labels == np.round(labels)):
        raise DataError(f"{path}: label column holds non-integers")
    features = np.delete(table, label_column % table.shape[1], axis=1)
    labels = labels.astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1)


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: not an IDX file")
    if raw[2] != 0x08:
        raise DataError(f"{path}: only unsigned-byte IDX data is supported (type 0x{raw[2]:02x})")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DataError(f"{path}: expected {int(np.prod(dims))} values, found {body.size}")
    return body.reshape(dims)


def load_idx(images: str | Path, labels: str | Path) -> Dataset:
    """MNIST-style IDX pair; pixels are flattened and scaled to [0, 1]."""
    x = _read_idx(Path(images))
    y = _read_idx(Path(labels)).astype(np.int64)
    if y.ndim != 1 or len(x) != len(y):
        raise DataError("IDX images and labels disagree on sample count")
    return Dataset(x.reshape(len(x), -1).astype(np.float64) / 255.0, y, int(y.max()) + 1)
