"""Datasets and vertical feature partitioning.

Loads MNIST from the standard IDX files, generates synthetic datasets
(tabular with known-informative columns, and a 28x28 image-like surrogate
for running the full pipeline when MNIST files are unavailable), splits
feature columns across clients, and iterates aligned mini-batches.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import rng_stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix in [0, 1] with integer class labels."""

    features: np.ndarray  # (m, d) float64
    labels: np.ndarray  # (m,) int64
    name: str

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError("features must be a nonempty 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("label count must match sample count")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subsample(self, m: int, seed: int) -> "Dataset":
        """First m rows of a seeded permutation of the dataset."""
        if m >= self.num_samples:
            return self
        idx = rng_stream(seed, "subsample").permutation(self.num_samples)[:m]
        return Dataset(self.features[idx], self.labels[idx], f"{self.name}[{m}]")


@dataclass(frozen=True)
class VerticalPartition:
    """Disjoint, covering assignment of feature columns to clients."""

    client_columns: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for cols in self.client_columns:
            if len(cols) == 0:
                raise ValueError("every client needs at least one column")
            overlap = seen.intersection(cols)
            if overlap:
                raise ValueError(f"columns assigned to more than one client: {sorted(overlap)}")
            seen.update(cols)
        if seen != set(range(len(seen))) or len(seen) != max(seen) + 1:
            raise ValueError("client columns must cover 0..d-1 exactly")

    @property
    def num_clients(self) -> int:
        return len(self.client_columns)

    @property
    def num_features(self) -> int:
        return sum(len(c) for c in self.client_columns)


@dataclass
class Batch:
    """One aligned mini-batch: the same rows seen by every client."""

    sample_indices: np.ndarray
    per_client_features: list[np.ndarray]
    labels: np.ndarray


def partition(
    d: int,
    n_clients: int,
    scheme: str = "contiguous",
    explicit: list[list[int]] | None = None,
) -> VerticalPartition:
    """Assign feature columns 0..d-1 to n_clients clients.

    Schemes:
        contiguous: N nearly equal runs; the first d mod N clients get one
            extra column.
        strided: client i gets columns i, i+N, i+2N, ...
        explicit: use the given lists (validated disjoint and covering).
    """
    if n_clients < 2:
        raise ValueError("need at least 2 clients")
    if d < n_clients:
        raise ValueError("need at least one column per client")
    if scheme == "contiguous":
        base, extra = divmod(d, n_clients)
        cols, start = [], 0
        for i in range(n_clients):
            size = base + (1 if i < extra else 0)
            cols.append(tuple(range(start, start + size)))
            start += size
        return VerticalPartition(tuple(cols))
    if scheme == "strided":
        return VerticalPartition(tuple(tuple(range(i, d, n_clients)) for i in range(n_clients)))
    if scheme == "explicit":
        if explicit is None or len(explicit) != n_clients:
            raise ValueError("explicit scheme needs one column list per client")
        return VerticalPartition(tuple(tuple(int(c) for c in lst) for lst in explicit))
    raise ValueError(f"unknown partition scheme {scheme!r}")


def split_columns(features: np.ndarray, part: VerticalPartition) -> list[np.ndarray]:
    """Per-client feature blocks for a row-aligned feature matrix."""
    return [features[:, list(cols)] for cols in part.client_columns]


# ---------------------------------------------------------------------------
# MNIST (IDX format)
# ---------------------------------------------------------------------------


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = gzip.open(path, "rb").read() if path.suffix == ".gz" else path.read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path.name}: truncated file (no magic number)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ValueError(
            f"{path.name}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path.name}: truncated file (incomplete header)")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    if body.size != count:
        raise ValueError(f"{path.name}: truncated file ({body.size} bytes, expected {count})")
    return body.reshape(dims)


def _find_idx_file(directory: Path, stem: str) -> Path:
    # Both '-' and '.' separators occur in the wild; also accept gzipped files.
    for name in (f"{stem}-ubyte", f"{stem}-ubyte.gz"):
        for sep_name in (name, name.replace("-idx", ".idx", 1)):
            candidate = directory / sep_name
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"missing MNIST file {stem}-ubyte in {directory}")


def load_mnist(directory: str | Path) -> tuple[Dataset, Dataset]:
    """Load the four standard MNIST IDX files from a directory.

    Returns:
        (train, test) datasets with pixels scaled to [0, 1]: train is
        60,000 x 784 and test is 10,000 x 784 for the official files.

    Raises:
        FileNotFoundError: a file is missing.
        ValueError: bad magic number, truncated file, or image/label
            count mismatch.
    """
    directory = Path(directory)
    splits = []
    for split, images_stem, labels_stem in (
        ("train", "train-images-idx3", "train-labels-idx1"),
        ("test", "t10k-images-idx3", "t10k-labels-idx1"),
    ):
        images = _read_idx(_find_idx_file(directory, images_stem), IMAGE_MAGIC)
        labels = _read_idx(_find_idx_file(directory, labels_stem), LABEL_MAGIC)
        if images.ndim != 3:
            raise ValueError(f"{split} images: expected 3-D idx data")
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{split}: {images.shape[0]} images but {labels.shape[0]} labels"
            )
        features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        splits.append(Dataset(features, labels.astype(np.int64), f"mnist-{split}"))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------


def synthetic_dataset(
    m: int,
    d: int,
    num_classes: int,
    informative_cols: set[int] | list[int],
    seed: int,
    margin: float = 0.3,
) -> Dataset:
    """Tabular dataset whose labels depend only on the informative columns.

    Features are i.i.d. uniform in [0, 1). Labels come from a linear
    teacher applied to the informative columns (argmax over classes);
    rows whose top-two teacher scores are closer than `margin` are
    resampled, so a linear model can separate the classes cleanly.
    Non-informative columns are pure noise with zero mutual information
    with the labels by construction.
    """
    informative = sorted(int(c) for c in informative_cols)
    if any(c < 0 or c >= d for c in informative):
        raise ValueError("informative columns out of range")
    if not informative and num_classes > 1:
        raise ValueError("need informative columns to produce more than one class")
    rng = rng_stream(seed, "synthetic-data")
    if num_classes == 1 or not informative:
        return Dataset(rng.random((m, d)), np.zeros(m, dtype=np.int64), "synthetic")

    teacher = rng.standard_normal((len(informative), num_classes)) / np.sqrt(len(informative))
    features = np.empty((0, d))
    labels = np.empty(0, dtype=np.int64)
    while features.shape[0] < m:
        block = rng.random((2 * m, d))
        scores = (block[:, informative] - 0.5) @ teacher
        top2 = np.sort(scores, axis=1)[:, -2:]
        keep = (top2[:, 1] - top2[:, 0]) >= margin * scores.std()
        features = np.vstack([features, block[keep]])
        labels = np.concatenate([labels, scores[keep].argmax(axis=1)])
    return Dataset(features[:m], labels[:m], "synthetic")


def synthetic_image_dataset(
    m_train: int,
    m_test: int,
    seed: int,
    side: int = 28,
    num_classes: int = 10,
    modes_per_class: int = 3,
    shift: int = 2,
    pixel_noise: float = 0.25,
    label_noise: float = 0.03,
) -> tuple[Dataset, Dataset]:
    """Digit-like grayscale image classification task (side x side, [0, 1]).

    A deterministic stand-in for MNIST-scale experiments: each class has a
    few sparse blob prototypes; samples are randomly shifted, intensity
    jittered, noised, and a small label-noise fraction caps attainable
    accuracy. Same feature count (side**2) and class count as MNIST at the
    default settings.
    """
    rng = rng_stream(seed, "synthetic-image")
    d = side * side
    yy, xx = np.mgrid[0:side, 0:side]
    prototypes = np.zeros((num_classes, modes_per_class, side, side))
    for c in range(num_classes):
        for v in range(modes_per_class):
            img = np.zeros((side, side))
            for _ in range(6):
                cy, cx = rng.uniform(4, side - 4, size=2)
                sy, sx = rng.uniform(1.0, 2.6, size=2)
                img += np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
            img /= img.max()
            img[img < 0.35] = 0.0  # keep strokes sparse, like handwritten digits
            prototypes[c, v] = img

    def sample_split(m: int, tag: str) -> Dataset:
        labels = rng.integers(0, num_classes, size=m)
        modes = rng.integers(0, modes_per_class, size=m)
        shifts = rng.integers(-shift, shift + 1, size=(m, 2))
        intensity = rng.uniform(0.7, 1.0, size=m)
        noise = rng.normal(0.0, pixel_noise, size=(m, side, side))
        images = np.empty((m, side, side))
        for j in range(m):
            base = np.roll(prototypes[labels[j], modes[j]], tuple(shifts[j]), axis=(0, 1))
            images[j] = base * intensity[j]
        images = np.clip(images + noise * (images > 0), 0.0, 1.0)
        flip = rng.random(m) < label_noise
        labels[flip] = rng.integers(0, num_classes, size=int(flip.sum()))
        return Dataset(images.reshape(m, d), labels, f"synthetic-image-{tag}")

    return sample_split(m_train, "train"), sample_split(m_test, "test")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


class BatchStream:
    """Without-replacement mini-batches, reshuffled every epoch from a seeded stream."""

    def __init__(
        self,
        dataset: Dataset,
        part: VerticalPartition,
        batch_size: int,
        master_seed: int,
    ) -> None:
        if batch_size > dataset.num_samples:
            raise ValueError("batch_size exceeds dataset size")
        if part.num_features != dataset.num_features:
            raise ValueError("partition does not match dataset width")
        self.dataset = dataset
        self.part = part
        self.batch_size = batch_size
        self.master_seed = master_seed
        self.epoch = 0
        self._cursor = 0
        self._order = self._shuffle()

    def _shuffle(self) -> np.ndarray:
        stream = rng_stream(self.master_seed, "batch-order", round_index=self.epoch)
        return stream.permutation(self.dataset.num_samples)

    def next_batch(self) -> Batch:
        if self._cursor >= self.dataset.num_samples:
            self.epoch += 1
            self._cursor = 0
            self._order = self._shuffle()
        idx = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.make_batch(idx)

    def make_batch(self, idx: np.ndarray) -> Batch:
        rows = self.dataset.features[idx]
        return Batch(
            sample_indices=idx,
            per_client_features=split_columns(rows, self.part),
            labels=self.dataset.labels[idx],
        )

    def disjoint_batch(self, exclude: np.ndarray, size: int, round_index: int) -> Batch:
        """A seeded batch drawn from the rows not in `exclude` (the eval twin)."""
        mask = np.ones(self.dataset.num_samples, dtype=bool)
        mask[exclude] = False
        pool = np.flatnonzero(mask)
        stream = rng_stream(self.master_seed, "eval-batch", round_index=round_index)
        idx = stream.choice(pool, size=min(size, pool.size), replace=False)
        return self.make_batch(idx)


# ---------------------------------------------------------------------------
# CSV persistence for synthetic datasets
# ---------------------------------------------------------------------------


def write_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    """Persist a dataset as CSV: header row, features then label column."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(dataset.num_features)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([f"{v:.10g}" for v in row] + [int(label)])


def read_dataset_csv(path: str | Path, name: str = "csv") -> Dataset:
    """Load a dataset written by write_dataset_csv."""
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("expected a header row ending in 'label'")
        rows = [line for line in reader if line]
    features = np.array([[float(v) for v in row[:-1]] for row in rows])
    labels = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return Dataset(features, labels, name)
