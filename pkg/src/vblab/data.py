"""Datasets: synthetic blobs, IDX image files, CSV, splitting and scaling."""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Tuple

import numpy as np

from vblab.errors import (
    ConsistencyError,
    ContractError,
    IdxFormatError,
    ParameterError,
    StratificationError,
    TruncatedFileError,
)
from vblab.logging import get_logger
from vblab.rng import make_rng

logger = get_logger('data')

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass
class LabeledDataset:
    """Features, labels and class count, plus original row indices."""
    features: np.ndarray
    labels: np.ndarray
    K: int
    name: str = 'dataset'
    source_index: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or 0 in self.features.shape:
            raise ContractError(
                f"Features must be a non-empty N x d matrix, got {self.features.shape}"
            )
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ContractError(f"Expected {n} labels, got shape {self.labels.shape}")
        if self.K < 2:
            raise ContractError(f"A dataset needs K >= 2 classes, got K={self.K}")
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ContractError(f"Labels must lie in [0, {self.K})")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("Features must be finite")
        if self.source_index is None:
            self.source_index = np.arange(n)
        else:
            self.source_index = np.asarray(self.source_index, dtype=np.int64)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> 'LabeledDataset':
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.K,
                              name or self.name, self.source_index[indices])

    def with_labels(self, labels: np.ndarray) -> 'LabeledDataset':
        """Same features with replaced labels (e.g. after corruption)."""
        return LabeledDataset(self.features, labels, self.K, self.name,
                              self.source_index)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def to_csv(self, path: Path) -> Path:
        """Write ``f0,...,f{d-1},label`` rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow([f'f{j}' for j in range(self.d)] + ['label'])
            for x, y in zip(self.features, self.labels):
                writer.writerow([repr(float(v)) for v in x] + [int(y)])
        logger.info("Wrote %d rows to %s", self.n, path)
        return path

    @classmethod
    def from_csv(cls, path: Path, K: Optional[int] = None,
                 name: Optional[str] = None) -> 'LabeledDataset':
        """Read a dataset CSV written by ``to_csv``."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Dataset file not found: {path}")
        with open(path, newline='', encoding='utf-8') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[-1] != 'label':
                raise ContractError(f"{path}: last CSV column must be 'label'")
            rows = [row for row in reader if row]
        if not rows:
            raise ContractError(f"{path}: no data rows")
        table = np.array(rows, dtype=float)
        labels = table[:, -1].astype(np.int64)
        k = K if K is not None else max(int(labels.max()) + 1, 2)
        return cls(table[:, :-1], labels, k, name or path.stem)


# Synthetic data -------------------------------------------------------------

def _place_means(rng: np.random.Generator, K: int, d: int,
                 separation: float) -> np.ndarray:
    """Means at ``separation`` times random unit directions, pairwise at
    least ``separation / 2`` apart."""
    means = []
    for _ in range(K):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            direction = rng.standard_normal(d)
            candidate = separation * direction / np.linalg.norm(direction)
            if all(np.linalg.norm(candidate - m) >= separation / 2 for m in means):
                means.append(candidate)
                break
        else:
            raise ParameterError(
                f"Could not place {K} class means in d={d} with separation "
                f"{separation}; increase d"
            )
    return np.array(means)


def gen_gaussian_blobs(K: int, per_class: int, d: int, separation: float,
                       seed: int) -> LabeledDataset:
    """K isotropic unit-variance Gaussian classes, ``per_class`` points each."""
    if K < 2 or per_class < 1 or d < 2 or not separation > 0:
        raise ParameterError(
            f"Blobs need K >= 2, per_class >= 1, d >= 2 and separation > 0 "
            f"(got K={K}, per_class={per_class}, d={d}, separation={separation})"
        )
    means = _place_means(make_rng(seed, 'blobs-means'), K, d, separation)
    noise = make_rng(seed, 'blobs-points').standard_normal((K * per_class, d))
    labels = np.repeat(np.arange(K), per_class)
    features = means[labels] + noise
    logger.info("Generated %d blob samples (K=%d, d=%d, separation=%g)",
                labels.size, K, d, separation)
    return LabeledDataset(features, labels, K, name=f'blobs-k{K}-d{d}')


# IDX ingestion --------------------------------------------------------------

def _read_exact(f: BinaryIO, size: int, path: Path) -> bytes:
    data = f.read(size)
    if len(data) < size:
        raise TruncatedFileError(f"{path}: file ends early (wanted {size} bytes)")
    return data


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    with open(path, 'rb') as f:
        found, = struct.unpack('>I', _read_exact(f, 4, path))
        if found != magic:
            raise IdxFormatError(
                f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}"
            )
        dims = struct.unpack(f'>{ndim}I', _read_exact(f, 4 * ndim, path))
        payload = _read_exact(f, int(np.prod(dims)), path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_images(images_path: Path, labels_path: Path,
                    K: Optional[int] = None) -> LabeledDataset:
    """Load an IDX image/label pair (MNIST layout) as a flat dataset.

    Pixels are scaled to ``[0, 1]`` and each image is flattened row-major.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(float) / 255.0
    k = K if K is not None else max(int(labels.max()) + 1, 2)
    logger.info("Loaded %d IDX images of %dx%d", *images.shape)
    return LabeledDataset(features, labels, k, name=Path(images_path).stem)


# Splitting and scaling ------------------------------------------------------

def split_train_test(ds: LabeledDataset, test_fraction: float,
                     seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified shuffle split; each class keeps its proportion within one
    sample."""
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = make_rng(seed, 'split')
    train_parts, test_parts = [], []
    for c in range(ds.K):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise StratificationError(f"Class {c} has fewer than 2 samples")
        members = rng.permutation(members)
        n_test = int(np.clip(round(test_fraction * members.size), 1, members.size - 1))
        test_parts.append(members[:n_test])
        train_parts.append(members[n_test:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    return (ds.subset(train_idx, f'{ds.name}-train'),
            ds.subset(test_idx, f'{ds.name}-test'))


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine map fitted on a training split."""
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, ds: LabeledDataset) -> 'Standardizer':
        mean = ds.features.mean(axis=0)
        scale = ds.features.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(mean, scale)

    def transform(self, ds: LabeledDataset) -> LabeledDataset:
        return LabeledDataset((ds.features - self.mean) / self.scale, ds.labels,
                              ds.K, ds.name, ds.source_index)


def standardize(train: LabeledDataset,
                test: LabeledDataset) -> Tuple[LabeledDataset, LabeledDataset, Standardizer]:
    """Standardize both splits with statistics of ``train`` only."""
    scaler = Standardizer.fit(train)
    return scaler.transform(train), scaler.transform(test), scaler


def load_labels(path: Path) -> np.ndarray:
    """Read integer labels from a text/CSV file, one per line.

    A header row is allowed; when the file has several columns the ``label``
    column (or else the last one) is used.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Label file not found: {path}")
    with open(path, newline='', encoding='utf-8') as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise ContractError(f"{path}: no labels")
    column = len(rows[0]) - 1
    if not rows[0][-1].strip().lstrip('-').isdigit():
        header = [name.strip() for name in rows[0]]
        column = header.index('label') if 'label' in header else column
        rows = rows[1:]
    try:
        return np.array([int(row[column]) for row in rows], dtype=np.int64)
    except (ValueError, IndexError) as e:
        raise ContractError(f"{path}: malformed label row ({e})")
