"""Datasets: the 2-D sign-product toy task, IDX image files, CSV regression tables."""
from __future__ import annotations

import csv
import gzip
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataError(ValueError):
    """Unreadable or inconsistent input data."""


@dataclass(frozen=True)
class NormalizationStats:
    """Train-split column statistics; constant columns are left untouched."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None

    @property
    def constant_inputs(self) -> np.ndarray:
        return self.x_std == 0

    @staticmethod
    def _fwd(a, mean, std):
        keep = std == 0
        return np.where(keep, a, (a - mean) / np.where(keep, 1.0, std))

    @staticmethod
    def _inv(a, mean, std):
        keep = std == 0
        return np.where(keep, a, a * std + mean)

    def apply_inputs(self, x):
        return self._fwd(np.asarray(x, dtype=float), self.x_mean, self.x_std)

    def invert_inputs(self, x):
        return self._inv(np.asarray(x, dtype=float), self.x_mean, self.x_std)

    def apply_targets(self, y):
        return y if self.y_mean is None else self._fwd(np.asarray(y, dtype=float), self.y_mean, self.y_std)

    def invert_targets(self, y):
        return y if self.y_mean is None else self._inv(np.asarray(y, dtype=float), self.y_mean, self.y_std)

    @property
    def target_scale(self) -> np.ndarray:
        """Per-target factor mapping standardized units back to original units."""
        if self.y_std is None:
            return np.ones(1)
        return np.where(self.y_std == 0, 1.0, self.y_std)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    n_classes: int | None = None
    names: tuple[str, ...] = ()
    stats: NormalizationStats | None = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim != 2:
            raise DataError(f"inputs must be a 2-d array, got shape {x.shape}")
        y = np.asarray(self.targets)
        if y.shape[0] != x.shape[0]:
            raise DataError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if self.n_classes is not None:
            y = y.astype(np.int64)
            if y.ndim != 1 or (y.size and (y.min() < 0 or y.max() >= self.n_classes)):
                raise DataError(f"labels must lie in [0, {self.n_classes})")
        else:
            y = y.astype(float).reshape(len(y), -1)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])


# -- synthetic ---------------------------------------------------------------

def gen_sign_product(n: int, seed: int) -> Dataset:
    """Standard 2-D Gaussian points; label 0 when x1*x2 >= 0, else 1."""
    if n < 1:
        raise ValueError("n must be positive")
    x = np.random.default_rng(seed).standard_normal((n, 2))
    y = (x[:, 0] * x[:, 1] < 0).astype(np.int64)
    return Dataset(x, y, n_classes=2, names=("x1", "x2"))


def distance_to_axes(x) -> np.ndarray | float:
    d = np.min(np.abs(np.asarray(x, dtype=float)), axis=-1)
    return float(d) if np.ndim(d) == 0 else d


# -- IDX ----------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _idx_payload(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    head = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataError(f"{what}: header truncated ({len(raw)} bytes)")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise DataError(f"{what}: magic number 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < head:
        raise DataError(f"{what}: header truncated ({len(raw)} bytes)")
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(np.int64)
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise DataError(f"{what}: payload truncated, need {size} bytes, have {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Byte images (scaled to [0, 1], flattened) with their labels."""
    images = _idx_payload(_read_bytes(images_path), IDX_IMAGES, 3, "images")
    labels = _idx_payload(_read_bytes(labels_path), IDX_LABELS, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count: {images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(float) / 255.0
    try:
        return Dataset(x, labels.astype(np.int64), n_classes=n_classes)
    except DataError as e:
        raise DataError(f"labels: {e}") from e


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for uint8 arrays (handy for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    head = IDX_IMAGES.to_bytes(4, "big") + np.array(images.shape, dtype=">u4").tobytes()
    Path(images_path).write_bytes(head + images.tobytes())
    head = IDX_LABELS.to_bytes(4, "big") + np.array(labels.shape, dtype=">u4").tobytes()
    Path(labels_path).write_bytes(head + labels.tobytes())


# -- CSV ----------------------------------------------------------------------

def load_csv_regression(path, target_columns: Sequence[str] | None = None,
                        feature_columns: Sequence[str] | None = None) -> Dataset:
    """Numeric table with a header row.  Targets default to the last column."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    targets = list(target_columns) if target_columns else [header[-1]]
    missing = [c for c in targets if c not in header]
    if missing:
        raise DataError(f"{path}: target column(s) {missing} not in header {header}")
    features = list(feature_columns) if feature_columns else [h for h in header if h not in targets]
    missing = [c for c in features if c not in header]
    if missing:
        raise DataError(f"{path}: feature column(s) {missing} not in header")
    table = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        try:
            table[i - 1] = [float(c) for c in row]
        except ValueError as e:
            raise DataError(f"{path}: row {i}: non-numeric cell ({e})") from e
    col = {h: j for j, h in enumerate(header)}
    x = table[:, [col[c] for c in features]]
    y = table[:, [col[c] for c in targets]]
    return Dataset(x, y, names=tuple(features) + tuple(targets))


# -- preprocessing ------------------------------------------------------------

def standardize_fit_apply(train: Dataset, others: Sequence[Dataset] = (),
                          targets: bool | None = None):
    """Fit column statistics on ``train`` and apply them everywhere.

    Targets are standardized too for regression data unless ``targets=False``.
    Returns ``(train_std, [others_std...], stats)``.
    """
    if len(train) == 0:
        raise ValueError("cannot fit statistics on an empty split")
    if targets is None:
        targets = not train.is_classification
    x_mean = train.inputs.mean(axis=0)
    x_std = train.inputs.std(axis=0)
    y_mean = y_std = None
    if targets:
        y_mean = train.targets.mean(axis=0)
        y_std = train.targets.std(axis=0)
    stats = NormalizationStats(x_mean, x_std, y_mean, y_std)

    def tf(ds: Dataset) -> Dataset:
        return replace(ds, inputs=stats.apply_inputs(ds.inputs),
                       targets=stats.apply_targets(ds.targets) if targets else ds.targets,
                       stats=stats)

    return tf(train), [tf(d) for d in others], stats


@dataclass
class BatchIterator:
    """Seeded minibatches; every pass over it is one epoch with a fresh permutation."""

    data: Dataset
    batch_size: int
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self._rng = np.random.default_rng(self.seed)

    def __len__(self):
        return -(-len(self.data) // self.batch_size)

    def __iter__(self) -> Iterator[Dataset]:
        order = self._rng.permutation(len(self.data))
        for start in range(0, len(order), self.batch_size):
            yield self.data.subset(order[start:start + self.batch_size])


def train_test_split(ds: Dataset, test_fraction: float, seed: int):
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def split_and_batch(ds: Dataset, test_fraction: float, batch_size: int, seed: int):
    """``(train, test, batches)`` where ``batches`` iterates the train split per epoch."""
    train, test = train_test_split(ds, test_fraction, seed)
    return train, test, BatchIterator(train, batch_size, seed)
