"""Deterministic data sources for training and evaluation.

Three kinds: well-separated gaussian blobs for MLP runs, synthetic 28x28
pattern images (stripes / checkerboard / blank, plus seeded noise) for
conv runs, and labeled CSV files. Train and validation splits come from
decorrelated streams of the run seed, so any command that knows the
config and seed regenerates exactly the same arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import NnlError
from .tensor import RngState

__all__ = ["DataError", "DataSourceConfig", "DataSplit", "make_data",
           "gaussian_blobs", "pattern_images", "load_csv"]

IMAGE_SHAPE = (1, 28, 28)
_TRAIN_STREAM = 0x7261_696E  # arbitrary fixed tags for stream separation
_VAL_STREAM = 0x76616C00


class DataError(NnlError):
    """The data source is unreadable or inconsistent with its declaration."""


@dataclass
class DataSourceConfig:
    kind: str = "synthetic-gaussians"  # synthetic-gaussians | synthetic-images | csv
    classes: int = 2
    dim: int = 8                       # gaussians feature count
    samples: int = 2000
    val_samples: int = 500
    csv_path: str = ""
    shape: tuple | None = None         # csv sample shape; synthetic kinds fix their own

    @property
    def sample_shape(self) -> tuple:
        if self.kind == "synthetic-images":
            return IMAGE_SHAPE
        if self.kind == "csv" and self.shape is not None:
            return tuple(self.shape)
        return (self.dim,)


@dataclass
class DataSplit:
    train_x: np.ndarray
    train_label: np.ndarray
    val_x: np.ndarray
    val_label: np.ndarray


def _normals(rng: RngState, shape) -> np.ndarray:
    """Box-Muller on the uniform stream."""
    n = int(np.prod(shape, dtype=np.int64))
    u1 = 1.0 - rng.next_uniform((n,), 0.0, 1.0)  # (0, 1]
    u2 = rng.next_uniform((n,), 0.0, 1.0)
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z.astype(np.float32).reshape(shape)


def gaussian_blobs(n: int, classes: int, dim: int, rng: RngState):
    """Balanced, strongly separated class blobs in `dim` dimensions."""
    if dim < 2:
        raise DataError("gaussian source needs dim >= 2")
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim), dtype=np.float32)
    means[:, 0] = 3.0 * np.cos(angles)
    means[:, 1] = 3.0 * np.sin(angles)
    labels = (np.arange(n) % classes).astype(np.float32)
    x = means[labels.astype(np.int64)] + 0.5 * _normals(rng, (n, dim))
    order = rng.permutation(n)
    return x[order], labels[order]


def _pattern(class_id: int, size: int = 28) -> np.ndarray:
    r = np.arange(size)[:, None]
    c = np.arange(size)[None, :]
    which = class_id % 3
    if which == 0:  # horizontal stripes
        img = ((r // 2) % 2).astype(np.float32)
    elif which == 1:  # checkerboard
        img = (((r // 4) + (c // 4)) % 2).astype(np.float32)
    else:  # blank
        img = np.full((size, size), 0.5, dtype=np.float32)
    return np.broadcast_to(img, (size, size)).astype(np.float32)


def pattern_images(n: int, classes: int, rng: RngState):
    """Striped vs checkerboard vs blank 28x28 images with seeded noise."""
    if classes > 3:
        raise DataError("synthetic-images supports at most 3 classes")
    size = IMAGE_SHAPE[1]
    templates = np.stack([_pattern(c, size) for c in range(classes)])
    labels = (np.arange(n) % classes).astype(np.float32)
    x = templates[labels.astype(np.int64)][:, None, :, :]
    x = x + rng.next_uniform((n,) + IMAGE_SHAPE, -0.25, 0.25)
    order = rng.permutation(n)
    return x[order].astype(np.float32), labels[order]


def load_csv(path: str, sample_shape: tuple, classes: int):
    """Rows: integer label, then product(sample_shape) numeric features."""
    features = 1
    for d in sample_shape:
        features *= d
    xs, labels = [], []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row_no, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) != features + 1:
                    raise DataError(
                        f"{path}:{row_no}: expected 1 label + {features} features, "
                        f"got {len(row)} fields")
                try:
                    label = int(row[0])
                    vals = [float(v) for v in row[1:]]
                except ValueError as exc:
                    raise DataError(f"{path}:{row_no}: {exc}") from None
                if not 0 <= label < classes:
                    raise DataError(f"{path}:{row_no}: label {label} outside [0, {classes})")
                labels.append(float(label))
                xs.append(vals)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not xs:
        raise DataError(f"{path}: no data rows")
    x = np.asarray(xs, dtype=np.float32).reshape((len(xs),) + tuple(sample_shape))
    return x, np.asarray(labels, dtype=np.float32)


def make_data(cfg: DataSourceConfig, seed: int) -> DataSplit:
    """Materialize train and validation arrays for a config and seed."""
    if cfg.classes < 2:
        raise DataError("need at least 2 classes")
    if cfg.kind == "synthetic-gaussians":
        train = gaussian_blobs(cfg.samples, cfg.classes, cfg.dim,
                               RngState(seed=seed).derived(_TRAIN_STREAM))
        val = gaussian_blobs(cfg.val_samples, cfg.classes, cfg.dim,
                             RngState(seed=seed).derived(_VAL_STREAM))
    elif cfg.kind == "synthetic-images":
        train = pattern_images(cfg.samples, cfg.classes,
                               RngState(seed=seed).derived(_TRAIN_STREAM))
        val = pattern_images(cfg.val_samples, cfg.classes,
                             RngState(seed=seed).derived(_VAL_STREAM))
    elif cfg.kind == "csv":
        # the whole file serves as both splits; deterministic by content
        train = load_csv(cfg.csv_path, cfg.sample_shape, cfg.classes)
        val = train
    else:
        raise DataError(f"unknown data kind {cfg.kind!r}")
    return DataSplit(train[0], train[1], val[0], val[1])
