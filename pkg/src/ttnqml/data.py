"""Dataset ingestion: MNIST IDX files, HAR inertial windows, scaling."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import make_interp_spline

__all__ = [
    "DataFormatError",
    "ScalingError",
    "ScalingRecord",
    "Dataset",
    "read_idx",
    "read_idx_file",
    "write_idx",
    "resize_16",
    "scale_unit",
    "load_mnist",
    "load_har_split",
    "har_features",
    "har_dataset",
    "binary_walk_labels",
    "subsample",
    "default_data_dir",
]

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

HAR_WALKING = (1, 2, 3)
HAR_STATIONARY = (4, 5, 6)


class DataFormatError(ValueError):
    """Malformed or inconsistent input file."""


class ScalingError(ValueError):
    """Degenerate data range."""


@dataclass(frozen=True)
class ScalingRecord:
    """Affine map of one or more features onto [0, 1]."""

    x_min: np.ndarray
    x_max: np.ndarray

    @classmethod
    def fit(cls, train, axis=None) -> "ScalingRecord":
        train = np.asarray(train, dtype=np.float64)
        if train.size == 0:
            raise ScalingError("training split is empty")
        lo = np.asarray(train.min(axis=axis), dtype=np.float64)
        hi = np.asarray(train.max(axis=axis), dtype=np.float64)
        if np.any(hi <= lo):
            raise ScalingError(f"degenerate training range: min {lo} max {hi}")
        return cls(lo, hi)

    def apply(self, X) -> tuple[np.ndarray, int]:
        """Map into [0, 1]; returns the scaled data and how many values were clamped."""
        X = np.asarray(X, dtype=np.float64)
        scaled = (X - self.x_min) / (self.x_max - self.x_min)
        outside = int(np.count_nonzero((scaled < 0.0) | (scaled > 1.0)))
        return np.clip(scaled, 0.0, 1.0), outside

    def to_dict(self) -> dict:
        return {"x_min": np.atleast_1d(self.x_min).tolist(), "x_max": np.atleast_1d(self.x_max).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingRecord":
        lo, hi = np.asarray(d["x_min"], float), np.asarray(d["x_max"], float)
        if lo.size == 1:
            lo, hi = lo.reshape(()), hi.reshape(())
        return cls(lo, hi)


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    layout: dict = field(default_factory=dict)
    scaling: Optional[ScalingRecord] = None
    name: str = ""

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2:
            raise DataFormatError(f"samples must be (M, L), got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise DataFormatError("one label per sample required")
        if self.labels.size and self.labels.min() < 0:
            raise DataFormatError("labels must be non-negative")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.layout.get("n_classes", self.labels.max() + 1 if self.labels.size else 0))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def read_idx_file(path) -> np.ndarray:
    """Parse one unsigned-byte IDX file into an array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataFormatError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x} at offset 0")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated dimension list at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = header_end + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise DataFormatError(
            f"{path}: truncated payload at offset {len(raw)}, expected {expected} bytes"
        )
    if len(raw) > expected:
        raise DataFormatError(f"{path}: {len(raw) - expected} trailing bytes after offset {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims).copy()


def read_idx(image_path, label_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image file and its label file; returns ``(images, labels)``."""
    images = read_idx_file(image_path)
    labels = read_idx_file(label_path)
    if images.ndim != 3:
        raise DataFormatError(f"{image_path}: expected magic 0x{IDX_IMAGE_MAGIC:08x} (3-d images)")
    if labels.ndim != 1:
        raise DataFormatError(f"{label_path}: expected magic 0x{IDX_LABEL_MAGIC:08x} (1-d labels)")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return images, labels


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataFormatError("only unsigned-byte IDX files are supported")
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array).tobytes())


# ---------------------------------------------------------------------------
# MNIST preprocessing
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _spline_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows evaluate the natural cubic interpolating spline at output pixel centres."""
    grid = np.arange(n_in, dtype=np.float64)
    centres = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    spline = make_interp_spline(grid, np.eye(n_in), k=3, bc_type="natural")
    mat = spline(centres)
    mat.setflags(write=False)
    return mat


def resize_16(images, size: int = 16) -> np.ndarray:
    """Resample square images to ``size x size`` with a bicubic spline.

    Accepts one image ``(N, N)`` or a batch ``(M, N, N)``. Each output is
    clamped to the value range of its own input image.
    """
    imgs = np.asarray(images, dtype=np.float64)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    if imgs.ndim != 3 or imgs.shape[1] != imgs.shape[2]:
        raise DataFormatError(f"expected square images, got shape {imgs.shape}")
    r = _spline_matrix(imgs.shape[1], size)
    out = np.einsum("ij,mjk,lk->mil", r, imgs, r, optimize=True)
    lo = imgs.min(axis=(1, 2))[:, None, None]
    hi = imgs.max(axis=(1, 2))[:, None, None]
    out = np.clip(out, lo, hi)
    return out[0] if single else out


def scale_unit(train, test=None):
    """Scale by the global training min/max.

    Returns ``(train_scaled, test_scaled, record, n_test_clamped)``; the test
    entries are ``None``/0 when no test split is given.
    """
    record = ScalingRecord.fit(train)
    train_s, _ = record.apply(train)
    if test is None:
        return train_s, None, record, 0
    test_s, clamped = record.apply(test)
    return train_s, test_s, record, clamped


def load_mnist(
    root,
    digits: Optional[tuple] = None,
    size: int = 16,
    train_limit: Optional[int] = None,
    test_limit: Optional[int] = None,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Load, filter, resize and scale MNIST from a directory of IDX files."""
    root = Path(root)

    def find(*names):
        for n in names:
            if (root / n).exists():
                return root / n
        raise FileNotFoundError(f"none of {names} found in {root}")

    tr_img, tr_lab = read_idx(
        find("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
        find("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    )
    te_img, te_lab = read_idx(
        find("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
        find("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
    )
    if digits is not None:
        digits = tuple(int(d) for d in digits)
        keep_tr = np.isin(tr_lab, digits)
        keep_te = np.isin(te_lab, digits)
        tr_img, tr_lab = tr_img[keep_tr], tr_lab[keep_tr]
        te_img, te_lab = te_img[keep_te], te_lab[keep_te]
        remap = {d: i for i, d in enumerate(digits)}
        tr_lab = np.array([remap[int(v)] for v in tr_lab])
        te_lab = np.array([remap[int(v)] for v in te_lab])
    rng = np.random.default_rng(seed)
    tr_idx = subsample(len(tr_lab), train_limit, rng)
    te_idx = subsample(len(te_lab), test_limit, rng)
    tr = resize_16(tr_img[tr_idx], size).reshape(len(tr_idx), -1)
    te = resize_16(te_img[te_idx], size).reshape(len(te_idx), -1)
    tr_s, te_s, record, _ = scale_unit(tr, te)
    n_classes = len(digits) if digits is not None else 10
    layout = {"kind": "image", "rows": size, "cols": size, "n_classes": n_classes}
    return (
        Dataset(tr_s, tr_lab[tr_idx], dict(layout), record, "mnist-train"),
        Dataset(te_s, te_lab[te_idx], dict(layout), record, "mnist-test"),
    )


def subsample(n: int, limit: Optional[int], rng) -> np.ndarray:
    """Sorted random subset of ``range(n)`` of size ``limit`` (all if None)."""
    if limit is None or limit >= n:
        return np.arange(n)
    if limit < 1:
        raise ValueError("limit must be positive")
    return np.sort(rng.choice(n, size=limit, replace=False))


# ---------------------------------------------------------------------------
# HAR
# ---------------------------------------------------------------------------


def _load_signal_file(path) -> np.ndarray:
    try:
        return np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as err:
        raise DataFormatError(f"{path}: {err}") from None


def load_har_split(root, split: str, accel: str = "total") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read windowed inertial signals of one split.

    Returns ``(accel (M,T,3), gyro (M,T,3), labels (M,))`` with labels 1..6.
    ``accel`` selects ``total_acc`` or ``body_acc`` files.
    """
    if accel not in ("total", "body"):
        raise ValueError("accel must be 'total' or 'body'")
    base = Path(root) / split
    sig = base / "Inertial Signals"
    acc = np.stack(
        [_load_signal_file(sig / f"{accel}_acc_{ax}_{split}.txt") for ax in "xyz"], axis=-1
    )
    gyr = np.stack([_load_signal_file(sig / f"body_gyro_{ax}_{split}.txt") for ax in "xyz"], axis=-1)
    labels = np.loadtxt(base / f"y_{split}.txt", dtype=np.int64, ndmin=1)
    if not (acc.shape[0] == gyr.shape[0] == labels.shape[0]):
        raise DataFormatError(
            f"{split}: window counts differ (acc {acc.shape[0]}, gyro {gyr.shape[0]}, labels {labels.shape[0]})"
        )
    return acc, gyr, labels


def _norm_series(xyz) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.shape[-1] != 3:
        raise DataFormatError(f"expected 3 axes in the last dimension, got {xyz.shape}")
    return np.sqrt(np.einsum("...k,...k->...", xyz, xyz))


def har_features(accel, gyro, record: Optional[ScalingRecord] = None):
    """Interleaved ``[a(1), g(1), a(2), g(2), ...]`` norm features.

    ``accel``/``gyro`` are ``(M, T, 3)`` (or ``(T, 3)``). Each feature is
    mapped onto [0, 1] with ``record``; when absent the record is fitted on
    these inputs (so pass the training split first). Returns
    ``(features (M, 2T), record, n_clamped)``.
    """
    a = _norm_series(accel)
    g = _norm_series(gyro)
    if a.shape != g.shape:
        raise DataFormatError(f"accel/gyro length mismatch: {a.shape} vs {g.shape}")
    single = a.ndim == 1
    if single:
        a, g = a[None], g[None]
    stacked = np.stack([a, g], axis=-1)  # (M, T, 2)
    if record is None:
        record = ScalingRecord.fit(stacked.reshape(-1, 2), axis=0)
    scaled, clamped = record.apply(stacked)
    feats = scaled.reshape(scaled.shape[0], -1)
    return (feats[0] if single else feats), record, clamped


def binary_walk_labels(labels) -> np.ndarray:
    """Walking activities (1, 2, 3) map to 0, stationary ones (4, 5, 6) to 1."""
    labels = np.asarray(labels, dtype=np.int64)
    bad = labels[(labels < 1) | (labels > 6)]
    if bad.size:
        raise DataFormatError(f"activity label {int(bad[0])} outside 1..6")
    return (labels >= 4).astype(np.int64)


def har_dataset(
    root,
    accel: str = "total",
    train_limit: Optional[int] = None,
    test_limit: Optional[int] = None,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Binary walking/stationary HAR datasets with interleaved norm features."""
    tr_acc, tr_gyr, tr_lab = load_har_split(root, "train", accel)
    te_acc, te_gyr, te_lab = load_har_split(root, "test", accel)
    rng = np.random.default_rng(seed)
    tr_idx = subsample(len(tr_lab), train_limit, rng)
    te_idx = subsample(len(te_lab), test_limit, rng)
    tr, record, _ = har_features(tr_acc[tr_idx], tr_gyr[tr_idx])
    te, _, _ = har_features(te_acc[te_idx], te_gyr[te_idx], record)
    layout = {"kind": "timeseries", "timesteps": tr_acc.shape[1], "n_features": 2, "n_classes": 2}
    return (
        Dataset(tr, binary_walk_labels(tr_lab[tr_idx]), dict(layout), record, "har-train"),
        Dataset(te, binary_walk_labels(te_lab[te_idx]), dict(layout), record, "har-test"),
    )


def default_data_dir() -> Path:
    return Path(os.environ.get("TTNQML_DATA", "/root/data"))
