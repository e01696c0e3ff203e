"""Local qubit embeddings of scalar data and product-state construction."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MapKind",
    "LocalMap",
    "EmbeddingRangeError",
    "embed_local",
    "embed_vector",
    "embed_batch",
    "local_norm",
    "clamp_to_domain",
]


class MapKind(str, enum.Enum):
    PHASE = "phase"
    SCALED_PHASE = "scaled-phase"
    POLYNOMIAL = "polynomial"


class EmbeddingRangeError(ValueError):
    """A data element falls outside the domain of the local map."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class LocalMap:
    """Single-element embedding ``x -> (phi_0(x), phi_1(x))``.

    ``phase`` uses the full quarter turn over ``[x_min, x_max]``;
    ``scaled-phase`` rotates by ``a * x / x_max``; ``polynomial`` is the
    unnormalized ``(1, a x)`` map and is only usable classically.
    """

    kind: MapKind
    a: float = 0.1
    x_min: float = 0.0
    x_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", MapKind(self.kind))
        if not self.x_max > self.x_min:
            raise ValueError(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        if self.kind in (MapKind.SCALED_PHASE, MapKind.POLYNOMIAL) and not self.a > 0:
            raise ValueError(f"scale a must be positive, got {self.a}")
        if self.kind is MapKind.SCALED_PHASE and self.a > math.pi / 2:
            raise ValueError("scaled-phase requires a <= pi/2 to stay on one branch")

    @property
    def normalized(self) -> bool:
        return self.kind is not MapKind.POLYNOMIAL

    @property
    def domain(self) -> tuple[float, float]:
        if self.kind is MapKind.PHASE:
            return self.x_min, self.x_max
        return 0.0, self.x_max

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "a": self.a, "x_min": self.x_min, "x_max": self.x_max}

    @classmethod
    def from_dict(cls, d: dict) -> "LocalMap":
        return cls(MapKind(d["kind"]), float(d["a"]), float(d["x_min"]), float(d["x_max"]))


def _amplitudes(x: np.ndarray, m: LocalMap) -> np.ndarray:
    if m.kind is MapKind.PHASE:
        theta = 0.5 * np.pi * (x - m.x_min) / (m.x_max - m.x_min)
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    if m.kind is MapKind.SCALED_PHASE:
        theta = m.a * x / m.x_max
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return np.stack([np.ones_like(x), m.a * x], axis=-1)


def _check_domain(x: np.ndarray, m: LocalMap) -> None:
    lo, hi = m.domain
    bad = np.flatnonzero(~((x >= lo) & (x <= hi)))
    if bad.size:
        i = int(bad[0])
        raise EmbeddingRangeError(
            f"element {i} = {x.flat[i]!r} outside [{lo}, {hi}] for {m.kind.value} map",
            index=i,
        )


def embed_local(x: float, m: LocalMap) -> np.ndarray:
    """Amplitude pair for a single scalar."""
    arr = np.asarray(x, dtype=np.float64).reshape(1)
    _check_domain(arr, m)
    return _amplitudes(arr, m)[0]


def embed_vector(x, m: LocalMap) -> np.ndarray:
    """Product state of a data vector, returned as an ``(L, 2)`` array."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("data vectors need at least 2 elements")
    _check_domain(x, m)
    return _amplitudes(x, m)


def embed_batch(X, m: LocalMap) -> np.ndarray:
    """Embed a batch ``(M, L)`` into ``(M, L, 2)`` amplitudes."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected (M, L) data, got shape {X.shape}")
    if X.shape[1] < 2:
        raise ValueError("data vectors need at least 2 elements")
    flat = X.reshape(-1)
    try:
        _check_domain(flat, m)
    except EmbeddingRangeError as err:
        row, col = divmod(err.index, X.shape[1])
        raise EmbeddingRangeError(
            f"sample {row}, element {col} = {flat[err.index]!r} outside map domain", index=col
        ) from None
    return _amplitudes(X, m)


def local_norm(site) -> float:
    """Squared norm of a single-site amplitude pair."""
    site = np.asarray(site, dtype=np.float64)
    return float(site @ site)


def clamp_to_domain(X, m: LocalMap) -> tuple[np.ndarray, int]:
    """Clip data into the map's domain; returns the clipped data and the
    number of elements that were moved."""
    X = np.asarray(X, dtype=np.float64)
    lo, hi = m.domain
    moved = int(np.count_nonzero((X < lo) | (X > hi)))
    return np.clip(X, lo, hi), moved
