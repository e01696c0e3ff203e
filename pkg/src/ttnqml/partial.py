"""Classification from data vectors with missing elements.

Absent sites enter the tree as the identity ("contracted") and are pushed
upward with three object kinds: ``Contracted``, ``FeatureVector`` and
``DensityOperator``. Density operators are stored in factor form
``rho = F^T F`` with at most ``dim`` rows, and trace-normalized after every
step.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .classifier import MissingWeightsError, classify
from .encoding import embed_batch
from .numerics import ContractError, fix_signs
from .ttn import Isometry, TTNModel

__all__ = [
    "Contracted",
    "CONTRACTED",
    "FeatureVector",
    "DensityOperator",
    "DataMask",
    "MaskError",
    "PartialResult",
    "renorm_step",
    "infer_partial",
    "infer_partial_batch",
    "parse_mask",
]

RANK_RTOL = 1e-12
TIE_TOL = 1e-12


class MaskError(ValueError):
    pass


class Contracted:
    """Identity on a bond: every site below it is absent."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "CONTRACTED"


CONTRACTED = Contracted()


@dataclass
class FeatureVector:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ContractError("feature vector has non-finite entries")


@dataclass
class DensityOperator:
    """Unit-trace PSD operator held as ``F^T F``; ``log_norm`` accumulates
    the logarithm of every trace that was divided out."""

    factor: np.ndarray
    log_norm: float = 0.0

    @classmethod
    def from_matrix(cls, rho, log_norm: float = 0.0) -> "DensityOperator":
        rho = np.asarray(rho, dtype=np.float64)
        w, v = np.linalg.eigh(0.5 * (rho + rho.T))
        if w.size and w[0] < -1e-10 * max(w[-1], 1.0):
            raise ContractError(f"density operator not PSD (eigenvalue {w[0]:.3e})")
        keep = w > RANK_RTOL * max(w[-1], 0.0)
        f = (v[:, keep] * np.sqrt(w[keep])).T[::-1]
        return cls._normalized(f, log_norm)

    @classmethod
    def _normalized(cls, f, log_norm):
        tr = float(np.einsum("ij,ij->", f, f))
        if tr <= 0:
            raise ContractError("density operator has zero trace")
        return cls(f / np.sqrt(tr), log_norm + np.log(tr))

    @property
    def dim(self) -> int:
        return self.factor.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self.factor.T @ self.factor


RenormObject = Union[Contracted, FeatureVector, DensityOperator]


def _obj_dim(obj, expected: int, side: str) -> None:
    if isinstance(obj, FeatureVector):
        d = obj.vector.shape[0]
    elif isinstance(obj, DensityOperator):
        d = obj.dim
    else:
        return
    if d != expected:
        raise ContractError(f"{side} object has dimension {d}, node expects {expected}")


def _compress(f: np.ndarray) -> np.ndarray:
    """Reduce a factor ``(r, d)`` with ``r > d`` to at most ``d`` rows."""
    _, s, vh = np.linalg.svd(f, full_matrices=False)
    keep = s * s > RANK_RTOL * (s[0] * s[0] if s.size else 0.0)
    return s[keep, None] * vh[keep]


def _matrix_step(node: Isometry, a: Optional[np.ndarray], b: Optional[np.ndarray]) -> np.ndarray:
    """``U^T (A kron B) U`` with ``None`` meaning identity."""
    u = node.tensor
    x = u if a is None else np.einsum("ca,abk->cbk", a, u)
    y = x if b is None else np.einsum("db,cbk->cdk", b, x)
    return np.einsum("abj,abk->jk", u, y)


def renorm_step(node: Isometry, left: RenormObject, right: RenormObject, method: str = "auto"):
    """Combine two child objects through one isometry.

    ``method`` selects the factor-form path (``"factor"``), explicit
    ``U^T (A kron B) U`` (``"matrix"``) or the cheaper of the two (``"auto"``).
    """
    _obj_dim(left, node.left_dim, "left")
    _obj_dim(right, node.right_dim, "right")
    lc, rc = isinstance(left, Contracted), isinstance(right, Contracted)
    if lc and rc:
        return CONTRACTED
    if isinstance(left, FeatureVector) and isinstance(right, FeatureVector):
        return FeatureVector(node.apply(left.vector, right.vector))
    log_norm = sum(o.log_norm for o in (left, right) if isinstance(o, DensityOperator))

    def factor(o):
        if isinstance(o, FeatureVector):
            return o.vector[None, :]
        if isinstance(o, DensityOperator):
            return o.factor
        return None

    fa, fb = factor(left), factor(right)
    if method == "auto":
        ra = node.left_dim if fa is None else fa.shape[0]
        rb = node.right_dim if fb is None else fb.shape[0]
        d = node.left_dim * node.right_dim
        f_cost = ra * d * node.out_dim + ra * rb * node.right_dim * node.out_dim
        m_cost = d * (node.left_dim + node.right_dim + node.out_dim) * node.out_dim
        method = "factor" if f_cost <= m_cost else "matrix"
    if method == "matrix":
        a = None if fa is None else fa.T @ fa
        b = None if fb is None else fb.T @ fb
        return DensityOperator.from_matrix(_matrix_step(node, a, b), log_norm)
    if method != "factor":
        raise ValueError(f"unknown method {method!r}")
    out = _factor_step(node, None if fa is None else fa[None], None if fb is None else fb[None])[0]
    if out.shape[0] > out.shape[1]:
        out = _compress(out)
    return DensityOperator._normalized(out, log_norm)


def _factor_step(node: Isometry, fa, fb) -> np.ndarray:
    """Batched factor of ``U^T (A kron B) U``; ``fa``/``fb`` are ``(M, r, d)``
    or ``None`` for identity. Returns ``(M, r_out, out_dim)`` (unnormalized)."""
    la, lb, out = node.left_dim, node.right_dim, node.out_dim
    u = node.matrix.reshape(la, lb * out)
    if fa is None:
        # rows indexed by (a, j)
        m = fb.shape[0]
        res = np.einsum("abk,mjb->majk", node.tensor, fb)
        return res.reshape(m, la * fb.shape[1], out)
    m, ra, _ = fa.shape
    t = (fa.reshape(m * ra, la) @ u).reshape(m, ra, lb, out)
    if fb is None:
        return t.reshape(m, ra * lb, out)
    res = np.einsum("mibk,mjb->mijk", t, fb)
    return res.reshape(m, ra * fb.shape[1], out)


@dataclass(frozen=True)
class DataMask:
    """Which of the model's data elements are observed."""

    present: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.present, dtype=bool).ravel()
        object.__setattr__(self, "present", p)

    @classmethod
    def full(cls, n: int) -> "DataMask":
        return cls(np.ones(n, dtype=bool))

    @property
    def n_present(self) -> int:
        return int(self.present.sum())


@dataclass
class PartialResult:
    """Per-sample outputs. ``scores`` are the squared-form class scores used
    for the decision; ``values`` are raw decision values (vector case) or
    ``sqrt(p1) <W_l|lambda_1>`` (density case); ``p1`` is 1 for vectors."""

    classes: np.ndarray
    values: np.ndarray
    scores: np.ndarray
    p1: np.ndarray
    kind: str


def _normalize_rows(f):
    tr = np.einsum("mrk,mrk->m", f, f)
    if np.any(tr <= 0):
        raise ContractError("density operator has zero trace")
    return f / np.sqrt(tr)[:, None, None]


def _compress_batch(f):
    m, r, d = f.shape
    if r <= d:
        return f
    out = np.zeros((m, d, d))
    for i in range(m):
        c = _compress(f[i])
        out[i, : c.shape[0]] = c
    return out


def infer_partial_batch(
    model: TTNModel, X, mask: DataMask, mixture: bool = False, chunk: int = 512
) -> PartialResult:
    """Partial-data decisions for a batch of raw data vectors.

    Values at absent positions are ignored. With ``mixture`` the class score
    is ``W_l^T rho W_l`` instead of the dominant-eigenvector rule.
    """
    if model.weights is None:
        raise MissingWeightsError("model has no decision weights")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if mask.present.size != model.n_features:
        raise MaskError(f"mask has {mask.present.size} entries, model has {model.n_features}")
    if mask.n_present == 0:
        raise MaskError("mask leaves no data element present")
    # padded sites are known constants, hence present
    present = np.ones(model.n_sites, dtype=bool)
    present[: model.n_features] = mask.present
    filled = np.where(mask.present, X, 0.0)
    parts = [
        _infer_chunk(model, filled[s : s + chunk], present, mixture)
        for s in range(0, X.shape[0], chunk)
    ]
    kinds = {p.kind for p in parts}
    return PartialResult(
        np.concatenate([p.classes for p in parts]),
        np.concatenate([p.values for p in parts]),
        np.concatenate([p.scores for p in parts]),
        np.concatenate([p.p1 for p in parts]),
        kinds.pop() if len(kinds) == 1 else "mixed",
    )


def _infer_chunk(model, X, present, mixture) -> PartialResult:
    amps = embed_batch(model.padded(X), model.local_map)
    # each entry: None (contracted), ("V", (M, d)) or ("D", (M, r, d))
    objs = [("V", amps[:, j, :]) if present[j] else None for j in range(model.n_sites)]
    for layer, pairs in zip(model.nodes, model.schedule.layers):
        nxt = []
        for node, (a, b) in zip(layer, pairs):
            left, right = objs[a], objs[b]
            if left is None and right is None:
                nxt.append(None)
            elif left is not None and right is not None and left[0] == right[0] == "V":
                nxt.append(("V", node.apply(left[1], right[1])))
            else:
                fa = None if left is None else (left[1][:, None, :] if left[0] == "V" else left[1])
                fb = None if right is None else (right[1][:, None, :] if right[0] == "V" else right[1])
                f = _factor_step(node, fa, fb)
                nxt.append(("D", _compress_batch(_normalize_rows(f))))
        objs = nxt
    top = objs[0]
    w = model.weights.matrix
    m = X.shape[0]
    if top[0] == "V":
        vals = top[1] @ w
        return PartialResult(classify(vals), vals, vals * vals, np.ones(m), "vector")
    f = top[1]
    n_cls = w.shape[1]
    vals = np.zeros((m, n_cls))
    scores = np.zeros((m, n_cls))
    p1 = np.zeros(m)
    for i in range(m):
        _, s, vh = np.linalg.svd(f[i], full_matrices=False)
        p = s * s
        p = p / p.sum()
        proj = fix_signs(vh.T).T @ w  # rows: eigenvectors, cols: classes
        p1[i] = p[0]
        if mixture:
            scores[i] = p @ (proj * proj)
            vals[i] = np.sqrt(scores[i])
            continue
        tied = p >= p[0] - TIE_TOL
        scores[i] = p[0] * np.mean(proj[tied] ** 2, axis=0)
        vals[i] = np.sqrt(p[0]) * proj[0] if tied.sum() == 1 else np.sqrt(scores[i])
    return PartialResult(np.argmax(scores, axis=1), vals, scores, p1, "density")


def infer_partial(model: TTNModel, x, mask: DataMask, mixture: bool = False):
    """Single-vector version of :func:`infer_partial_batch`.

    Returns ``(class index, decision values, class scores, p1)``.
    """
    r = infer_partial_batch(model, np.asarray(x, dtype=np.float64)[None, :], mask, mixture)
    return int(r.classes[0]), r.values[0], r.scores[0], float(r.p1[0])


_RANGE = re.compile(r"^\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*$")


def _parse_range(text: str, n: int, what: str) -> np.ndarray:
    m = _RANGE.match(text)
    if not m:
        raise MaskError(f"bad {what} range {text!r}; expected a..b")
    lo, hi = int(m.group(1)), int(m.group(2))
    if not (0 <= lo <= hi < n):
        raise MaskError(f"{what} range {lo}..{hi} outside 0..{n - 1}")
    return np.arange(lo, hi + 1)


def parse_mask(spec: str, n_features: int, layout: Optional[dict] = None) -> DataMask:
    """Build a mask from ``rows=a..b``, ``cols=a..b``, ``times=a..b`` or
    ``sites=i,j,...``. Ranges are inclusive and zero-based."""
    layout = layout or {}
    if "=" not in spec:
        raise MaskError(f"mask {spec!r} must look like key=value")
    key, value = (s.strip() for s in spec.split("=", 1))
    present = np.zeros(n_features, dtype=bool)
    if key in ("rows", "cols"):
        if layout.get("kind") != "image":
            raise MaskError(f"{key} masks need an image layout")
        rows, cols = int(layout["rows"]), int(layout["cols"])
        grid = present[: rows * cols].reshape(rows, cols)
        if key == "rows":
            grid[_parse_range(value, rows, "row")] = True
        else:
            grid[:, _parse_range(value, cols, "column")] = True
    elif key == "times":
        if layout.get("kind") != "timeseries":
            raise MaskError("times masks need a timeseries layout")
        t, nf = int(layout["timesteps"]), int(layout["n_features"])
        grid = present[: t * nf].reshape(t, nf)
        grid[_parse_range(value, t, "time")] = True
    elif key == "sites":
        try:
            idx = [int(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise MaskError(f"bad site list {value!r}") from None
        if any(i < 0 or i >= n_features for i in idx):
            raise MaskError(f"site index outside 0..{n_features - 1}")
        present[idx] = True
    else:
        raise MaskError(f"unknown mask key {key!r}")
    if not present.any():
        raise MaskError("mask leaves no data element present")
    return DataMask(present)
