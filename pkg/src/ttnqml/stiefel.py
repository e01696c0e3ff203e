"""Riemannian gradient descent for weight matrices with orthonormal columns.

Points are plain ``(chi, C)`` arrays with ``W^T W = I``. Tangent vectors at
``W`` satisfy ``W^T Y + Y^T W = 0``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .classifier import LabeledFeatures, cost, cost_gradient
from .numerics import ContractError, orthonormality_error, svd
from .ttn import WeightMatrix

__all__ = [
    "RetractionError",
    "OptimizerConfig",
    "OptimizeResult",
    "check_stiefel",
    "project_tangent",
    "retract_svd",
    "transport",
    "nearest_isometry",
    "manifold_gd",
    "write_trace_csv",
    "isometric_weights",
]

log = logging.getLogger(__name__)

STIEFEL_TOL = 1e-10
RANK_RTOL = 1e-10
MAX_HALVINGS = 30


class RetractionError(ContractError):
    """``W + step`` lost column rank, so the SVD retraction is undefined."""


@dataclass(frozen=True)
class OptimizerConfig:
    beta: float = 0.1
    eta: float = 0.1
    epochs: int = 500
    grad_norm_stop: Optional[float] = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class OptimizeResult:
    weights: np.ndarray
    cost_trace: np.ndarray
    grad_norm_trace: np.ndarray
    epochs_run: int
    halvings: int = 0


def check_stiefel(w, tol: float = STIEFEL_TOL) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < w.shape[1]:
        raise ContractError(f"Stiefel point must be tall (chi >= C), got {w.shape}")
    err = orthonormality_error(w)
    if err > tol:
        raise ContractError(f"matrix is not isometric (W^T W - I = {err:.2e})")
    return w


def _same_shape(w, d, what="direction"):
    d = np.asarray(d, dtype=np.float64)
    if d.shape != w.shape:
        raise ContractError(f"{what} shape {d.shape} differs from point shape {w.shape}")
    return d


def project_tangent(w, d) -> np.ndarray:
    """``D - W (W^T D + D^T W) / 2``."""
    w = np.asarray(w, dtype=np.float64)
    d = _same_shape(w, d)
    s = w.T @ d
    return d - 0.5 * w @ (s + s.T)


def retract_svd(w, step) -> np.ndarray:
    """Polar factor ``U V`` of ``W + step``."""
    w = np.asarray(w, dtype=np.float64)
    step = _same_shape(w, step, "step")
    u, s, vh = svd(w + step)
    if s[-1] <= RANK_RTOL * max(s[0], 1.0):
        raise RetractionError(f"W + step is rank deficient (sigma_min = {s[-1]:.2e})")
    return u @ vh


def transport(w, y, step) -> np.ndarray:
    """Move tangent vector ``y`` at ``W`` to the point ``retract_svd(W, step)``."""
    w = np.asarray(w, dtype=np.float64)
    y = _same_shape(w, y, "vector")
    return project_tangent(retract_svd(w, step), y)


def nearest_isometry(a) -> np.ndarray:
    """Closest matrix with orthonormal columns in Frobenius norm."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise ContractError(f"need a tall matrix, got {a.shape}")
    u, s, vh = svd(a)
    if s.size == 0 or s[-1] <= RANK_RTOL * max(s[0], np.finfo(float).tiny):
        raise ContractError("matrix does not have full column rank")
    return u @ vh


def manifold_gd(
    lf: LabeledFeatures,
    w0,
    cfg: OptimizerConfig = OptimizerConfig(),
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> OptimizeResult:
    """Momentum gradient descent on the Stiefel manifold.

    Each epoch:
    ``m~ = beta m + (1 - beta) P_W(grad)``, ``W <- R_W(-eta m~)``,
    ``m <- tau_W(m~, -eta m~ - eta beta (m~ - m))``.
    The trace entry ``k`` is the cost after ``k`` epochs. ``callback`` is
    invoked with ``(epoch, W)`` after every update.
    """
    w = check_stiefel(np.array(w0, dtype=np.float64))
    if w.shape != (lf.features.shape[1], lf.n_classes):
        raise ContractError("initial weights do not match the features")
    m = np.zeros_like(w)
    g = project_tangent(w, cost_gradient(lf, w))
    costs = [cost(lf, w)]
    gnorms = [float(np.linalg.norm(g))]
    halvings = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.grad_norm_stop is not None and gnorms[-1] <= cfg.grad_norm_stop:
            epoch -= 1
            break
        m_tilde = cfg.beta * m + (1.0 - cfg.beta) * g
        eta = cfg.eta
        for _ in range(MAX_HALVINGS + 1):
            try:
                w_next = retract_svd(w, -eta * m_tilde)
                m_next = transport(w, m_tilde, -eta * m_tilde - eta * cfg.beta * (m_tilde - m))
                break
            except RetractionError:
                eta *= 0.5
                halvings += 1
        else:
            raise RetractionError(f"step stayed rank deficient after {MAX_HALVINGS} halvings")
        w, m = w_next, m_next
        g = project_tangent(w, cost_gradient(lf, w))
        costs.append(cost(lf, w))
        gnorms.append(float(np.linalg.norm(g)))
        if callback is not None:
            callback(epoch, w)
        if epoch % 50 == 0:
            log.info("epoch %d cost %.6e grad %.3e", epoch, costs[-1], gnorms[-1])
    return OptimizeResult(w, np.array(costs), np.array(gnorms), epoch, halvings)


def write_trace_csv(path, result: OptimizeResult, extra: Optional[dict] = None) -> None:
    """Epoch, cost, gradient norm and any extra per-epoch columns."""
    extra = extra or {}
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "cost", "grad_norm", *extra])
        for k, (c, g) in enumerate(zip(result.cost_trace, result.grad_norm_trace)):
            row = [k, repr(float(c)), repr(float(g))]
            row += [repr(float(col[k])) if k < len(col) else "" for col in extra.values()]
            out.writerow(row)


def isometric_weights(w) -> WeightMatrix:
    return WeightMatrix(check_stiefel(w), is_isometric=True)
