"""Dense real matrix kernels shared by every other module.

All routines return eigen/singular values in descending order. Ties keep the
order in which LAPACK produced the columns after a stable reversal, so the
result is deterministic for a given input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

__all__ = [
    "ContractError",
    "EigResult",
    "sym_eig",
    "sym_eig_top",
    "svd",
    "pinv_solve",
    "fix_signs",
    "orthonormality_error",
]

DEFAULT_RCOND = 1e-12


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class EigResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_finite_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix has non-finite entries")
    return m


def _check_symmetric(m: np.ndarray, rtol: float = 1e-10) -> None:
    if m.shape[0] != m.shape[1]:
        raise ContractError(f"matrix must be square, got {m.shape}")
    scale = max(np.abs(m).max(initial=0.0), 1.0)
    if np.abs(m - m.T).max(initial=0.0) > rtol * scale:
        raise ContractError("matrix is not symmetric")


def fix_signs(vectors: np.ndarray, inplace: bool = False) -> np.ndarray:
    """Flip each column so that its entry of largest magnitude is positive."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    if inplace:
        vectors *= signs
        return vectors
    return vectors * signs


def sym_eig(m) -> EigResult:
    """Full eigendecomposition of a real symmetric matrix, descending order."""
    m = _as_finite_matrix(m)
    _check_symmetric(m)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    # eigh is ascending; reverse and stable-sort so equal values keep order
    w, v = w[::-1], v[:, ::-1]
    order = np.argsort(-w, kind="stable")
    return EigResult(w[order].copy(), fix_signs(v[:, order]).copy())


def sym_eig_top(m, k: int) -> EigResult:
    """Leading ``k`` eigenpairs of a symmetric matrix (descending).

    Uses the LAPACK relatively-robust-representation driver, which skips the
    back-transformation for unwanted eigenvectors.
    """
    m = _as_finite_matrix(m)
    _check_symmetric(m)
    n = m.shape[0]
    k = int(min(max(k, 1), n))
    if k == n or n <= 64:
        full = sym_eig(m)
        return EigResult(full.eigenvalues[:k].copy(), full.eigenvectors[:, :k].copy())
    w, v = sla.eigh(0.5 * (m + m.T), subset_by_index=[n - k, n - 1], driver="evr")
    w, v = w[::-1], v[:, ::-1]
    order = np.argsort(-w, kind="stable")
    return EigResult(w[order].copy(), fix_signs(v[:, order]).copy())


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U @ diag(s) @ V`` with ``s`` descending.

    ``V`` is returned with orthonormal rows (the ``Vh`` convention).
    """
    m = _as_finite_matrix(m)
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return u, s, vh


def pinv_solve(a, b, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Minimum-norm least-squares solution ``X = A^+ B``.

    Singular values below ``rcond * s_max`` are treated as zero.
    """
    a = _as_finite_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    b = _as_finite_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ContractError(
            f"dimension mismatch: A has {a.shape[0]} rows, B has {b.shape[0]}"
        )
    u, s, vh = svd(a)
    if s.size == 0 or s[0] == 0.0:
        x = np.zeros((a.shape[1], b.shape[1]))
    else:
        keep = s > rcond * s[0]
        x = vh[keep].T @ ((u[:, keep].T @ b) / s[keep, None])
    return x[:, 0] if squeeze else x


def orthonormality_error(u: np.ndarray) -> float:
    """Max-abs deviation of ``U^T U`` from the identity."""
    u = np.asarray(u, dtype=np.float64)
    if u.size == 0:
        return 0.0
    return float(np.abs(u.T @ u - np.eye(u.shape[1])).max())
