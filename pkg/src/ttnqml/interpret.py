"""Fine-graining of top-scale vectors and low-order correlation diagnostics.

A top-scale vector ``psi`` defines the data-scale state ``U_tree psi``. Its
one- and two-site reduced density matrices are obtained by walking down the
tree in purification form, so the ``2^L`` vector is never formed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .classifier import MissingWeightsError
from .encoding import LocalMap, MapKind
from .numerics import ContractError
from .ttn import TTNModel

__all__ = [
    "OnePointRDM",
    "TwoPointRDM",
    "WeightReport",
    "one_point_rdm",
    "all_one_point_rdms",
    "two_point_rdm",
    "decode_average",
    "correlation_dm",
    "mutual_information",
    "von_neumann_entropy",
    "mean_field_overlap",
    "interpret_weights",
    "interpret_basis",
    "write_csv",
    "write_pgm",
]

PSD_TOL = 1e-10
DEGENERATE_TOL = 1e-12


@dataclass
class OnePointRDM:
    site: int
    matrix: np.ndarray


@dataclass
class TwoPointRDM:
    sites: tuple
    matrix: np.ndarray


def _compress(f: np.ndarray) -> np.ndarray:
    """Shrink a factor ``(r, d)`` so that ``r <= d`` while keeping ``F^T F``."""
    if f.shape[0] <= f.shape[1]:
        return f
    r = np.linalg.qr(f, mode="r")
    return r


def _top_factor(model: TTNModel, top_vector) -> np.ndarray:
    v = np.asarray(top_vector, dtype=np.float64).ravel()
    if v.shape[0] != model.top_dim:
        raise ContractError(f"top vector has length {v.shape[0]}, model top dimension is {model.top_dim}")
    n = np.linalg.norm(v)
    if n == 0:
        raise ContractError("top vector is zero")
    return (v / n)[None, :]


def _path(model: TTNModel, site: int) -> list[tuple[int, int, int]]:
    """``(layer, node, side)`` from the root down to ``site``; side 0 = left."""
    if not 0 <= site < model.n_sites:
        raise IndexError(f"site {site} outside 0..{model.n_sites - 1}")
    steps = []
    pos = site
    for t, pairs in enumerate(model.schedule.layers):
        for k, (a, b) in enumerate(pairs):
            if pos in (a, b):
                steps.append((t, k, 0 if pos == a else 1))
                pos = k
                break
    return steps[::-1]


def _split(model, factor, t, k):
    """Push a bond factor through node (t, k); returns ``(r, left, right)``."""
    node = model.nodes[t][k]
    g = factor @ node.matrix.T
    return g.reshape(factor.shape[0], node.left_dim, node.right_dim)


def _descend_to(model, factor, steps):
    for t, k, side in steps:
        g = _split(model, factor, t, k)
        if side == 0:
            factor = g.transpose(0, 2, 1).reshape(-1, g.shape[1])
        else:
            factor = g.reshape(-1, g.shape[2])
        factor = _compress(factor)
    return factor


def _finish(mat: np.ndarray) -> np.ndarray:
    mat = 0.5 * (mat + mat.T)
    return mat / np.trace(mat)


def one_point_rdm(model: TTNModel, top_vector, site: int) -> OnePointRDM:
    """2x2 reduced density matrix of one data site of the fine-grained state."""
    f = _descend_to(model, _top_factor(model, top_vector), _path(model, site))
    return OnePointRDM(site, _finish(f.T @ f))


def all_one_point_rdms(model: TTNModel, top_vector) -> np.ndarray:
    """One-point matrices for every site, shape ``(n_sites, 2, 2)``."""
    factors = [_top_factor(model, top_vector)]
    for t in range(model.schedule.n_layers - 1, -1, -1):
        pairs = model.schedule.layers[t]
        below = [None] * (2 * len(pairs))
        for k, (a, b) in enumerate(pairs):
            g = _split(model, factors[k], t, k)
            below[a] = _compress(g.transpose(0, 2, 1).reshape(-1, g.shape[1]))
            below[b] = _compress(g.reshape(-1, g.shape[2]))
        factors = below
    return np.stack([_finish(f.T @ f) for f in factors])


def two_point_rdm(model: TTNModel, top_vector, i: int, j: int) -> TwoPointRDM:
    """4x4 reduced density matrix of sites ``(i, j)``, basis ``|s_i s_j>``."""
    if i == j:
        raise ContractError("two-point RDM needs distinct sites")
    pi, pj = _path(model, i), _path(model, j)
    depth = 0
    while pi[depth][:2] == pj[depth][:2] and pi[depth][2] == pj[depth][2]:
        depth += 1
    # pi[depth] and pj[depth] share a node but go to different children
    f = _descend_to(model, _top_factor(model, top_vector), pi[:depth])
    t, k, side_i = pi[depth]
    g = _split(model, f, t, k)  # (env, left, right)
    psi = g if side_i == 0 else g.transpose(0, 2, 1)  # (env, A_i, B_j)
    psi = _descend_side(model, psi, pi[depth + 1 :], first=True)
    psi = _descend_side(model, psi, pj[depth + 1 :], first=False)
    m = psi.reshape(psi.shape[0], -1)
    return TwoPointRDM((i, j), _finish(m.T @ m))


def _descend_side(model, psi, steps, first: bool):
    """Walk one open bond of ``psi (env, A, B)`` down to its data site."""
    for t, k, side in steps:
        node = model.nodes[t][k]
        if first:
            env, _, db = psi.shape
            x = np.einsum("lrA,eAB->elrB", node.tensor, psi)
            x = x.transpose(0, 2, 1, 3) if side == 0 else x  # sibling next to env
            x = x.reshape(env * x.shape[1], x.shape[2], db)
        else:
            env, da, _ = psi.shape
            x = np.einsum("lrB,eAB->eAlr", node.tensor, psi)
            # move the sibling index into the environment
            x = x.transpose(0, 3, 1, 2) if side == 0 else x.transpose(0, 2, 1, 3)
            x = x.reshape(env * x.shape[1], da, x.shape[3])
        shape = x.shape
        psi = _compress(x.reshape(shape[0], -1)).reshape(-1, shape[1], shape[2])
    return psi


def _eig_2x2(rdm: np.ndarray):
    w, v = np.linalg.eigh(0.5 * (rdm + rdm.T))
    w, v = w[::-1], v[:, ::-1]
    if w[-1] < -PSD_TOL:
        raise ContractError(f"one-point RDM not PSD (eigenvalue {w[-1]:.3e})")
    return np.clip(w, 0.0, None), v


def decode_average(rdm, local_map: LocalMap) -> float:
    """Average data value encoded by a one-point RDM.

    Each eigenvector is read as ``(cos theta, sin theta)`` with the sign
    chosen so that its first entry is non-negative, which puts ``theta`` in
    ``[-pi/2, pi/2]``. A maximally mixed matrix has no preferred basis and
    decodes to 0.
    """
    mat = rdm.matrix if isinstance(rdm, OnePointRDM) else np.asarray(rdm, dtype=np.float64)
    if local_map.kind is MapKind.POLYNOMIAL:
        raise ContractError("decoding requires a phase-type map")
    w, v = _eig_2x2(mat)
    w = w / w.sum()
    if abs(w[0] - w[1]) <= DEGENERATE_TOL:
        return 0.0
    theta = 0.0
    for p, vec in zip(w, v.T):
        if vec[0] < 0:
            vec = -vec
        if vec[0] == 0.0:
            ang = math.copysign(math.pi / 2, vec[1])
        else:
            ang = math.atan(vec[1] / vec[0])
        theta += p * ang
    if local_map.kind is MapKind.SCALED_PHASE:
        return float(theta / local_map.a * local_map.x_max)
    return float(local_map.x_min + (local_map.x_max - local_map.x_min) * theta * 2.0 / math.pi)


def _matrix(x) -> np.ndarray:
    return x.matrix if hasattr(x, "matrix") else np.asarray(x, dtype=np.float64)


def correlation_dm(two, one_i, one_j) -> np.ndarray:
    """``rho_ij - rho_i kron rho_j``."""
    if isinstance(two, TwoPointRDM) and isinstance(one_i, OnePointRDM) and isinstance(one_j, OnePointRDM):
        if two.sites != (one_i.site, one_j.site):
            raise ContractError(f"sites {two.sites} do not match ({one_i.site}, {one_j.site})")
    return _matrix(two) - np.kron(_matrix(one_i), _matrix(one_j))


def von_neumann_entropy(rho) -> float:
    w = np.linalg.eigvalsh(0.5 * (_matrix(rho) + _matrix(rho).T))
    if w[0] < -PSD_TOL:
        raise ContractError(f"density matrix not PSD (eigenvalue {w[0]:.3e})")
    w = np.clip(w, 0.0, 1.0)
    w = w[w > 0]
    return float(-np.sum(w * np.log(w)))


def mutual_information(one_i, one_j, two) -> float:
    """``H(rho_i) + H(rho_j) - H(rho_ij)`` in nats."""
    if isinstance(two, TwoPointRDM) and isinstance(one_i, OnePointRDM) and isinstance(one_j, OnePointRDM):
        if set(two.sites) != {one_i.site, one_j.site}:
            raise ContractError("site mismatch between one- and two-point RDMs")
    return von_neumann_entropy(one_i) + von_neumann_entropy(one_j) - von_neumann_entropy(two)


def mean_field_overlap(z, xbar, local_map: LocalMap) -> tuple[float, np.ndarray]:
    """Overlap of the embedding of ``z`` with the product state of ``xbar``.

    Returns the exact product of cosines and the per-element quadratic
    approximation ``1 - a^2 (z - xbar)^2 / (2 x_max^2)``.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    xbar = np.asarray(xbar, dtype=np.float64).ravel()
    if z.shape != xbar.shape:
        raise ContractError(f"length mismatch: {z.size} vs {xbar.size}")
    c = local_map.a / local_map.x_max
    d = z - xbar
    return float(np.prod(np.cos(c * d))), 1.0 - 0.5 * (c * d) ** 2


@dataclass
class WeightReport:
    """Decoded data-scale averages per class (``averages[l]`` has one entry
    per data element) and optional anchor-site correlation maps."""

    averages: np.ndarray
    anchor: Optional[int] = None
    cdm_element: Optional[np.ndarray] = None
    mutual_info: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def _decode_vector(model: TTNModel, vec) -> np.ndarray:
    rdms = all_one_point_rdms(model, vec)[: model.n_features]
    return np.array([decode_average(r, model.local_map) for r in rdms])


def _anchor_maps(model: TTNModel, vec, anchor: int):
    ones = all_one_point_rdms(model, vec)
    n = model.n_features
    cdm = np.zeros(n)
    mi = np.zeros(n)
    for j in range(n):
        if j == anchor:
            continue
        two = two_point_rdm(model, vec, anchor, j).matrix
        rc = two - np.kron(ones[anchor], ones[j])
        cdm[j] = rc[0, 1]  # <00|rho_c|01>
        mi[j] = mutual_information(ones[anchor], ones[j], two)
    return cdm, mi


def interpret_weights(model: TTNModel, anchor: Optional[int] = None) -> WeightReport:
    """Decode every normalized class weight vector to the data scale.

    With ``anchor`` the CDM element ``<00|rho_c|01>`` and the mutual
    information between the anchor and every other site are added.
    """
    if model.weights is None:
        raise MissingWeightsError("model has no decision weights")
    w = model.weights.matrix
    averages = np.stack([_decode_vector(model, w[:, l]) for l in range(w.shape[1])])
    report = WeightReport(averages)
    if anchor is not None:
        if not 0 <= anchor < model.n_features:
            raise IndexError(f"anchor {anchor} outside 0..{model.n_features - 1}")
        maps = [_anchor_maps(model, w[:, l], anchor) for l in range(w.shape[1])]
        report.anchor = anchor
        report.cdm_element = np.stack([m[0] for m in maps])
        report.mutual_info = np.stack([m[1] for m in maps])
    return report


def interpret_basis(model: TTNModel, limit: Optional[int] = None) -> np.ndarray:
    """Decoded averages of the top-scale basis vectors ``e_k``."""
    n = model.top_dim if limit is None else min(limit, model.top_dim)
    return np.stack([_decode_vector(model, np.eye(model.top_dim)[k]) for k in range(n)])


def write_csv(path, array) -> None:
    array = np.atleast_2d(np.asarray(array, dtype=np.float64))
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        for row in array:
            out.writerow([repr(float(v)) for v in row])


def write_pgm(path, image) -> tuple[float, float]:
    """8-bit binary PGM with linear min-max scaling.

    The scaling is recorded in ``<path>.scale.txt`` as ``min max``; pixel
    value ``p`` maps back to ``min + p (max - min) / 255``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError("PGM output needs a 2-d array")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    pix = np.zeros(img.shape, dtype=np.uint8) if span == 0 else np.rint((img - lo) / span * 255).astype(np.uint8)
    path = Path(path)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    path.write_bytes(header + pix.tobytes())
    Path(str(path) + ".scale.txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
    return lo, hi
