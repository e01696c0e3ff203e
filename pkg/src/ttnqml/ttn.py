"""Unsupervised tree tensor network feature extractor.

Each layer pairs sites, forms the ensemble reduced density matrix of every
pair, and keeps its dominant eigenvectors as an isometry into a truncated
parent space. Data flows through the finished tree by repeatedly applying
``U^T (v_a kron v_b)``.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from .encoding import LocalMap, embed_batch, embed_vector
from .numerics import ContractError, fix_signs, orthonormality_error, sym_eig, sym_eig_top

__all__ = [
    "ScheduleError",
    "ResourceLimitError",
    "memory_budget",
    "PairingSchedule",
    "Isometry",
    "WeightMatrix",
    "ReducedDensityOp",
    "TTNModel",
    "NodeStats",
    "pair_rdm",
    "truncate_eig",
    "build_layer",
    "build_tree",
    "coarse_grain",
    "coarse_grain_batch",
    "topology_image",
    "topology_interleaved",
    "topology_linear",
    "pad_length",
    "pad_data",
]

log = logging.getLogger(__name__)

ISOMETRY_TOL = 1e-10
ZERO_EIG_RTOL = 1e-14
PSD_TOL = 1e-10
# rows per block when accumulating pair density matrices
_CHUNK_ELEMS = 1 << 22


class ScheduleError(ValueError):
    pass


class ResourceLimitError(MemoryError):
    """A dense intermediate would exceed the configured memory budget."""


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairingSchedule:
    """Bottom-up list of layers; each layer is a perfect matching of the
    previous layer's sites. Output site ``k`` of a layer is pair ``k``."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(tuple((int(a), int(b)) for a, b in layer) for layer in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ScheduleError("schedule has no layers")
        n = 2 * len(layers[0])
        for t, layer in enumerate(layers):
            flat = [i for p in layer for i in p]
            if len(layer) * 2 != n or sorted(flat) != list(range(n)):
                raise ScheduleError(f"layer {t} is not a perfect matching of {n} sites")
            n = len(layer)
        if n != 1:
            raise ScheduleError(f"final layer leaves {n} sites, expected 1")

    @property
    def n_sites(self) -> int:
        return 2 * len(self.layers[0])

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def leaves(self) -> list[list[list[int]]]:
        """``leaves()[t][k]`` lists the data sites under output site k of layer t."""
        current = [[i] for i in range(self.n_sites)]
        out = []
        for layer in self.layers:
            current = [current[a] + current[b] for a, b in layer]
            out.append(current)
        return out

    def to_list(self) -> list:
        return [[list(p) for p in layer] for layer in self.layers]


def _log2_exact(n: int, what: str) -> int:
    if n < 1 or n & (n - 1):
        raise ScheduleError(f"{what} must be a power of two, got {n}")
    return n.bit_length() - 1


def topology_image(rows: int, cols: int) -> PairingSchedule:
    """Pair neighbouring pixels within rows first, then neighbouring rows.

    Sites are the row-major pixel order.
    """
    _log2_exact(rows, "rows")
    nc = _log2_exact(cols, "cols")
    if rows * cols < 2:
        raise ScheduleError("image needs at least two pixels")
    layers = []
    width = cols
    for _ in range(nc):
        layers.append([(i, i + 1) for i in range(0, rows * width, 2)])
        width //= 2
    n = rows
    while n > 1:
        layers.append([(i, i + 1) for i in range(0, n, 2)])
        n //= 2
    return PairingSchedule(tuple(layers))


def topology_interleaved(timesteps: int, n_features: int) -> PairingSchedule:
    """Sites ordered ``[f1(1), f2(1), f1(2), f2(2), ...]``.

    The first layers combine features of one time step, later layers merge
    neighbouring time blocks.
    """
    total = timesteps * n_features
    _log2_exact(total, "timesteps * n_features")
    _log2_exact(n_features, "n_features")
    return topology_linear(total)


def topology_linear(n_sites: int) -> PairingSchedule:
    """Binary tree over adjacent sites."""
    _log2_exact(n_sites, "number of sites")
    if n_sites < 2:
        raise ScheduleError("need at least two sites")
    layers = []
    n = n_sites
    while n > 1:
        layers.append([(i, i + 1) for i in range(0, n, 2)])
        n //= 2
    return PairingSchedule(tuple(layers))


def pad_length(n: int) -> int:
    return 1 << max(1, math.ceil(math.log2(max(n, 2))))


def pad_data(X, n_sites: int) -> np.ndarray:
    """Append constant-zero elements so each row has ``n_sites`` entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] > n_sites:
        raise ScheduleError(f"data length {X.shape[-1]} exceeds {n_sites} sites")
    if X.shape[-1] == n_sites:
        return X
    pad = [(0, 0)] * (X.ndim - 1) + [(0, n_sites - X.shape[-1])]
    return np.pad(X, pad)


# ---------------------------------------------------------------------------
# data structures
# ---------------------------------------------------------------------------


@dataclass
class Isometry:
    """Column-orthonormal map from a ``left*right`` pair space to ``out_dim``."""

    matrix: np.ndarray
    left_dim: int
    right_dim: int

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.left_dim * self.right_dim:
            raise ContractError(
                f"isometry shape {self.matrix.shape} incompatible with inputs "
                f"{self.left_dim}x{self.right_dim}"
            )
        if self.matrix.shape[1] > self.matrix.shape[0]:
            raise ContractError("isometry has more columns than rows")

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def tensor(self) -> np.ndarray:
        """View shaped ``(left, right, out)``."""
        return self.matrix.reshape(self.left_dim, self.right_dim, self.out_dim)

    def error(self) -> float:
        return orthonormality_error(self.matrix)

    def check(self, tol: float = ISOMETRY_TOL) -> None:
        err = self.error()
        if err > tol:
            raise ContractError(f"isometry columns not orthonormal (error {err:.2e})")

    def apply(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        """``U^T (left kron right)`` for a single vector pair or batches of rows."""
        return _apply_pair(left, right, self.tensor)


@dataclass
class WeightMatrix:
    """Decision weights, one column per class."""

    matrix: np.ndarray
    is_isometric: bool = False

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ContractError("weight matrix must be 2-d")
        if self.is_isometric:
            err = orthonormality_error(self.matrix)
            if err > 1e-8:
                raise ContractError(f"weights flagged isometric but W^T W - I = {err:.2e}")

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ReducedDensityOp:
    matrix: np.ndarray
    raw_trace: float = 1.0
    pair_dims: Optional[tuple] = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass
class NodeStats:
    layer: int
    position: int
    in_dims: tuple
    out_dim: int
    discarded: float
    raw_trace: float


@dataclass
class TTNModel:
    schedule: PairingSchedule
    nodes: list  # nodes[layer][position] -> Isometry
    local_map: LocalMap
    n_features: int
    weights: Optional[WeightMatrix] = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_sites(self) -> int:
        return self.schedule.n_sites

    @property
    def top_dim(self) -> int:
        return self.nodes[-1][0].out_dim

    @property
    def bond_dims(self) -> list[list[int]]:
        return [[n.out_dim for n in layer] for layer in self.nodes]

    @property
    def max_bond_dim(self) -> int:
        return max(max(layer) for layer in self.bond_dims)

    def check(self, tol: float = ISOMETRY_TOL) -> None:
        """Validate dimension consistency and node orthonormality."""
        dims = [2] * self.n_sites
        if len(self.nodes) != self.schedule.n_layers:
            raise ContractError("node layers do not match schedule")
        for t, (layer, pairs) in enumerate(zip(self.nodes, self.schedule.layers)):
            if len(layer) != len(pairs):
                raise ContractError(f"layer {t} has {len(layer)} nodes for {len(pairs)} pairs")
            for k, ((a, b), node) in enumerate(zip(pairs, layer)):
                if (node.left_dim, node.right_dim) != (dims[a], dims[b]):
                    raise ContractError(f"node ({t},{k}) input dims do not match children")
                node.check(tol)
            dims = [n.out_dim for n in layer]
        if self.weights is not None and self.weights.matrix.shape[0] != self.top_dim:
            raise ContractError("weight rows do not match top bond dimension")

    def padded(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features:
            raise ContractError(
                f"data length {X.shape[-1]} does not match model ({self.n_features})"
            )
        return pad_data(X, self.n_sites)


# ---------------------------------------------------------------------------
# density matrices and truncation
# ---------------------------------------------------------------------------


def _apply_pair(left: np.ndarray, right: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    la, lb, out = tensor.shape
    if left.ndim == 1:
        return (left @ tensor.reshape(la, lb * out)).reshape(lb, out).T @ right
    m = left.shape[0]
    result = np.empty((m, out))
    step = max(1, _CHUNK_ELEMS // max(lb * out, 1))
    flat = tensor.reshape(la, lb * out)
    for s in range(0, m, step):
        t = (left[s : s + step] @ flat).reshape(-1, lb, out)
        result[s : s + step] = np.einsum("mbk,mb->mk", t, right[s : s + step])
    return result


def _pair_rows(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    return (left[:, :, None] * right[:, None, :]).reshape(left.shape[0], -1)


def pair_rdm(left, right, weights=None) -> ReducedDensityOp:
    """Ensemble density matrix of a site pair.

    ``left``/``right`` hold one row per sample; ``weights`` is the per-sample
    product of squared norms of every site outside the pair (defaults to 1).
    The result is trace-normalized; the pre-normalization trace is kept.
    """
    left = np.atleast_2d(np.asarray(left, dtype=np.float64))
    right = np.atleast_2d(np.asarray(right, dtype=np.float64))
    m = left.shape[0]
    if m == 0:
        raise ContractError("pair_rdm needs at least one sample")
    if right.shape[0] != m:
        raise ContractError("left and right sample counts differ")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
    d = left.shape[1] * right.shape[1]
    rho = np.zeros((d, d))
    step = max(1, _CHUNK_ELEMS // d)
    sw = np.sqrt(w)
    for s in range(0, m, step):
        x = _pair_rows(left[s : s + step], right[s : s + step]) * sw[s : s + step, None]
        rho += x.T @ x
    rho /= m
    raw = float(np.trace(rho))
    if raw <= 0:
        raise ContractError("pair density matrix has zero trace")
    rho = 0.5 * (rho + rho.T) / raw
    return ReducedDensityOp(rho, raw, (left.shape[1], right.shape[1]))


def _select_chi(eigvals, total, chi_max, eps, full):
    """Smallest chi whose discarded fraction is <= eps, capped by chi_max.

    With the full spectrum the tail is summed directly so that keeping every
    nonzero eigenvalue discards exactly zero.
    """
    lam = np.where(eigvals > ZERO_EIG_RTOL * max(eigvals[0], 0.0), eigvals, 0.0)
    if full:
        total = float(lam.sum())
        tail = np.concatenate([np.cumsum(lam[::-1])[::-1][1:], [0.0]])
    else:
        tail = np.maximum(total - np.cumsum(lam), 0.0)
    ok = np.flatnonzero(tail <= eps * total)
    chi = int(ok[0]) + 1 if ok.size else lam.size
    chi = max(1, min(chi, chi_max))
    discarded = float(tail[chi - 1] / total) if total > 0 else 0.0
    return chi, discarded


def _check_psd(eigvals: np.ndarray, scale: float) -> None:
    if eigvals.size and eigvals[-1] < -PSD_TOL * max(scale, 1.0):
        raise ContractError(f"density matrix not PSD (eigenvalue {eigvals[-1]:.3e})")


def truncate_eig(rdm, chi_max: Optional[int], eps: float) -> tuple[Isometry, float]:
    """White's-rule truncation of a pair density matrix.

    Returns the kept eigenvectors as an isometry and the discarded fraction
    of the trace. ``chi_max=None`` means uncapped.
    """
    mat = rdm.matrix if isinstance(rdm, ReducedDensityOp) else np.asarray(rdm, dtype=np.float64)
    d = mat.shape[0]
    chi_cap = d if chi_max is None else int(chi_max)
    if chi_cap < 1:
        raise ContractError("chi_max must be >= 1")
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"eps must lie in [0, 1), got {eps}")
    left_dim, right_dim = _infer_dims(rdm, d)
    total = float(np.trace(mat))
    if eps == 0.0 or chi_cap >= d or d <= 64:
        res = sym_eig(mat)
        _check_psd(res.eigenvalues, res.eigenvalues[0])
        lam = np.clip(res.eigenvalues, 0.0, None)
        chi, disc = _select_chi(lam, 0.0, chi_cap, eps, full=True)
        vecs = res.eigenvectors[:, :chi]
    else:
        k = min(chi_cap, d, 32)
        while True:
            res = sym_eig_top(mat, k)
            lam = np.clip(res.eigenvalues, 0.0, None)
            enough = lam.sum() >= (1.0 - eps) * total
            if enough or k >= min(chi_cap, d):
                break
            k = min(2 * k, chi_cap, d)
        chi, disc = _select_chi(lam, total, chi_cap, eps, full=False)
        vecs = res.eigenvectors[:, :chi]
    return Isometry(vecs, left_dim, right_dim), disc


def _infer_dims(rdm, d: int) -> tuple[int, int]:
    dims = getattr(rdm, "pair_dims", None)
    if dims is not None:
        return dims
    return d, 1


def _orthonormalize(u: np.ndarray) -> np.ndarray:
    """Symmetric (Loewdin) polish, in place and by row blocks, then sign fix.

    Keeps the columns as close as possible to the input; the isometry can
    be the largest array in a build, so no full-size temporaries are made.
    """
    g = u.T @ u
    w, v = np.linalg.eigh(g)
    t = (v / np.sqrt(w)) @ v.T
    step = max(1, _CHUNK_ELEMS // max(u.shape[1], 1))
    for s in range(0, u.shape[0], step):
        u[s : s + step] = u[s : s + step] @ t
    return fix_signs(u, inplace=True)


def _check_output_size(la: int, lb: int, chi: int) -> None:
    budget = memory_budget()
    if 8 * la * lb * chi > budget:
        raise ResourceLimitError(
            f"isometry {la}x{lb} -> {chi} needs {8 * la * lb * chi / 2**30:.1f} GiB, beyond the "
            f"{budget / 2**30:.1f} GiB budget; lower chi_max or raise eps"
        )


def _gram_isometry(left, right, weights, chi_cap, eps):
    """Same spectrum as the pair density matrix, computed from the M x M
    sample Gram matrix; used when the pair space exceeds the sample count."""
    m = left.shape[0]
    sw = np.sqrt(weights)
    g = (left @ left.T) * (right @ right.T)
    g *= sw[:, None] * sw[None, :]
    g /= m
    raw = float(np.trace(g))
    g = 0.5 * (g + g.T) / raw
    res = sym_eig(g)
    _check_psd(res.eigenvalues, res.eigenvalues[0])
    lam = np.clip(res.eigenvalues, 0.0, None)
    chi, disc = _select_chi(lam, 0.0, chi_cap, eps, full=True)
    la, lb = left.shape[1], right.shape[1]
    _check_output_size(la, lb, chi)
    c = res.eigenvectors[:, :chi] * (sw / np.sqrt(m * raw))[:, None] / np.sqrt(lam[:chi])
    del g, res
    u = np.empty((la * lb, chi))
    for k in range(chi):
        u[:, k] = (left.T @ (c[:, k, None] * right)).ravel()
    u = _orthonormalize(u)
    return Isometry(u, la, lb), disc, raw


def _lanczos_isometry(left, right, weights, chi_cap, eps):
    """Leading ``chi_cap`` eigenpairs of the pair density matrix without
    forming it; each product costs two ``(M, la) x (la, lb)`` multiplies."""
    m, la, lb = left.shape[0], left.shape[1], right.shape[1]
    w = np.asarray(weights, dtype=np.float64)
    raw = float(np.einsum("m,ma,ma,mb,mb->", w, left, left, right, right, optimize=True)) / m
    if raw <= 0:
        raise ContractError("pair density matrix has zero trace")
    scale = 1.0 / (m * raw)

    def matvec(v):
        c = np.einsum("mb,mb->m", left @ v.reshape(la, lb), right)
        return (left.T @ ((w * c * scale)[:, None] * right)).ravel()

    op = LinearOperator((la * lb, la * lb), matvec=matvec, dtype=np.float64)
    # fixed start vector keeps the result reproducible
    v0 = np.ones(la * lb) / math.sqrt(la * lb)
    lam, vecs = eigsh(op, k=chi_cap, which="LA", v0=v0, tol=1e-12)
    order = np.argsort(-lam, kind="stable")
    lam = np.clip(lam[order], 0.0, None)
    chi, disc = _select_chi(lam, 1.0, chi_cap, eps, full=False)
    u = _orthonormalize(np.array(vecs[:, order[:chi]]))
    return Isometry(u, la, lb), disc, raw


def memory_budget() -> int:
    """Bytes a single dense work matrix may occupy (env ``TTNQML_MEMORY_BUDGET``
    overrides; default is a quarter of physical memory)."""
    env = os.environ.get("TTNQML_MEMORY_BUDGET")
    if env:
        return int(float(env))
    try:
        return os.sysconf("SC_PHYS_PAGES") * os.sysconf("SC_PAGE_SIZE") // 4
    except (ValueError, OSError, AttributeError):
        return 4 << 30


def _pair_isometry(left, right, weights, chi_max, eps):
    m = left.shape[0]
    d = left.shape[1] * right.shape[1]
    chi_cap = d if chi_max is None else int(chi_max)
    # eigensolvers need roughly three copies of the matrix
    budget = memory_budget()
    direct_ok = 3 * 8 * d * d <= budget
    gram_ok = 3 * 8 * m * m <= budget
    # Lanczos keeps about 2 chi + 1 basis vectors of length d
    lanczos_ok = eps > 0 and chi_cap < min(d, m) // 2 and 8 * d * (2 * chi_cap + 8) <= budget
    if not (direct_ok or gram_ok) and lanczos_ok:
        return _lanczos_isometry(left, right, weights, chi_cap, eps)
    if not (direct_ok or gram_ok):
        raise ResourceLimitError(
            f"pair space {left.shape[1]}x{right.shape[1]} with {m} samples needs a dense "
            f"{min(d, m)}^2 matrix, beyond the {budget / 2**30:.1f} GiB budget; "
            "lower chi_max or raise eps"
        )
    direct_cost = m * d * d + 4 * d**3
    gram_cost = m * m * (left.shape[1] + right.shape[1]) + 4 * m**3 + m * d * min(chi_cap, m)
    if d > 64 and gram_ok and (gram_cost < direct_cost or not direct_ok):
        return _gram_isometry(left, right, weights, chi_cap, eps)
    rdm = pair_rdm(left, right, weights)
    iso, disc = truncate_eig(rdm, chi_cap, eps)
    return iso, disc, rdm.raw_trace


# ---------------------------------------------------------------------------
# building and applying the tree
# ---------------------------------------------------------------------------


def _exclusive_products(pair_norms: np.ndarray) -> np.ndarray:
    """For each column k, the row-wise product of every other column."""
    m, n = pair_norms.shape
    prefix = np.ones((m, n + 1))
    suffix = np.ones((m, n + 1))
    np.cumprod(pair_norms, axis=1, out=prefix[:, 1:])
    np.cumprod(pair_norms[:, ::-1], axis=1, out=suffix[:, 1:])
    suffix = suffix[:, ::-1]
    return prefix[:, :n] * suffix[:, 1:]


def build_layer(states, norms, pairs, chi_max=None, eps=0.0, workers: int = 1, layer: int = 0):
    """Build one layer of isometries and renormalize every sample.

    ``states`` is a list of ``(M, dim)`` arrays, one per site; ``norms`` is the
    ``(M, n_sites)`` array of squared site norms.
    Returns ``(isometries, new_states, new_norms, stats)``.
    """
    pairs = [tuple(p) for p in pairs]
    n_sites = len(states)
    used = sorted(i for p in pairs for i in p)
    if used != list(range(n_sites)):
        raise ScheduleError("pairs do not form a perfect matching of the sites")
    norms = np.asarray(norms, dtype=np.float64)
    pair_norm = np.stack([norms[:, a] * norms[:, b] for a, b in pairs], axis=1)
    off_pair = _exclusive_products(pair_norm)

    def work(k):
        a, b = pairs[k]
        iso, disc, raw = _pair_isometry(states[a], states[b], off_pair[:, k], chi_max, eps)
        new = iso.apply(states[a], states[b])
        stats = NodeStats(layer, k, (iso.left_dim, iso.right_dim), iso.out_dim, disc, raw)
        return iso, new, stats

    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, range(len(pairs))))
    else:
        results = [work(k) for k in range(len(pairs))]
    isos = [r[0] for r in results]
    new_states = [r[1] for r in results]
    new_norms = np.stack([np.einsum("mk,mk->m", s, s) for s in new_states], axis=1)
    stats = [r[2] for r in results]
    return isos, new_states, new_norms, stats


def _per_layer(value, n_layers: int, name: str) -> list:
    if isinstance(value, (list, tuple)):
        if len(value) != n_layers:
            raise ValueError(f"{name} has {len(value)} entries for {n_layers} layers")
        return list(value)
    return [value] * n_layers


def build_tree(
    data,
    schedule: PairingSchedule,
    local_map: LocalMap,
    chi_max=None,
    eps=0.0,
    *,
    top_chi: Optional[int] = None,
    workers: int = 1,
    n_features: Optional[int] = None,
) -> TTNModel:
    """Fit the feature extractor on training data.

    ``data`` is either raw ``(M, L)`` values or embedded ``(M, L, 2)``
    amplitudes. ``chi_max`` and ``eps`` may be scalars or per-layer lists;
    ``top_chi`` caps the final node regardless.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        n_features = data.shape[1] if n_features is None else n_features
        data = pad_data(data, schedule.n_sites)
        amps = embed_batch(data, local_map)
    elif data.ndim == 3 and data.shape[2] == 2:
        amps = data
    else:
        raise ContractError(f"unsupported data shape {data.shape}")
    m, length = amps.shape[:2]
    if m < 1:
        raise ContractError("need at least one training sample")
    if length != schedule.n_sites:
        raise ScheduleError(f"data has {length} sites, schedule expects {schedule.n_sites}")
    n_features = length if n_features is None else n_features
    chis = _per_layer(chi_max, schedule.n_layers, "chi_max")
    epss = _per_layer(eps, schedule.n_layers, "eps")
    if top_chi is not None:
        chis[-1] = top_chi if chis[-1] is None else min(chis[-1], top_chi)

    states = [np.ascontiguousarray(amps[:, j, :]) for j in range(length)]
    norms = np.einsum("mjd,mjd->mj", amps, amps)
    nodes, all_stats = [], []
    for t, pairs in enumerate(schedule.layers):
        isos, states, norms, stats = build_layer(
            states, norms, pairs, chis[t], epss[t], workers=workers, layer=t
        )
        nodes.append(isos)
        all_stats.extend(stats)
        log.info(
            "layer %d: %d nodes, bond dims %s, max discarded %.2e",
            t, len(isos), [i.out_dim for i in isos], max(s.discarded for s in stats),
        )
    model = TTNModel(
        schedule,
        nodes,
        local_map,
        n_features,
        metadata={
            "chi_max": chis,
            "eps": epss,
            "n_train": m,
            "node_stats": [vars(s) | {"in_dims": list(s.in_dims)} for s in all_stats],
        },
    )
    return model


def coarse_grain(model: TTNModel, state) -> np.ndarray:
    """Top-scale feature vector of one embedded product state ``(L, 2)``
    (raw data vectors are embedded with the model's map first)."""
    state = np.asarray(state, dtype=np.float64)
    if state.ndim == 1:
        state = embed_vector(model.padded(state), model.local_map)
    if state.shape != (model.n_sites, 2) and state.shape[0] != model.n_sites:
        raise ContractError(f"state has {state.shape[0]} sites, model has {model.n_sites}")
    vecs = [state[j] for j in range(state.shape[0])]
    for layer, pairs in zip(model.nodes, model.schedule.layers):
        vecs = [node.apply(vecs[a], vecs[b]) for node, (a, b) in zip(layer, pairs)]
    return vecs[0]


def coarse_grain_batch(model: TTNModel, data, chunk: int = 4096) -> np.ndarray:
    """Top-scale features for a batch of raw data ``(M, L)`` or embedded
    amplitudes ``(M, L, 2)``."""
    data = np.asarray(data, dtype=np.float64)
    out = []
    for s in range(0, data.shape[0], chunk):
        block = data[s : s + chunk]
        if block.ndim == 2:
            block = embed_batch(model.padded(block), model.local_map)
        if block.shape[1] != model.n_sites:
            raise ContractError(f"data has {block.shape[1]} sites, model has {model.n_sites}")
        vecs = [np.ascontiguousarray(block[:, j, :]) for j in range(block.shape[1])]
        for layer, pairs in zip(model.nodes, model.schedule.layers):
            vecs = [node.apply(vecs[a], vecs[b]) for node, (a, b) in zip(layer, pairs)]
        out.append(vecs[0])
    if not out:
        return np.zeros((0, model.top_dim))
    return np.concatenate(out, axis=0)
