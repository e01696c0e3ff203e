"""Export of isometric TTN classifiers as qubit circuits, and a simulator.

Every bond of dimension ``chi`` becomes a register of ``ceil(log2 chi)``
qubits. A node acts on the concatenated registers of its children; the first
``ceil(log2 chi_out)`` of those qubits carry the result and the rest are left
in the decoupled state ``Upsilon``, then measured and reset for reuse. Nodes
are emitted depth first, so only a few data qubits are alive at once.

Circuit text format (one statement per line, ``#`` starts a comment)::

    TTNCIRCUIT 1
    QUBITS <n>
    CLASSES <C>
    CLASS_REGISTER <q...>
    MAP <kind> <a> <x_min> <x_max>
    PREPARE <q> site=<j>
    GATE <q...> | out=<k> | <row-major 2^n x 2^n entries>
    ISOGATE <q...> | out=<k> | <Upsilon entries> | <row-major isometry entries>
    MEASURE_RESET <q...> | <Upsilon entries>
    END
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .encoding import LocalMap, embed_vector
from .numerics import orthonormality_error, svd
from .ttn import Isometry, TTNModel

__all__ = [
    "CircuitError",
    "NonIsometricError",
    "UnitaryGate",
    "IsometryGate",
    "Prepare",
    "MeasureReset",
    "CircuitDescription",
    "pad_isometry",
    "complete_columns",
    "complete_unitary",
    "export_circuit",
    "simulate_circuit",
    "swap_test_probability",
    "qubit_bound",
    "write_circuit",
    "read_circuit",
]

FORMAT_VERSION = 1
GATE_TOL = 1e-10
MAX_SIM_QUBITS = 20
# gates wider than this are stored as isometries instead of full unitaries
DEFAULT_ISOGATE_QUBITS = 10


class CircuitError(ValueError):
    pass


class NonIsometricError(CircuitError):
    pass


def _nqubits(dim: int) -> int:
    return 0 if dim <= 1 else math.ceil(math.log2(dim))


@dataclass
class UnitaryGate:
    qubits: list
    matrix: np.ndarray
    n_out: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        n = 2 ** len(self.qubits)
        if self.matrix.shape != (n, n):
            raise CircuitError(f"gate on {len(self.qubits)} qubits needs a {n}x{n} matrix")

    def error(self) -> float:
        return orthonormality_error(self.matrix)


@dataclass
class IsometryGate:
    """A gate given by its action on the isometry domain only:
    ``|in> -> (V^T |in>) kron |Upsilon>``."""

    qubits: list
    isometry: np.ndarray
    upsilon: np.ndarray
    n_out: int

    def __post_init__(self):
        self.isometry = np.asarray(self.isometry, dtype=np.float64)
        self.upsilon = np.asarray(self.upsilon, dtype=np.float64).ravel()
        n = 2 ** len(self.qubits)
        if self.isometry.shape != (n, 2**self.n_out) or self.upsilon.size * 2**self.n_out != n:
            raise CircuitError("isometry gate dimensions inconsistent with its qubits")

    def error(self) -> float:
        return orthonormality_error(self.isometry)


@dataclass
class Prepare:
    qubit: int
    site: int


@dataclass
class MeasureReset:
    qubits: list
    upsilon: np.ndarray

    def __post_init__(self):
        self.upsilon = np.asarray(self.upsilon, dtype=np.float64).ravel()
        if self.upsilon.size != 2 ** len(self.qubits):
            raise CircuitError("post-selection state has the wrong dimension")


Op = Union[Prepare, UnitaryGate, IsometryGate, MeasureReset]


@dataclass
class CircuitDescription:
    n_qubits: int
    n_classes: int
    class_register: list
    local_map: LocalMap
    ops: list = field(default_factory=list)

    @property
    def gates(self) -> list:
        return [op for op in self.ops if isinstance(op, (UnitaryGate, IsometryGate))]

    @property
    def gate_count(self) -> int:
        return len(self.gates)

    def peak_qubits(self) -> int:
        """Largest number of simultaneously live qubits."""
        live, peak = set(), 0
        for op in self.ops:
            if isinstance(op, Prepare):
                live.add(op.qubit)
            elif isinstance(op, MeasureReset):
                live.difference_update(op.qubits)
            peak = max(peak, len(live))
        return peak

    def validate(self) -> None:
        for op in self.ops:
            qs = [op.qubit] if isinstance(op, Prepare) else op.qubits
            if any(not 0 <= q < self.n_qubits for q in qs):
                raise CircuitError(f"qubit index out of range in {type(op).__name__}")
            if isinstance(op, (UnitaryGate, IsometryGate)) and op.error() > GATE_TOL:
                raise CircuitError("gate is not orthogonal")
        if len(self.class_register) != _nqubits(self.n_classes):
            raise CircuitError("class register size does not match class count")


# ---------------------------------------------------------------------------
# gate construction
# ---------------------------------------------------------------------------


def complete_columns(u: np.ndarray, n_cols: int, preferred: Optional[np.ndarray] = None) -> np.ndarray:
    """Append orthonormal columns by Gram-Schmidt until there are ``n_cols``.

    Candidate vectors are the standard basis vectors, taking the row indices
    in ``preferred`` first.
    """
    rows = u.shape[0]
    if n_cols > rows:
        raise CircuitError("cannot complete more columns than rows")
    order = list(preferred) if preferred is not None else []
    order += [i for i in range(rows) if i not in set(order)]
    cols = [u[:, k] for k in range(u.shape[1])]
    basis = np.array(cols).T if cols else np.zeros((rows, 0))
    for i in order:
        if basis.shape[1] >= n_cols:
            break
        e = np.zeros(rows)
        e[i] = 1.0
        for _ in range(2):
            e -= basis @ (basis.T @ e)
        n = np.linalg.norm(e)
        if n > 1e-8:
            basis = np.column_stack([basis, e / n])
    return basis


def pad_isometry(node: Isometry) -> tuple[np.ndarray, int, int, int]:
    """Embed a node into power-of-two registers.

    Returns ``(V, qa, qb, qout)`` where ``V`` has ``2^(qa+qb)`` rows and
    ``2^qout`` orthonormal columns. Padded input rows are zero in the
    original columns; added columns are completed by Gram-Schmidt,
    preferring the padded rows.
    """
    qa, qb, qo = _nqubits(node.left_dim), _nqubits(node.right_dim), _nqubits(node.out_dim)
    da, db = 2**qa, 2**qb
    v = np.zeros((da, db, node.out_dim))
    v[: node.left_dim, : node.right_dim] = node.tensor
    v = v.reshape(da * db, node.out_dim)
    real = np.zeros((da, db), dtype=bool)
    real[: node.left_dim, : node.right_dim] = True
    padded_rows = np.flatnonzero(~real.ravel())
    if 2**qo > node.out_dim:
        v = complete_columns(v, 2**qo, padded_rows)
    return v, qa, qb, qo


def _upsilon(dim: int, upsilon=None) -> np.ndarray:
    if upsilon is None:
        ups = np.zeros(dim)
        ups[0] = 1.0
        return ups
    ups = np.asarray(upsilon, dtype=np.float64).ravel()
    if ups.size != dim:
        raise CircuitError(f"decoupled state needs {dim} amplitudes, got {ups.size}")
    if abs(np.linalg.norm(ups) - 1.0) > 1e-12:
        raise CircuitError("decoupled state must have unit norm")
    return ups


def complete_unitary(isometry, upsilon=None) -> np.ndarray:
    """Orthogonal ``Q`` closest to ``sum_mu |mu>|Upsilon><v_mu|``.

    ``isometry`` is ``(N, chi)`` with ``N`` and ``chi`` powers of two (or an
    :class:`Isometry` whose dims are). ``Q`` maps each column ``v_mu`` to
    ``|mu> kron |Upsilon>``.
    """
    v = isometry.matrix if isinstance(isometry, Isometry) else np.asarray(isometry, dtype=np.float64)
    n, chi = v.shape
    if n & (n - 1) or chi & (chi - 1):
        raise CircuitError(f"dimensions {n}x{chi} must be powers of two")
    if isinstance(isometry, Isometry):
        for d in (isometry.left_dim, isometry.right_dim):
            if d & (d - 1):
                raise CircuitError(f"input dimension {d} is not a power of two")
    ups = _upsilon(n // chi, upsilon)
    target = np.kron(v.T, ups[:, None])  # rows (mu, zeta), cols input
    u, _, vh = svd(target)
    return u @ vh


def qubit_bound(model: TTNModel, n_classes: Optional[int] = None) -> int:
    """``ceil(log2 L) * max ceil(log2 chi) + ceil(log2 C)``."""
    if n_classes is None:
        n_classes = model.weights.n_classes if model.weights is not None else 1
    chis = [2] + [d for layer in model.bond_dims for d in layer]
    return _nqubits(model.n_sites) * max(_nqubits(c) for c in chis) + _nqubits(n_classes)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


class _Allocator:
    def __init__(self):
        self.free: list[int] = []
        self.count = 0

    def take(self) -> int:
        if self.free:
            self.free.sort()
            return self.free.pop(0)
        self.count += 1
        return self.count - 1

    def release(self, qubits) -> None:
        self.free.extend(qubits)


def export_circuit(
    model: TTNModel,
    upsilon: Optional[dict] = None,
    isogate_qubits: int = DEFAULT_ISOGATE_QUBITS,
) -> CircuitDescription:
    """Translate an isometric model into a circuit description.

    ``upsilon`` optionally maps ``(layer, position)`` (or ``"weights"``) to a
    decoupled-state vector; the default is ``|0...0>``. Gates wider than
    ``isogate_qubits`` are stored in isometry form.
    """
    if model.weights is None or not model.weights.is_isometric:
        raise NonIsometricError(
            "circuit export needs isometric weights; replace them with "
            "nearest_isometry(W) or optimise with manifold_gd first"
        )
    if not model.local_map.normalized:
        raise CircuitError("the polynomial map does not give normalized qubit states")
    upsilon = upsilon or {}
    w = model.weights.matrix
    n_classes = w.shape[1]
    alloc = _Allocator()
    ops: list = []
    layers = model.schedule.layers

    # peak qubits needed by each subtree, for choosing the evaluation order
    peaks = [[1] * model.n_sites]
    outq = [[1] * model.n_sites]
    for t, pairs in enumerate(layers):
        pk, oq = [], []
        for k, (a, b) in enumerate(pairs):
            pa, pb, na, nb = peaks[t][a], peaks[t][b], outq[t][a], outq[t][b]
            pk.append(min(max(pa, na + pb), max(pb, nb + pa)))
            oq.append(_nqubits(model.nodes[t][k].out_dim))
        peaks.append(pk)
        outq.append(oq)

    def make_gate(qubits, v, q_out, key):
        ups = _upsilon(v.shape[0] // v.shape[1], upsilon.get(key))
        if len(qubits) > isogate_qubits:
            ops.append(IsometryGate(list(qubits), v, ups, q_out))
        else:
            ops.append(UnitaryGate(list(qubits), complete_unitary(v, ups), q_out))
        out, dec = list(qubits[:q_out]), list(qubits[q_out:])
        if dec:
            ops.append(MeasureReset(dec, ups))
            alloc.release(dec)
        return out

    def emit(t, k):
        """Registers for output site k of layer t-1 (t = 0: data sites)."""
        if t == 0:
            q = alloc.take()
            ops.append(Prepare(q, k))
            return [q]
        a, b = layers[t - 1][k]
        pa, pb = peaks[t - 1][a], peaks[t - 1][b]
        na, nb = outq[t - 1][a], outq[t - 1][b]
        if max(pa, na + pb) <= max(pb, nb + pa):
            ra = emit(t - 1, a)
            rb = emit(t - 1, b)
        else:
            rb = emit(t - 1, b)
            ra = emit(t - 1, a)
        node = model.nodes[t - 1][k]
        v, qa, qb, qo = pad_isometry(node)
        return make_gate(ra + rb, v, qo, (t - 1, k))

    top = emit(len(layers), 0)
    q_cls = _nqubits(n_classes)
    dim_top = 2 ** len(top)
    if 2**q_cls > dim_top:
        raise CircuitError("top register is smaller than the class register")
    wp = np.zeros((dim_top, w.shape[1]))
    wp[: w.shape[0]] = w
    if 2**q_cls > n_classes:
        wp = complete_columns(wp, 2**q_cls, np.arange(w.shape[0], dim_top))
    cls_reg = make_gate(top, wp, q_cls, "weights")
    circ = CircuitDescription(alloc.count, n_classes, cls_reg, model.local_map, ops)
    circ.validate()
    return circ


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


class _State:
    """Real state vector over the currently live qubits."""

    def __init__(self):
        self.psi = np.ones(())
        self.axes: list[int] = []

    def _front(self, qubits):
        idx = [self.axes.index(q) for q in qubits]
        rest = [i for i in range(len(self.axes)) if i not in idx]
        psi = np.transpose(self.psi, idx + rest)
        return psi.reshape(2 ** len(qubits), -1), [self.axes[i] for i in rest]

    def prepare(self, q, amps):
        if q in self.axes:
            raise CircuitError(f"qubit {q} prepared while live")
        self.psi = np.multiply.outer(self.psi, amps)
        self.axes.append(q)
        if len(self.axes) > MAX_SIM_QUBITS:
            raise CircuitError(f"more than {MAX_SIM_QUBITS} live qubits")

    def apply(self, qubits, fn):
        mat, rest = self._front(qubits)
        out = fn(mat)
        self.psi = out.reshape((2,) * (len(qubits) + len(rest)))
        self.axes = list(qubits) + rest

    def project(self, qubits, ups):
        mat, rest = self._front(qubits)
        self.psi = (ups @ mat).reshape((2,) * len(rest))
        self.axes = rest


def simulate_circuit(circ: CircuitDescription, x, model: Optional[TTNModel] = None) -> np.ndarray:
    """Class probabilities for data vector ``x``.

    Measure-and-reset steps are simulated by post-selecting the decoupled
    qubits on ``Upsilon``; the class-register distribution is renormalized
    over the valid classes.
    """
    local_map = circ.local_map if model is None else model.local_map
    x = np.asarray(x, dtype=np.float64).ravel()
    n_sites = 1 + max(op.site for op in circ.ops if isinstance(op, Prepare))
    if model is not None:
        x = model.padded(x)
    elif x.size < n_sites:
        x = np.pad(x, (0, n_sites - x.size))
    amps = embed_vector(x, local_map)
    st = _State()
    for op in circ.ops:
        if isinstance(op, Prepare):
            st.prepare(op.qubit, amps[op.site])
        elif isinstance(op, UnitaryGate):
            st.apply(op.qubits, lambda m, g=op: g.matrix @ m)
        elif isinstance(op, IsometryGate):
            def iso(m, g=op):
                y = g.isometry.T @ m
                return np.einsum("ir,z->izr", y, g.upsilon).reshape(-1, m.shape[1])
            st.apply(op.qubits, iso)
        elif isinstance(op, MeasureReset):
            st.project(op.qubits, op.upsilon)
    if sorted(st.axes) != sorted(circ.class_register):
        raise CircuitError("qubits other than the class register remain live")
    mat, _ = st._front(circ.class_register)
    probs = (mat[:, 0] ** 2)[: circ.n_classes] if mat.size else np.ones(1)
    total = probs.sum()
    if total <= 0:
        raise CircuitError("post-selection probability is zero")
    return probs / total


def swap_test_probability(f: float) -> float:
    """Probability of the ancilla outcome that signals a mismatch, ``(1 - f) / 2``."""
    return (1.0 - float(f)) / 2.0


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def write_circuit(circ: CircuitDescription, path) -> None:
    m = circ.local_map
    lines = [
        f"TTNCIRCUIT {FORMAT_VERSION}",
        f"QUBITS {circ.n_qubits}",
        f"CLASSES {circ.n_classes}",
        "CLASS_REGISTER " + " ".join(f"q{q}" for q in circ.class_register),
        f"MAP {m.kind.value} {m.a!r} {m.x_min!r} {m.x_max!r}",
    ]
    for op in circ.ops:
        if isinstance(op, Prepare):
            lines.append(f"PREPARE q{op.qubit} site={op.site}")
        elif isinstance(op, UnitaryGate):
            qs = " ".join(f"q{q}" for q in op.qubits)
            lines.append(f"GATE {qs} | out={op.n_out} | {_fmt(op.matrix)}")
        elif isinstance(op, IsometryGate):
            qs = " ".join(f"q{q}" for q in op.qubits)
            lines.append(f"ISOGATE {qs} | out={op.n_out} | {_fmt(op.upsilon)} | {_fmt(op.isometry)}")
        else:
            qs = " ".join(f"q{q}" for q in op.qubits)
            lines.append(f"MEASURE_RESET {qs} | {_fmt(op.upsilon)}")
    lines.append("END")
    Path(path).write_text("\n".join(lines) + "\n")


def _qubits(text: str) -> list[int]:
    out = []
    for tok in text.split():
        if not tok.startswith("q"):
            raise CircuitError(f"bad qubit token {tok!r}")
        out.append(int(tok[1:]))
    return out


def _floats(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split()], dtype=np.float64)


def read_circuit(path) -> CircuitDescription:
    header: dict = {}
    ops: list = []
    ended = False
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, _, rest = line.partition(" ")
        try:
            if word == "TTNCIRCUIT":
                if int(rest) != FORMAT_VERSION:
                    raise CircuitError(f"unsupported circuit version {rest}")
                header["version"] = int(rest)
            elif word in ("QUBITS", "CLASSES"):
                header[word] = int(rest)
            elif word == "CLASS_REGISTER":
                header[word] = _qubits(rest)
            elif word == "MAP":
                kind, a, lo, hi = rest.split()
                header[word] = LocalMap(kind, float(a), float(lo), float(hi))
            elif word == "PREPARE":
                q, site = rest.split()
                ops.append(Prepare(_qubits(q)[0], int(site.split("=")[1])))
            elif word == "GATE":
                qs, out, data = (s.strip() for s in rest.split("|"))
                mat = _floats(data)
                n = 2 ** len(_qubits(qs))
                ops.append(UnitaryGate(_qubits(qs), mat.reshape(n, n), int(out.split("=")[1])))
            elif word == "ISOGATE":
                qs, out, ups, data = (s.strip() for s in rest.split("|"))
                k = int(out.split("=")[1])
                mat = _floats(data).reshape(2 ** len(_qubits(qs)), 2**k)
                ops.append(IsometryGate(_qubits(qs), mat, _floats(ups), k))
            elif word == "MEASURE_RESET":
                qs, ups = (s.strip() for s in rest.split("|"))
                ops.append(MeasureReset(_qubits(qs), _floats(ups)))
            elif word == "END":
                ended = True
                break
            else:
                raise CircuitError(f"unknown statement {word!r}")
        except (ValueError, IndexError) as err:
            raise CircuitError(f"line {lineno}: {err}") from None
    missing = {"version", "QUBITS", "CLASSES", "CLASS_REGISTER", "MAP"} - header.keys()
    if missing or not ended:
        raise CircuitError(f"incomplete circuit file (missing {sorted(missing) or 'END'})")
    circ = CircuitDescription(header["QUBITS"], header["CLASSES"], header["CLASS_REGISTER"], header["MAP"], ops)
    circ.validate()
    return circ
