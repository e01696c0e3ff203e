"""Shared fixtures and dense reference computations.

The dense helpers below never touch the tree code paths: they build the full
``2^L`` product state and the full data-space map of a tree by explicit
Kronecker products, so they serve as independent oracles at small L.
"""
import numpy as np
import pytest

from ttnqml.encoding import LocalMap, embed_vector
from ttnqml.ttn import Isometry, TTNModel, WeightMatrix, coarse_grain, topology_linear


def dense_product_state(amps):
    """Kronecker product of per-site amplitudes ``(L, 2)`` in site order."""
    psi = np.ones(1)
    for site in amps:
        psi = np.kron(psi, site)
    return psi


def dense_tree_map(model):
    """Full ``(2^L, top_dim)`` map of the tree, rows in natural site order."""
    maps = [np.eye(2) for _ in range(model.n_sites)]
    order = [[j] for j in range(model.n_sites)]
    for layer, pairs in zip(model.nodes, model.schedule.layers):
        maps = [np.kron(maps[a], maps[b]) @ node.matrix for node, (a, b) in zip(layer, pairs)]
        order = [order[a] + order[b] for a, b in pairs]
    top, leaves = maps[0], order[0]
    n = model.n_sites
    t = top.reshape((2,) * n + (top.shape[1],))
    # axis i of t belongs to site leaves[i]
    t = np.transpose(t, [leaves.index(j) for j in range(n)] + [n])
    return t.reshape(2**n, -1)


def random_isometry(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def random_model(rng, n_sites, max_chi=3, n_classes=2, local_map=None, schedule=None, isometric=True):
    """Tree with random isometries; bond dims drawn in ``1..max_chi`` but
    never above what the children can support."""
    schedule = schedule or topology_linear(n_sites)
    local_map = local_map or LocalMap("scaled-phase", 0.3)
    dims = [2] * n_sites
    nodes = []
    for t, pairs in enumerate(schedule.layers):
        layer, new_dims = [], []
        for a, b in pairs:
            d = dims[a] * dims[b]
            if t == schedule.n_layers - 1:
                out = min(d, max(n_classes, int(rng.integers(1, max_chi + 1))))
            else:
                out = min(d, int(rng.integers(1, max_chi + 1)))
            layer.append(Isometry(random_isometry(rng, d, out), dims[a], dims[b]))
            new_dims.append(out)
        nodes.append(layer)
        dims = new_dims
    top = dims[0]
    if isometric:
        w = WeightMatrix(random_isometry(rng, top, n_classes), is_isometric=True)
    else:
        w = WeightMatrix(rng.standard_normal((top, n_classes)))
    return TTNModel(schedule, nodes, local_map, n_sites, w)


def dense_top_density(model, x, present):
    """Top density operator from the full 2^L map with absent sites traced."""
    t = dense_tree_map(model).reshape((2,) * model.n_sites + (model.top_dim,))
    amps = embed_vector(x, model.local_map)
    # contract present sites from the last axis backwards so indices stay valid
    for j in reversed(range(model.n_sites)):
        if present[j]:
            t = np.tensordot(t, amps[j], axes=([j], [0]))
    g = t.reshape(-1, model.top_dim)
    rho = g.T @ g
    return rho / np.trace(rho)


def dense_decision(model, rho):
    """``p1 |<W_l|lambda_1>|^2``, averaged over a degenerate leading eigenspace."""
    w, v = np.linalg.eigh(rho)
    p1 = w[-1]
    tied = w >= p1 - 1e-9
    proj = v[:, tied].T @ model.weights.matrix
    return p1 * np.mean(proj**2, axis=0), p1


def dense_state(model, v):
    psi = dense_tree_map(model) @ v
    return psi / np.linalg.norm(psi)


def dense_rdm(psi, n, sites):
    t = psi.reshape((2,) * n)
    rest = [j for j in range(n) if j not in sites]
    t = np.transpose(t, list(sites) + rest).reshape(2 ** len(sites), -1)
    return t @ t.T


def classical_distribution(model, x):
    vals = coarse_grain(model, x) @ model.weights.matrix
    p = vals**2
    return p / p.sum()


def embed_rows(X, local_map):
    return np.stack([dense_product_state(embed_vector(x, local_map)) for x in X])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def scaled_phase():
    return LocalMap("scaled-phase", 0.1)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion and print it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
