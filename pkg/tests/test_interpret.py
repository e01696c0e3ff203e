import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_rdm, dense_state, random_model
from ttnqml.encoding import LocalMap, embed_local
from ttnqml.numerics import ContractError
from ttnqml.interpret import (
    all_one_point_rdms,
    correlation_dm,
    decode_average,
    interpret_basis,
    interpret_weights,
    mean_field_overlap,
    mutual_information,
    one_point_rdm,
    two_point_rdm,
    von_neumann_entropy,
    write_csv,
    write_pgm,
)
from ttnqml.ttn import WeightMatrix, build_tree, coarse_grain, topology_image, topology_linear

SP = LocalMap("scaled-phase", 0.1)


def _ptrace_second(rho4):
    return np.einsum("ajbj->ab", rho4.reshape(2, 2, 2, 2))


def _ptrace_first(rho4):
    return np.einsum("iaib->ab", rho4.reshape(2, 2, 2, 2))


class TestOnePoint:
    @pytest.mark.parametrize("n_sites", [4, 8])
    def test_dense_oracle(self, rng, n_sites):
        for _ in range(25):
            model = random_model(rng, n_sites, max_chi=5)
            v = rng.standard_normal(model.top_dim)
            psi = dense_state(model, v)
            ones = all_one_point_rdms(model, v)
            for j in range(n_sites):
                ref = dense_rdm(psi, n_sites, [j])
                np.testing.assert_allclose(ones[j], ref, atol=1e-10)
                np.testing.assert_allclose(one_point_rdm(model, v, j).matrix, ref, atol=1e-10)

    def test_image_schedule(self, rng):
        model = random_model(rng, 16, max_chi=3, schedule=topology_image(4, 4))
        v = rng.standard_normal(model.top_dim)
        psi = dense_state(model, v)
        for j in (0, 5, 10, 15):
            np.testing.assert_allclose(one_point_rdm(model, v, j).matrix, dense_rdm(psi, 16, [j]), atol=1e-10)

    def test_product_state_recovered(self, rng):
        X = rng.uniform(size=(40, 8))
        model = build_tree(X, topology_linear(8), SP, eps=0.0)
        x = X[3]
        v = coarse_grain(model, x)
        for j in range(8):
            phi = embed_local(x[j], SP)
            np.testing.assert_allclose(one_point_rdm(model, v, j).matrix, np.outer(phi, phi), atol=1e-12)

    def test_invariants(self, rng):
        model = random_model(rng, 8, max_chi=4)
        for m in all_one_point_rdms(model, rng.standard_normal(model.top_dim)):
            assert np.trace(m) == pytest.approx(1.0, abs=1e-9)
            assert np.linalg.eigvalsh(m).min() >= -1e-10

    def test_errors(self, rng):
        model = random_model(rng, 4)
        with pytest.raises(IndexError):
            one_point_rdm(model, np.ones(model.top_dim), 4)
        with pytest.raises(ContractError):
            one_point_rdm(model, np.ones(model.top_dim + 1), 0)
        with pytest.raises(ContractError):
            one_point_rdm(model, np.zeros(model.top_dim), 0)


class TestTwoPoint:
    def test_dense_oracle_l8(self, rng):
        for _ in range(25):
            model = random_model(rng, 8, max_chi=5)
            v = rng.standard_normal(model.top_dim)
            psi = dense_state(model, v)
            for i, j in [(0, 1), (1, 0), (2, 7), (6, 3), (4, 5)]:
                ref = dense_rdm(psi, 8, [i, j])
                np.testing.assert_allclose(two_point_rdm(model, v, i, j).matrix, ref, atol=1e-10)

    def test_marginals(self, rng):
        model = random_model(rng, 8, max_chi=4)
        v = rng.standard_normal(model.top_dim)
        two = two_point_rdm(model, v, 1, 6).matrix
        np.testing.assert_allclose(_ptrace_second(two), one_point_rdm(model, v, 1).matrix, atol=1e-10)
        np.testing.assert_allclose(_ptrace_first(two), one_point_rdm(model, v, 6).matrix, atol=1e-10)

    def test_product_state(self, rng):
        X = rng.uniform(size=(30, 8))
        model = build_tree(X, topology_linear(8), LocalMap("phase"), eps=0.0)
        v = coarse_grain(model, X[0])
        ones = all_one_point_rdms(model, v)
        two = two_point_rdm(model, v, 2, 5)
        np.testing.assert_allclose(two.matrix, np.kron(ones[2], ones[5]), atol=1e-12)
        np.testing.assert_allclose(correlation_dm(two, ones[2], ones[5]), 0.0, atol=1e-10)

    def test_same_site(self, rng):
        with pytest.raises(ContractError):
            two_point_rdm(random_model(rng, 4), np.ones(2), 1, 1)


class TestCorrelations:
    def test_cdm_trace_and_connected_correlator(self, rng):
        model = random_model(rng, 4, max_chi=4)
        v = rng.standard_normal(model.top_dim)
        psi = dense_state(model, v)
        two = two_point_rdm(model, v, 0, 2)
        o1, o2 = one_point_rdm(model, v, 0), one_point_rdm(model, v, 2)
        cdm = correlation_dm(two, o1, o2)
        assert abs(np.trace(cdm)) <= 1e-12
        z = np.diag([1.0, -1.0])
        t = psi.reshape(2, 2, 2, 2)
        zz = np.einsum("abcd,a,c,abcd->", t, np.diag(z), np.diag(z), t)
        za = np.einsum("abcd,a,abcd->", t, np.diag(z), t)
        zc = np.einsum("abcd,c,abcd->", t, np.diag(z), t)
        assert np.trace(cdm @ np.kron(z, z)) == pytest.approx(zz - za * zc, abs=1e-12)

    def test_cdm_site_mismatch(self, rng):
        model = random_model(rng, 4)
        v = np.ones(model.top_dim)
        with pytest.raises(ContractError):
            correlation_dm(two_point_rdm(model, v, 0, 1), one_point_rdm(model, v, 0), one_point_rdm(model, v, 2))

    def test_mi_closed_forms(self):
        rho = np.zeros((4, 4))
        rho[0, 0] = rho[3, 3] = 0.5
        half = np.eye(2) / 2
        assert mutual_information(half, half, rho) == pytest.approx(math.log(2), abs=1e-12)
        pure = np.outer([1.0, 0.0], [1.0, 0.0])
        assert mutual_information(pure, pure, np.kron(pure, pure)) == pytest.approx(0.0, abs=1e-12)

    def test_mi_dense_and_symmetric(self, rng):
        for _ in range(10):
            model = random_model(rng, 4, max_chi=4)
            v = rng.standard_normal(model.top_dim)
            psi = dense_state(model, v)

            def h(rho):
                w = np.linalg.eigvalsh(rho)
                w = w[w > 1e-15]
                return -np.sum(w * np.log(w))

            ref = h(dense_rdm(psi, 4, [1])) + h(dense_rdm(psi, 4, [3])) - h(dense_rdm(psi, 4, [1, 3]))
            o1, o3 = one_point_rdm(model, v, 1), one_point_rdm(model, v, 3)
            mi = mutual_information(o1, o3, two_point_rdm(model, v, 1, 3))
            mi_rev = mutual_information(o3, o1, two_point_rdm(model, v, 3, 1))
            assert mi == pytest.approx(ref, abs=1e-9)
            assert mi == pytest.approx(mi_rev, abs=1e-12)
            assert mi >= -1e-10

    def test_entropy_rejects_non_psd(self):
        with pytest.raises(ContractError):
            von_neumann_entropy(np.diag([1.5, -0.5]))


class TestDecode:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_pure_state_round_trip(self, x):
        phi = embed_local(x, SP)
        assert decode_average(np.outer(phi, phi), SP) == pytest.approx(x, abs=1e-10)

    def test_phase_round_trip(self):
        m = LocalMap("phase", x_min=-3.0, x_max=5.0)
        phi = embed_local(1.25, m)
        assert decode_average(np.outer(phi, phi), m) == pytest.approx(1.25, abs=1e-10)

    def test_maximally_mixed(self):
        assert decode_average(np.eye(2) / 2, SP) == 0.0

    def test_orthogonal_mixture(self):
        th = 0.3
        u = np.array([math.cos(th), math.sin(th)])
        w = np.array([-math.sin(th), math.cos(th)])  # sign-fixed to (sin, -cos)
        rho = 0.7 * np.outer(u, u) + 0.3 * np.outer(w, w)
        expected = (0.7 * th + 0.3 * (th - math.pi / 2)) / 0.1
        assert decode_average(rho, SP) == pytest.approx(expected, abs=1e-10)

    def test_zero_first_component(self):
        rho = np.diag([0.2, 0.8])
        # dominant eigenvector (0, 1) decodes to +pi/2, the other to 0
        assert decode_average(rho, SP) == pytest.approx(0.8 * (math.pi / 2) / 0.1, abs=1e-10)

    def test_polynomial_rejected(self):
        with pytest.raises(ContractError):
            decode_average(np.eye(2) / 2, LocalMap("polynomial"))


class TestMeanField:
    def test_identical(self):
        exact, approx = mean_field_overlap([0.2, 0.5], [0.2, 0.5], SP)
        assert exact == 1.0
        np.testing.assert_array_equal(approx, 1.0)

    def test_single_site(self):
        exact, _ = mean_field_overlap([1.0], [0.0], SP)
        assert exact == pytest.approx(0.9950042, abs=1e-7)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 2**31 - 1))
    def test_taylor_bound(self, n, seed):
        r = np.random.default_rng(seed)
        z, xbar = r.uniform(size=n), r.uniform(size=n)
        exact, approx = mean_field_overlap(z, xbar, SP)
        assert abs(exact - np.prod(approx)) <= n * SP.a**4 / 24

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            mean_field_overlap([0.1], [0.1, 0.2], SP)


class TestReports:
    def test_round_trip_single_class(self, rng):
        X = rng.uniform(size=(50, 8))
        model = build_tree(X, topology_linear(8), SP, eps=0.0)
        v = coarse_grain(model, X[7])
        model.weights = WeightMatrix((v / np.linalg.norm(v))[:, None], is_isometric=True)
        rep = interpret_weights(model)
        np.testing.assert_allclose(rep.averages[0], X[7], atol=1e-8)

    def test_anchor_maps(self, rng):
        model = random_model(rng, 8, max_chi=3, n_classes=2)
        rep = interpret_weights(model, anchor=2)
        assert rep.cdm_element.shape == (2, 8) and rep.mutual_info.shape == (2, 8)
        assert rep.cdm_element[0, 2] == 0.0
        assert np.all(rep.mutual_info >= -1e-10)
        with pytest.raises(IndexError):
            interpret_weights(model, anchor=8)

    def test_basis(self, rng):
        model = random_model(rng, 8, max_chi=3)
        assert interpret_basis(model, limit=2).shape == (2, 8)

    def test_writers(self, rng, tmp_path):
        img = rng.uniform(-1, 2, size=(4, 4))
        write_csv(tmp_path / "a.csv", img)
        np.testing.assert_allclose(np.loadtxt(tmp_path / "a.csv", delimiter=","), img)
        lo, hi = write_pgm(tmp_path / "a.pgm", img)
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n4 4\n255\n")
        pix = np.frombuffer(raw[-16:], dtype=np.uint8)
        assert pix.min() == 0 and pix.max() == 255
        assert (lo, hi) == (img.min(), img.max())
        assert (tmp_path / "a.pgm.scale.txt").exists()
