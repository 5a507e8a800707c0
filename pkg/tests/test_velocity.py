import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from kinslab import velocity as vel


@pytest.mark.parametrize("n", [4, 6, 8, 12])
def test_gauss_hermite_moments_exact(n):
    g = vel.build_velocity_grid(n_per_axis=n)
    tab = vel.moment_table(g)
    # polynomial moments up to degree 2n - 1 per axis are exact
    for key in ("mass", "v1^2", "|v|^2"):
        assert tab[key] < 1e-13
    if n >= 4:
        assert tab["v1^4"] < 1e-13
    assert g.tol_q >= 1e-13


def test_gauss_hermite_axis_matches_scipy_roots():
    # independent node generator: probabilists' Hermite roots from scipy.special
    x, w = special.roots_hermitenorm(12)
    g = vel.build_velocity_grid(n_per_axis=12)
    assert np.allclose(g.axis, x, atol=1e-13)
    assert np.allclose(g.axis_prob_weights, w / math.sqrt(2 * math.pi), atol=1e-15)


def test_weights_integrate_dv_not_mu_dv():
    g = vel.build_velocity_grid(n_per_axis=6)
    mu = vel.mu_of(g.nodes)
    v = g.nodes
    # int v1^2 v2^4 v3^6 mu dv = 1 * 3 * 15, exact for degree <= 11 per axis
    val = np.sum(g.weights * mu * v[:, 0] ** 2 * v[:, 1] ** 4 * v[:, 2] ** 6)
    assert val == pytest.approx(45.0, rel=1e-12)


def test_node_layout_row_major():
    g = vel.build_velocity_grid(n_per_axis=6)
    i, j, l = 2, 4, 1
    assert np.allclose(g.nodes[(i * 6 + j) * 6 + l], g.axis[[i, j, l]])


def test_no_grazing_nodes():
    g = vel.build_velocity_grid(n_per_axis=8)
    assert np.all(g.nodes[:, 2] != 0)
    with pytest.raises(vel.GridError, match="grazing"):
        vel.build_velocity_grid(n_per_axis=7)


def test_bad_rules_rejected():
    with pytest.raises(vel.GridError):
        vel.build_velocity_grid(rule="sobol")
    with pytest.raises(vel.GridError):
        vel.build_velocity_grid(n_per_axis=2)
    with pytest.raises(vel.GridError):
        vel.build_velocity_grid(rule="uniform_truncated", n_per_axis=8)


def test_uniform_grid_weights_positive_and_mass_close():
    g = vel.build_velocity_grid("uniform_truncated", 8, cutoff=4.0)
    assert np.all(g.weights > 0)
    assert g.tol_q < 0.05
    assert np.sum(g.weights * vel.mu_of(g.nodes)) == pytest.approx(1.0, rel=0.05)


def test_wall_flux_constant():
    # continuum constant: sqrt(2 pi) int_{v3>0} mu |v3| dv = 1
    flux = integrate.quad(lambda t: t * math.exp(-t * t / 2) / math.sqrt(2 * math.pi), 0, np.inf)[0]
    assert math.sqrt(2 * math.pi) * flux == pytest.approx(1.0, abs=1e-12)
    g = vel.build_velocity_grid(n_per_axis=12)
    mw = vel.maxwellian(g)
    assert mw.c_mu == pytest.approx(math.sqrt(2 * math.pi))
    # the discrete constant makes the discrete wall flux exactly one
    v3 = g.nodes[:, 2]
    assert mw.c_mu_h * np.sum(g.weights * mw.mu * v3 * (v3 > 0)) == pytest.approx(1.0, abs=1e-14)
    assert mw.c_mu_h == pytest.approx(mw.c_mu, rel=0.05)


def test_maxwellian_theta_range():
    g = vel.build_velocity_grid(n_per_axis=4)
    for bad in (0.0, 0.25, -0.1, 0.3):
        with pytest.raises(vel.GridError, match="theta"):
            vel.maxwellian(g, bad)
    mw = vel.maxwellian(g, 0.1)
    assert np.allclose(mw.w, np.exp(0.1 * g.speed2))
    assert np.allclose(mw.sqrt_mu**2, mw.mu)


def test_mirror_index_negates_components():
    g = vel.build_velocity_grid(n_per_axis=6)
    for axes in ((2,), (0, 1), (0, 1, 2)):
        idx = g.mirror_index(axes)
        flipped = g.nodes.copy()
        flipped[:, list(axes)] *= -1
        assert np.allclose(g.nodes[idx], flipped)


def test_hash_and_json_roundtrip():
    g = vel.build_velocity_grid(n_per_axis=6)
    h = vel.grid_from_json(g.to_json())
    assert h.hash() == g.hash()
    assert np.array_equal(h.nodes, g.nodes)
    assert vel.build_velocity_grid(n_per_axis=8).hash() != g.hash()


def test_hermite_functions_orthonormal():
    x, w = np.polynomial.hermite_e.hermegauss(20)
    w = w / math.sqrt(2 * math.pi)
    H = vel.hermite_functions(x, 6)
    G = H.T @ (H * w[:, None])
    assert np.allclose(G, np.eye(6), atol=1e-10)


def test_inner_product_length_check():
    g = vel.build_velocity_grid(n_per_axis=4)
    with pytest.raises(vel.GridError):
        vel.inner_product(np.ones(3), np.ones(3), g)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=64, max_size=64), st.lists(st.floats(-3, 3), min_size=64, max_size=64))
def test_inner_product_hermitian_and_positive(a, b):
    g = vel.build_velocity_grid(n_per_axis=4)
    f = np.array(a) + 0.5j * np.array(b)
    h = np.array(b) - 0.25j * np.array(a)
    assert vel.inner_product(f, h, g) == pytest.approx(np.conj(vel.inner_product(h, f, g)), abs=1e-9)
    assert vel.norm(f, g) >= 0
    assert vel.norm(f, g) ** 2 == pytest.approx(np.real(vel.inner_product(f, f, g)), rel=1e-12, abs=1e-12)
