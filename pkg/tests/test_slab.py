import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinslab import slab as sl
from kinslab import velocity as vel


@pytest.fixture(scope="module")
def ph():
    g = vel.build_velocity_grid(n_per_axis=6)
    return sl.Phase(g, sl.build_slab(12), vel.maxwellian(g))


def test_cell_centres_avoid_walls():
    s = sl.build_slab(16)
    assert s.x[0] == pytest.approx(-1 + 1 / 16)
    assert s.x[-1] == pytest.approx(1 - 1 / 16)
    assert s.weights.sum() == pytest.approx(2.0)


def test_bad_slab_rejected():
    with pytest.raises(sl.SlabError):
        sl.build_slab(7)
    with pytest.raises(sl.SlabError):
        sl.build_slab(8, scheme="weno5")


@pytest.mark.parametrize("scheme,order", [("upwind_fd_order1", 1), ("upwind_fd_order2", 2)])
def test_upwind_convergence_order(scheme, order):
    # v3 d/dx sin(x) for a single positive-v3 column with exact inflow
    g = vel.build_velocity_grid(n_per_axis=4)
    errs = []
    for nx in (32, 64, 128):
        ph = sl.Phase(g, sl.build_slab(nx, scheme), vel.maxwellian(g))
        x = ph.slab.x
        F = np.sin(x)[:, None] * np.ones(g.count)[None, :]
        inL = np.full(g.count, np.sin(-1.0))
        inR = np.full(g.count, np.sin(1.0))
        TF = sl.apply_transport(F, ph, "given", (inL, inR))
        exact = np.cos(x)[:, None] * ph.v3[None, :]
        # interior error, away from the first-order boundary faces
        errs.append(np.max(np.abs(TF - exact)[3:-3]))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > order - 0.2)


def test_diffuse_transport_conserves_mass(ph, rng):
    F = rng.standard_normal(ph.shape)
    TF = sl.apply_transport(F, ph, "diffuse")
    assert abs(sl.mass(TF, ph)) < 1e-12 * np.abs(TF).max()


def test_absorbing_transport_loses_mass():
    g = vel.build_velocity_grid(n_per_axis=6)
    ph = sl.Phase(g, sl.build_slab(12), vel.maxwellian(g))
    F = np.broadcast_to(ph.mw.sqrt_mu, ph.shape).copy()
    assert sl.mass(sl.apply_transport(F, ph, "absorbing"), ph) > 1e-3


def test_diffuse_reflection_preserves_equilibrium(ph):
    F = np.broadcast_to(ph.mw.sqrt_mu, ph.shape).copy()
    assert np.abs(sl.apply_transport(F, ph, "diffuse")).max() < 1e-12


def test_transport_parts_match_apply(ph, rng):
    S, U, Phi = sl.transport_parts(ph, "diffuse")
    F = rng.standard_normal(ph.shape)
    flat = S @ F.ravel() + U @ (Phi.T @ F.ravel())
    assert np.allclose(flat.reshape(ph.shape), sl.apply_transport(F, ph, "diffuse"), atol=1e-12)
    S0, U0, _ = sl.transport_parts(ph, "absorbing")
    assert U0.shape[1] == 0
    assert np.allclose((S0 @ F.ravel()).reshape(ph.shape), sl.apply_transport(F, ph, "absorbing"))


def test_apply_Pgamma_matches_inflow(ph, rng):
    F = rng.standard_normal(ph.shape)
    tr = sl.wall_traces(F, ph, "diffuse")
    assert np.allclose(sl.apply_Pgamma(tr, ph), tr)
    # incoming wall flux equals outgoing flux at each wall
    fl = ph.flux_w
    assert np.sum(tr[0][ph.pos] * fl[ph.pos]) * ph.mw.c_mu_h == pytest.approx(
        np.sum(tr[0][ph.neg] * fl[ph.neg]) * ph.mw.c_mu_h, rel=1e-12
    )


def test_fourier_basis_orthonormal_and_alias_guard():
    s = sl.build_slab(16)
    B = sl.fourier_basis(s, 4)
    assert np.allclose(s.h * B.T @ B, np.eye(9), atol=1e-12)
    with pytest.raises(sl.SlabError, match="alias"):
        sl.fourier_basis(s, 8)


def test_projections_idempotent(ph, rng):
    F = rng.standard_normal(ph.shape)
    for P in (lambda G: sl.apply_P(G, ph), lambda G: sl.apply_P0(G, ph), lambda G: sl.apply_Pn(G, ph.slab, 3)):
        once = P(F)
        assert np.allclose(P(once), once, atol=1e-12)
    # P0 is the mass mode: it leaves mass unchanged
    assert sl.mass(sl.apply_P0(F, ph), ph) == pytest.approx(sl.mass(F, ph))


def test_finite_rank_of_Kn(coll8, phase8):
    for n in (0, 1, 3):
        r = sl.finite_rank_check(coll8, phase8.slab, n)
        assert r["rank"] == r["expected"] == 2 * n + 1


def test_state_bytes_roundtrip(ph, rng):
    F = (rng.standard_normal(ph.shape) + 1j * rng.standard_normal(ph.shape)).astype(np.complex64)
    buf = sl.to_bytes(F)
    assert len(buf) == 8 * ph.size
    assert np.array_equal(sl.from_bytes(buf, ph), F.astype(complex))
    # row-major (x3, v), little-endian complex64
    first = np.frombuffer(buf[:8], dtype="<f4")
    assert first[0] == F[0, 0].real and first[1] == F[0, 0].imag


def test_shape_mismatch_rejected(ph):
    with pytest.raises(sl.SlabError):
        sl.apply_transport(np.zeros((3, 3)), ph)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_diffuse_transport_is_dissipative(seed):
    g = vel.build_velocity_grid(n_per_axis=4)
    ph = sl.Phase(g, sl.build_slab(8), vel.maxwellian(g))
    F = np.random.default_rng(seed).standard_normal(ph.shape)
    val = sl.pairing(sl.apply_transport(F, ph, "diffuse"), F, ph).real
    assert val >= -1e-12 * sl.pairing(F, F, ph).real


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_transport_is_linear(seed, a, b):
    g = vel.build_velocity_grid(n_per_axis=4)
    ph = sl.Phase(g, sl.build_slab(8), vel.maxwellian(g))
    r = np.random.default_rng(seed)
    F, G = r.standard_normal((2,) + ph.shape)
    lhs = sl.apply_transport(a * F + b * G, ph)
    rhs = a * sl.apply_transport(F, ph) + b * sl.apply_transport(G, ph)
    assert np.allclose(lhs, rhs, atol=1e-10)
