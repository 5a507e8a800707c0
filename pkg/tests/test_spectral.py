import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinslab import collision as col
from kinslab import slab as sl
from kinslab import spectral as spc
from kinslab import velocity as vel


@pytest.fixture(scope="module")
def small():
    g = vel.build_velocity_grid(n_per_axis=6)
    ph = sl.Phase(g, sl.build_slab(8), vel.maxwellian(g))
    return ph, col.assemble_K(g)


@pytest.fixture(scope="module")
def g1(small):
    ph, C = small
    return spc.solve_G1(ph, C, n=2)


def test_dense_matches_matvec(small, rng):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.3, 2)
    x = rng.standard_normal(op.size) + 1j * rng.standard_normal(op.size)
    assert np.allclose(op.dense() @ x, op.matvec(x), atol=1e-10)
    assert np.allclose(op.apply(x.reshape(ph.shape)).ravel(), op.matvec(x))
    y = rng.standard_normal(op.size) + 1j * rng.standard_normal(op.size)
    assert np.vdot(y, op.matvec(x)) == pytest.approx(np.vdot(op.rmatvec(y), x), rel=1e-10)


def test_full_K_is_the_untruncated_operator(small, rng):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.1, None)
    assert op.use_full_K and op.basis is None
    F = rng.standard_normal(ph.shape)
    assert np.allclose(op.apply_Kn(F), C.apply_K(F))


def test_vector_k_rotation(small, rng):
    ph, C = small
    # k along v2 equals k along v1 after swapping the two velocity axes
    op1 = spc.ModeOperator(ph, C, 0.2, 2)
    op2 = spc.ModeOperator(ph, C, (0.0, 0.2), 2)
    assert op2.k == pytest.approx(0.2)
    n = ph.vgrid.n_per_axis
    swap = np.arange(ph.vgrid.count).reshape(n, n, n).transpose(1, 0, 2).ravel()
    F = rng.standard_normal(ph.shape)
    assert np.allclose(op2.apply(F[:, swap])[:, swap], op1.apply(F), atol=1e-10)


def test_shifted_solve_residual(small, rng):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.05, 2)
    sysm = spc.ShiftedSystem(op, 0.3 + 0.1j)
    r = rng.standard_normal(op.size) + 0j
    x = sysm.solve(r, tol=1e-11)
    assert np.linalg.norm(sysm.apply(x) - r) <= 1e-11 * np.linalg.norm(r)
    xa = sysm.solve(r, tol=1e-11, adjoint=True)
    ref = np.linalg.solve((0.3 + 0.1j) * np.eye(op.size) - op.dense(), r)
    assert np.allclose(x, ref, atol=1e-8)
    refa = np.linalg.solve(((0.3 + 0.1j) * np.eye(op.size) - op.dense()).conj().T, r)
    assert np.allclose(xa, refa, atol=1e-8)


def test_solver_error_raised(small):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.05, 2)
    sysm = spc.ShiftedSystem(op, 0.0)
    with pytest.raises(spc.SolverError) as exc:
        sysm.solve(np.ones(op.size), tol=1e-30, maxiter=1, restart=2)
    assert exc.value.best_residual is not None


def test_k0_spectrum(small):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.0, 2)
    ev = spc.dense_spectrum(op)
    assert abs(ev[0]) < 1e-10
    assert ev[1].real < -1e-2
    pair = spc.leading_eigenpair(op, shift=1e-3)
    s = np.broadcast_to(ph.mw.sqrt_mu, ph.shape)
    corr = abs(np.sum(op.w * pair.vector.ravel() * s.ravel())) / (
        spc._wnorm(op, pair.vector.ravel()) * spc._wnorm(op, s.ravel())
    )
    assert corr > 1 - 1e-10


def test_arnoldi_matches_dense(small):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.05, 2)
    d = spc.leading_eigenpair(op, left=True)
    a = spc.leading_eigenpair(op, left=True, dense_threshold=0)
    assert d.method == "dense" and a.method == "arnoldi"
    assert a.value == pytest.approx(d.value, rel=1e-8)
    assert a.residual < 1e-8
    assert spc.projector_distance(op, a) == pytest.approx(spc.projector_distance(op, d), rel=1e-6)


def test_projector_is_P0_at_k0(small):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.0, 2)
    pair = spc.leading_eigenpair(op, left=True)
    assert spc.projector_distance(op, pair) < 1e-8
    assert spc.projector_column_distance(op, pair) < 1e-8


def test_G1_dual_route(small, g1):
    ph, C = small
    # independent route: dense direct solve of the absorbing stationary problem
    op = spc.ModeOperator(ph, C, 0.0, 2, bc="absorbing")
    rhs = np.tile(-1j * ph.v1 * ph.mw.sqrt_mu, ph.slab.nx)
    G = np.linalg.solve(-op.dense(), rhs)
    lam = np.real(0.5j * np.sum(op.w * np.tile(ph.v1 * ph.mw.sqrt_mu, ph.slab.nx) * G))
    assert g1.lambda_star == pytest.approx(lam, rel=1e-9)
    assert g1.discrepancy < 1e-6
    assert g1.lambda_star > 0
    # G1 is i times a real function, odd in v1
    assert g1.G1_real_fraction < 1e-8
    mirror = ph.vgrid.mirror_index((0,))
    assert np.allclose(g1.G1[:, mirror], -g1.G1, atol=1e-9)


def test_branch_is_quadratic_at_small_k(small, g1):
    ph, C = small
    br = spc.compute_branch(ph, C, 2, [0.0125, 0.025, 0.05, 0.1])
    lam = np.real(br.eigenvalues)
    assert np.all(lam < 0)
    assert -lam[0] / 0.0125**2 == pytest.approx(g1.lambda_star, rel=0.01)
    assert br.fit_lambda_star("even") == pytest.approx(g1.lambda_star, rel=0.01)
    assert len(br.leave_one_out_even) == 4


def test_fit_dispersion_recovers_synthetic():
    ks = np.array([0.0125, 0.025, 0.05, 0.1])
    for basis, p in (("cubic", 3), ("even", 4)):
        lf, cf, d = spc.fit_dispersion(ks, -2.5 * ks**2 + 7.0 * ks**p, basis)
        assert lf == pytest.approx(2.5, rel=1e-10)
        assert cf == pytest.approx(7.0, rel=1e-8)
        assert d["basis"] == basis
    with pytest.raises(ValueError, match="narrow"):
        spc.fit_dispersion([0.1, 0.12], [-1, -1])
    with pytest.raises(ValueError):
        spc.fit_dispersion(ks, ks, "quintic")


def test_G2_fixed_point_matches_eigenvalue(small, g1):
    ph, C = small
    for k in (0.05, 0.1):
        r = spc.solve_G2_fixed_point(ph, C, 2, k, g1)
        ref = spc.leading_eigenpair(spc.ModeOperator(ph, C, k, 2)).value
        # the fixed point is the exact eigenpair, not a truncation
        assert abs(r.eigenvalue - ref) < 1e-10 * abs(ref)
        assert r.residual < 1e-9
        assert r.iterations < 200


def test_G2_blowup_reported(small, g1):
    ph, C = small
    with pytest.raises(spc.SolverError):
        spc.solve_G2_fixed_point(ph, C, 2, 5.0, g1, maxiter=60)


def test_resolvent_estimate_close_to_exact(small):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.0, 2)
    z = -2.0 + 5.0j
    est, _ = spc.resolvent_norm_estimate(op, z, probes=2, power_steps=6)
    d = np.sqrt(op.w)
    R = np.linalg.inv(z * np.eye(op.size) - op.dense())
    exact = np.linalg.norm(d[:, None] * R / d[None, :], 2)
    assert est <= exact * (1 + 1e-8)
    assert est >= 0.9 * exact


def test_semigroup_split_small(small):
    ph, C = small
    op = spc.ModeOperator(ph, C, 0.05, 2)
    sp_ = spc.measure_semigroup_split(op, window=(1.0, 8.0), times=np.linspace(0, 8, 17))
    assert sp_.c0_measured > abs(sp_.eigenvalue.real)
    with pytest.raises(ValueError):
        spc.probe_large_k_decay(op)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.0, 1.0), st.integers(0, 2**31))
def test_reflection_maps_k_to_minus_k(small, k, seed):
    ph, C = small
    F = np.random.default_rng(seed).standard_normal(ph.shape)
    m = ph.vgrid.mirror_index((0,))
    a = spc.ModeOperator(ph, C, k, 2).apply(F)[:, m]
    b = spc.ModeOperator(ph, C, -k, 2).apply(F[:, m])
    assert np.allclose(a, b, atol=1e-10)
