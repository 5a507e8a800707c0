"""Fourier-mode operator, resolvent and eigen solvers, and the diffusion construction.

The mode operator for horizontal frequency k (rotated onto the v1 axis) is

    B f = -i k v1 f - v3 df/dx3 - nu f + K_n f

with diffuse reflection (or zero inflow) at the walls.  Write
``z - B = A_z - K_n`` with ``A_z = z + i k v1 + nu + T``.  Then A_z is a
transport sweep: sparse LU of the upwind stencil, plus a rank-two Woodbury
correction for the wall coupling.  Resolvent solves run GMRES on the
second-kind system ``x - A_z^{-1} K_n x = A_z^{-1} r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import slab as sl

log = logging.getLogger(__name__)

DENSE_THRESHOLD = 6000


class SolverError(RuntimeError):
    """Krylov or Arnoldi failure; ``best_residual`` carries the last residual."""

    def __init__(self, msg, best_residual=None, iterations=None):
        super().__init__(msg)
        self.best_residual = best_residual
        self.iterations = iterations


_parts_cache = {}


def _transport_parts(ph, bc):
    key = (id(ph), bc)
    if key not in _parts_cache:
        _parts_cache[key] = sl.transport_parts(ph, bc)
    return _parts_cache[key]


class ModeOperator:
    """Discrete B_n(k) on states of shape (Nx, Nv).

    Parameters
    ----------
    ph : slab.Phase
    coll : collision.CollisionOperator
    k : float or pair of floats
        Horizontal frequency.  A scalar k acts through -i k v1.  A pair
        (k1, k2) acts through -i (k1 v1 + k2 v2), and ``k`` is then |k|.
    n : int or None
        Fourier truncation order of K_n.  ``None`` (or ``use_full_K``) uses K itself.
    bc : {"diffuse", "absorbing"}
    """

    def __init__(self, ph, coll, k=0.0, n=None, use_full_K=False, bc="diffuse"):
        self.ph = ph
        self.coll = coll
        kv = np.atleast_1d(np.asarray(k, float))
        self.kvec = np.array([kv[0], kv[1] if kv.size > 1 else 0.0])
        self.k = float(np.hypot(*self.kvec)) if kv.size > 1 else float(kv[0])
        self.use_full_K = bool(use_full_K) or n is None
        self.n = None if self.use_full_K else int(n)
        self.bc = bc
        self.basis = None if self.use_full_K else sl.fourier_basis(ph.slab, self.n)
        self.S, self.U, self.Phi = _transport_parts(ph, bc)
        nx, nv = ph.shape
        v2 = ph.vgrid.nodes[:, 1]
        self.diag = np.tile(1j * (self.kvec[0] * ph.v1 + self.kvec[1] * v2) + coll.nu, nx)
        self.Kt = np.ascontiguousarray(coll.Kmat.T)
        self.w = ph.cell_weights.ravel()

    @property
    def size(self):
        return self.ph.size

    def with_k(self, k):
        return ModeOperator(self.ph, self.coll, k, self.n, self.use_full_K, self.bc)

    # -- pieces --------------------------------------------------------
    def project(self, F):
        if self.basis is None:
            return F
        B = self.basis
        return B @ ((B.T @ F) * self.ph.slab.h)

    def _coeffs(self, F):
        if self.basis is None:
            return F
        return (self.basis.T @ F) * self.ph.slab.h

    def _expand(self, C):
        return C if self.basis is None else self.basis @ C

    @staticmethod
    def _right_real(C, M):
        # C @ M for complex C and real M without promoting M to complex
        if np.iscomplexobj(C):
            m = C.shape[0]
            R = np.concatenate([C.real, C.imag]) @ M
            return R[:m] + 1j * R[m:]
        return C @ M

    def apply_Kn(self, F):
        # K acts on the 2n+1 Fourier coefficients, then the result is expanded
        return self._expand(self._right_real(self._coeffs(F), self.Kt))

    def apply_Kn_adj(self, F):
        return self._expand(self._right_real(self._coeffs(F), self.coll.Kmat))

    def transport(self, x):
        return self.S @ x + self.U @ (self.Phi.T @ x)

    def apply(self, F):
        """B F for a state F of shape (Nx, Nv)."""
        x = np.asarray(F).reshape(-1)
        nx, nv = self.ph.shape
        out = -(self.diag * x + self.transport(x)) + self.apply_Kn(x.reshape(nx, nv)).ravel()
        return out.reshape(nx, nv)

    def matvec(self, x):
        nx, nv = self.ph.shape
        return -(self.diag * x + self.transport(x)) + self.apply_Kn(x.reshape(nx, nv)).ravel()

    def rmatvec(self, x):
        """Conjugate-transpose action (plain Euclidean adjoint)."""
        nx, nv = self.ph.shape
        t = self.S.T @ x + self.Phi @ (self.U.T @ x)
        return -(np.conj(self.diag) * x + t) + self.apply_Kn_adj(x.reshape(nx, nv)).ravel()

    def dense(self):
        nx, nv = self.ph.shape
        M = -(self.S.toarray() + self.U @ self.Phi.T).astype(complex)
        M[np.diag_indices_from(M)] -= self.diag
        P = np.eye(nx) if self.basis is None else self.basis @ self.basis.T * self.ph.slab.h
        M = M + np.kron(P, self.coll.Kmat)
        return M

    def linear_operator(self):
        return spla.LinearOperator((self.size, self.size), matvec=self.matvec, rmatvec=self.rmatvec, dtype=complex)


def apply_mode_operator(op, state):
    return op.apply(state)


# --------------------------------------------------------------------------
# resolvent


class ShiftedSystem:
    """Solver for (z - B + u w^T) x = r, optionally with the adjoint.

    ``extra`` is a list of (u, w) flat-vector pairs: extra low-rank terms added
    to the operator, used to regularise the singular stationary problems.
    """

    def __init__(self, op, z, extra=()):
        self.op = op
        self.z = complex(z)
        A0 = sp.diags(self.z + op.diag) + op.S.astype(complex)
        self.lu = spla.splu(A0.tocsc())
        us = [op.U] + [np.asarray(u).reshape(-1, 1) for u, _ in extra]
        ws = [op.Phi] + [np.asarray(w).reshape(-1, 1) for _, w in extra]
        self.Ulr = np.hstack(us).astype(complex)
        self.Wlr = np.hstack(ws).astype(complex)
        r = self.Ulr.shape[1]
        if r:
            self.Y = self.lu.solve(self.Ulr)
            self.cap = sla.lu_factor(np.eye(r) + self.Wlr.T @ self.Y)
            self.Yh = self.lu.solve(np.conj(self.Wlr), trans="H")
            self.caph = sla.lu_factor(np.eye(r) + self.Ulr.conj().T @ self.Yh)
        self.iterations = 0
        self._coarse = None

    def _coarse_space(self):
        # smooth-in-x3, low-Hermite-degree vectors: the slowly converging directions
        if self._coarse is None:
            op = self.op
            Z = coarse_basis(op.ph)
            AZ = np.stack([self.apply(Z[:, i]) for i in range(Z.shape[1])], axis=1)
            E = Z.conj().T @ AZ
            self._coarse = (Z, sla.lu_factor(E), sla.lu_factor(E.conj().T))
        return self._coarse

    def sweep(self, r):
        """A_z^{-1} r (transport, collision frequency, symbol and wall terms)."""
        y = self.lu.solve(np.asarray(r, dtype=complex))
        if self.Ulr.shape[1]:
            y = y - self.Y @ sla.lu_solve(self.cap, self.Wlr.T @ y)
        return y

    def sweep_adj(self, r):
        y = self.lu.solve(np.asarray(r, dtype=complex), trans="H")
        if self.Ulr.shape[1]:
            y = y - self.Yh @ sla.lu_solve(self.caph, self.Ulr.conj().T @ y)
        return y

    def apply(self, x, adjoint=False):
        """(z - B + extra) x, or its adjoint."""
        op = self.op
        if adjoint:
            extra = np.conj(self.Wlr[:, 2:]) @ (self.Ulr[:, 2:].conj().T @ x) if self.Wlr.shape[1] > 2 else 0
            return np.conj(self.z) * x - op.rmatvec(x) + extra
        extra = self.Ulr[:, 2:] @ (self.Wlr[:, 2:].T @ x) if self.Ulr.shape[1] > 2 else 0
        return self.z * x - op.matvec(x) + extra

    def precondition(self, r, adjoint=False):
        """Two-level preconditioner: transport sweep plus a coarse correction."""
        Z, E, Eh = self._coarse_space()
        y = self.sweep_adj(r) if adjoint else self.sweep(r)
        c = sla.lu_solve(Eh if adjoint else E, Z.conj().T @ (r - self.apply(y, adjoint)))
        return y + Z @ c

    def solve(self, r, tol=1e-10, maxiter=20, restart=100, adjoint=False, x0=None, raise_on_fail=True):
        """Solve (z - B + extra) x = r (or the adjoint) to relative residual ``tol``.

        Right-preconditioned GMRES, so the monitored residual is the true one.
        """
        op = self.op
        r = np.asarray(r, dtype=complex).reshape(-1)
        rn = np.linalg.norm(r)
        if rn == 0:
            self.last_residual = 0.0
            return np.zeros_like(r)
        count = [0]

        def mv(y):
            count[0] += 1
            return self.apply(self.precondition(y, adjoint), adjoint)

        A = spla.LinearOperator((op.size, op.size), matvec=mv, dtype=complex)
        x = np.zeros_like(r) if x0 is None else np.asarray(x0, complex).reshape(-1).copy()
        res = np.linalg.norm(self.apply(x, adjoint) - r) / rn if x0 is not None else 1.0
        for _ in range(3):
            if res <= tol:
                break
            d = r - self.apply(x, adjoint) if x.any() else r
            dn = np.linalg.norm(d)
            y, info = spla.gmres(A, d, rtol=0.5 * tol * rn / dn, atol=0.0, restart=restart, maxiter=maxiter)
            x = x + self.precondition(y, adjoint)
            res = np.linalg.norm(self.apply(x, adjoint) - r) / rn
        self.iterations += count[0]
        self.last_residual = res
        if res > tol and raise_on_fail:
            raise SolverError(f"resolvent solve did not converge (residual {res:.2e})", res, count[0])
        return x


def coarse_basis(ph, degree=2, x_modes=4):
    """Orthonormal coarse vectors cos(j pi (x+1)/2) h_a(v) sqrt(mu), |a| <= degree, j < x_modes."""
    from .velocity import hermite_functions

    g = ph.vgrid
    H = hermite_functions(g.nodes, degree + 1)
    cols = []
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            for c in range(degree + 1 - a - b):
                cols.append(H[:, 0, a] * H[:, 1, b] * H[:, 2, c] * ph.mw.sqrt_mu)
    Zv = np.array(cols).T
    Zx = np.array([np.cos(np.pi * j * (ph.slab.x + 1) / 2) for j in range(min(x_modes, ph.slab.nx))]).T
    Z, _ = np.linalg.qr(np.kron(Zx, Zv))
    return Z.astype(complex)


def solve_resolvent(op, z, rhs, tol=1e-10, maxiter=20):
    """Solve (z - B) x = rhs; returns (x, iterations)."""
    sysm = ShiftedSystem(op, z)
    x = sysm.solve(rhs, tol=tol, maxiter=maxiter)
    return x.reshape(op.ph.shape), sysm.iterations


# --------------------------------------------------------------------------
# eigenpairs


@dataclass
class Eigenpair:
    value: complex
    vector: np.ndarray = field(repr=False)
    residual: float
    method: str
    left: np.ndarray | None = field(default=None, repr=False)


def _wnorm(op, x):
    return float(np.sqrt(np.sum(op.w * np.abs(x) ** 2)))


def eigen_residual(op, lam, x):
    return _wnorm(op, op.matvec(x) - lam * x) / _wnorm(op, x)


def dense_spectrum(op):
    """All eigenvalues of the assembled operator, sorted by decreasing real part."""
    M = op.dense()
    if op.k == 0.0:
        M = M.real
    ev = np.linalg.eigvals(M)
    return ev[np.argsort(-ev.real)]


def leading_eigenpair(op, shift=1e-3, tol=1e-10, dense_threshold=DENSE_THRESHOLD, left=False, nev=1, v0=None, ncv=6):
    """Eigenvalue of B nearest ``shift`` with its eigenvector.

    For small problems this uses a dense eigendecomposition.  Otherwise it uses
    shift-invert Arnoldi, with inner resolvent solves done by preconditioned
    GMRES.  With ``left=True`` the left eigenvector (of B^H, eigenvalue
    conj(lambda)) is also returned.  The Arnoldi start vector defaults to
    sqrt(mu), which lies close to the diffusive mode at small k.
    """
    if op.size <= dense_threshold:
        M = op.dense()
        ev, V = np.linalg.eig(M)
        i = int(np.argmin(np.abs(ev - shift)))
        lam, x = ev[i], V[:, i]
        lv = None
        if left:
            evl, Vl = np.linalg.eig(M.conj().T)
            j = int(np.argmin(np.abs(evl - np.conj(lam))))
            lv = Vl[:, j]
        method = "dense"
    else:
        sysm = ShiftedSystem(op, shift)
        sm = np.tile(op.ph.mw.sqrt_mu, op.ph.slab.nx).astype(complex)
        if v0 is None:
            v0 = sm
        opinv = spla.LinearOperator(
            (op.size, op.size), matvec=lambda r: -sysm.solve(r, tol=1e-10, raise_on_fail=False), dtype=complex
        )
        A = op.linear_operator()
        try:
            ev, V = spla.eigs(A, k=nev, sigma=shift, OPinv=opinv, which="LM", tol=tol, v0=np.asarray(v0, complex).reshape(-1), ncv=ncv)
        except spla.ArpackNoConvergence as exc:
            raise SolverError("Arnoldi did not converge") from exc
        i = int(np.argmin(np.abs(ev - shift)))
        lam, x = ev[i], V[:, i]
        lv = None
        if left:
            opinv_h = spla.LinearOperator(
                (op.size, op.size),
                matvec=lambda r: -sysm.solve(r, tol=1e-10, adjoint=True, raise_on_fail=False),
                dtype=complex,
            )
            AH = spla.LinearOperator((op.size, op.size), matvec=op.rmatvec, dtype=complex)
            evl, Vl = spla.eigs(AH, k=nev, sigma=np.conj(shift), OPinv=opinv_h, which="LM", tol=tol, v0=op.w * sm, ncv=ncv)
            j = int(np.argmin(np.abs(evl - np.conj(lam))))
            lv = Vl[:, j]
        method = "arnoldi"
    # fix the phase so that the mass of the eigenvector is real and positive
    m = np.sum(op.w * x * np.tile(op.ph.mw.sqrt_mu, op.ph.slab.nx))
    if abs(m) > 0:
        x = x * (abs(m) / m)
    res = eigen_residual(op, lam, x)
    return Eigenpair(complex(lam), x.reshape(op.ph.shape), res, method, None if lv is None else lv.reshape(op.ph.shape))


def spectral_projector_parts(op, pair):
    """Right vector r and functional a with Pi f = r (a^H f), a = l / conj(l^H r)."""
    r = pair.vector.reshape(-1)
    l = pair.left.reshape(-1)
    a = l / np.conj(np.vdot(l, r))
    return r, a


def projector_distance(op, pair):
    """Operator norm of Pi - P0 in the weighted L^2_{x3, v} space.

    Both projectors have rank one, so the norm is computed exactly from a 2x2 problem.
    """
    r, a = spectral_projector_parts(op, pair)
    d = np.sqrt(op.w)
    s = np.tile(op.ph.mw.sqrt_mu, op.ph.slab.nx)
    b = 0.5 * op.w * s  # P0 f = s (b^T f)
    # weighted representation: D^{1/2} (r a^H - s b^H) D^{-1/2}
    X = np.stack([d * r, d * s], axis=1)
    Y = np.stack([np.conj(a) / d, b / d], axis=1)
    q1, r1 = np.linalg.qr(X)
    q2, r2 = np.linalg.qr(Y)
    core = r1 @ np.diag([1.0, -1.0]) @ r2.T
    return float(np.linalg.norm(core, 2))


def projector_column_distance(op, pair):
    """||(Pi - P0) sqrt(mu)|| / ||sqrt(mu)||, the projector difference on the equilibrium state."""
    r, a = spectral_projector_parts(op, pair)
    s = np.tile(op.ph.mw.sqrt_mu, op.ph.slab.nx).astype(complex)
    diff = r * np.vdot(a, s) - s
    return _wnorm(op, diff) / _wnorm(op, s)


@dataclass
class SemigroupSplit:
    k: float
    eigenvalue: complex
    times: np.ndarray
    remainder: np.ndarray
    norms: np.ndarray
    c0_measured: float
    fit_window: tuple
    projector_distance: float
    projector_column_distance: float
    integrator_steps: int = 0


def _exp_rate(times, values, window, floor=0.0):
    t = np.asarray(times)
    v = np.asarray(values)
    m = (t >= window[0]) & (t <= window[1]) & (v > floor)
    if m.sum() < 3:
        raise ValueError("too few samples above the noise floor to fit a rate")
    slope, _ = np.polyfit(t[m], np.log(v[m]), 1)
    return float(-slope)


def measure_semigroup_split(op, f0=None, times=None, pair=None, window=(2.0, 20.0), rtol=1e-6, floor=1e-4):
    """Remainder r(t) = ||e^{Bt} f0 - e^{lambda t} Pi f0|| and its exponential rate.

    The evolution uses the adaptive integrator at a tight tolerance.  Samples
    with r(t) below ``floor`` times ||f0|| are treated as integrator noise and
    left out of the rate fit.
    """
    from .evolution import evolve_linear_mode

    if pair is None or pair.left is None:
        pair = leading_eigenpair(op, left=True)
    ph = op.ph
    if f0 is None:
        f0 = np.broadcast_to(ph.mw.sqrt_mu, ph.shape).astype(complex)
    f0 = np.asarray(f0, complex)
    if times is None:
        times = np.linspace(0.0, window[1], 41)
    traj = evolve_linear_mode(op, f0, float(np.max(times)), t_out=times, rtol=rtol, atol=0.0)
    r, a = spectral_projector_parts(op, pair)
    Pf = (r * np.vdot(a, f0.ravel())).reshape(ph.shape)
    n0 = _wnorm(op, f0.ravel())
    rem = np.array([_wnorm(op, (F - np.exp(pair.value * t) * Pf).ravel()) for t, F in zip(traj.times, traj.states)])
    c0 = _exp_rate(traj.times, rem, window, floor * n0)
    return SemigroupSplit(
        float(op.k),
        complex(pair.value),
        np.asarray(traj.times),
        rem,
        np.asarray(traj.norms),
        c0,
        tuple(window),
        projector_distance(op, pair),
        projector_column_distance(op, pair),
        traj.steps,
    )


def probe_large_k_decay(op, f0=None, times=None, kappa_probe=0.5, rtol=1e-6, window=(2.0, 20.0)):
    """Exponential decay rate of ||e^{Bt} f0|| at a frequency beyond the diffusive regime."""
    from .evolution import evolve_linear_mode

    if op.k < kappa_probe:
        raise ValueError(f"k={op.k} below the probe threshold {kappa_probe}")
    ph = op.ph
    if f0 is None:
        f0 = np.broadcast_to(ph.mw.sqrt_mu, ph.shape).astype(complex)
    if times is None:
        times = np.linspace(0.0, window[1], 21)
    traj = evolve_linear_mode(op, f0, float(np.max(times)), t_out=times, rtol=rtol)
    rate = _exp_rate(traj.times, traj.norms, window, 1e-8 * traj.norms[0])
    if not rate > 0:
        raise SolverError(f"no decay at k={op.k}: fitted rate {rate:.3g}", None, traj.steps)
    return rate


# --------------------------------------------------------------------------
# diffusion construction


@dataclass
class DiffusionSolution:
    G1: np.ndarray = field(repr=False)
    lambda_star: float
    lambda_star_energy: float
    lambda_star_flux: float
    discrepancy: float
    trace_term: float
    dissipation_term: float
    numerical_dissipation: float
    lambda_star_trace_form: float
    lambda_star_printed_form: float
    G1_mass: float
    G1_real_fraction: float
    iterations: int


def _velocity_weights(op):
    return np.tile(op.ph.vgrid.weights * op.ph.mw.sqrt_mu, op.ph.slab.nx) * op.ph.slab.h


def gamma_plus_norm2(op, F):
    """|F|^2 on the outgoing boundary: sum over walls and outgoing v of W |v3| |trace|^2."""
    left, right = sl.outgoing_traces(F, op.ph)
    W = op.ph.vgrid.weights * np.abs(op.ph.v3)
    return float(np.sum(W[op.ph.neg] * np.abs(left[op.ph.neg]) ** 2) + np.sum(W[op.ph.pos] * np.abs(right[op.ph.pos]) ** 2))


def solve_G1(ph, coll, n=None, use_full_K=False, tol=1e-11):
    """Solve v3 dG/dx3 + L G = -i v1 sqrt(mu) with zero inflow and evaluate lambda*.

    lambda* is computed two ways:

    * flux form:   (i/2) sum v1 G sqrt(mu)
    * energy form: (1/2) Re<T_h G, G> + (1/2) <L G, G>

    Both are exact consequences of the discrete equation.  Their difference
    measures the solver error.  The energy form splits further into the wall
    term (1/4)|G|^2_{gamma+} and the numerical dissipation of the upwind scheme,
    and both pieces are reported.
    """
    op = ModeOperator(ph, coll, 0.0, n, use_full_K, bc="absorbing")
    sysm = ShiftedSystem(op, 0.0)
    nx, nv = ph.shape
    rhs = np.tile(-1j * ph.v1 * ph.mw.sqrt_mu, nx)
    G = sysm.solve(rhs, tol=tol)
    w = op.w
    lam_flux = 0.5j * np.sum(w * np.tile(ph.v1 * ph.mw.sqrt_mu, nx) * G)
    TG = op.transport(G)
    LG = -(op.matvec(G)) - op.transport(G)  # (nu - K_n) G
    tform = np.real(np.sum(w * TG * np.conj(G)))
    lform = np.real(np.sum(w * LG * np.conj(G)))
    lam_energy = 0.5 * tform + 0.5 * lform
    gp = gamma_plus_norm2(op, G.reshape(nx, nv))
    lam_flux_r = float(np.real(lam_flux))
    disc = abs(lam_energy - lam_flux_r) / abs(lam_flux_r)
    mass = abs(np.sum(_velocity_weights(op) * G))
    return DiffusionSolution(
        G1=G.reshape(nx, nv),
        lambda_star=lam_flux_r,
        lambda_star_energy=float(lam_energy),
        lambda_star_flux=lam_flux_r,
        discrepancy=float(disc),
        trace_term=0.25 * gp,
        dissipation_term=0.5 * lform,
        numerical_dissipation=0.5 * (tform - 0.5 * gp),
        lambda_star_trace_form=0.25 * gp + 0.5 * lform,
        lambda_star_printed_form=0.5 * gp + 0.5 * lform,
        G1_mass=float(mass),
        G1_real_fraction=float(np.linalg.norm(G.real) / np.linalg.norm(G)),
        iterations=sysm.iterations,
    )


@dataclass
class G2Result:
    k: float
    G2: np.ndarray = field(repr=False)
    gamma: complex
    eta: complex
    eigenvalue: complex
    eigenfunction: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    increments: list


def _mass_regulariser(op):
    # rank-one term s b^T with s = sqrt(mu) (constant in x3), b = (1/2) h W sqrt(mu)
    s = np.tile(op.ph.mw.sqrt_mu, op.ph.slab.nx)
    return s, 0.5 * op.w * s


def solve_stationary_diffuse(op0, h, tol=1e-11, system=None):
    """Solve v3 dG/dx3 + L_n G = h with diffuse walls and zero total mass.

    The operator is singular (constants in x3 times sqrt(mu)).  For data of zero
    mass the regularised operator T + L_n + P0 has the same solution with zero
    mass.
    """
    sysm = system or ShiftedSystem(op0, 0.0, extra=[_mass_regulariser(op0)])
    return sysm.solve(h, tol=tol), sysm


def solve_G2_fixed_point(ph, coll, n, k, dsol, tol=1e-10, maxiter=200, blowup=1e3, use_full_K=False):
    """Banach iteration for the second-order corrector G2 at frequency k.

    Given G~, sets gamma = (1/2) sum i k v1 G~ sqrt(mu), eta = lambda* + gamma, and
    solves

        v3 dG/dx3 + L_n G = g + eta k G1 + gamma sqrt(mu) - i k v1 G~ + eta k^2 G~

    with diffuse walls and zero mass.  Here g = lambda* sqrt(mu) - i v1 G1.
    The loop stops when the nu-weighted increment falls below ``tol``.
    """
    op0 = ModeOperator(ph, coll, 0.0, n, use_full_K, bc="diffuse")
    nx, nv = ph.shape
    sm = np.tile(ph.mw.sqrt_mu, nx)
    v1 = np.tile(ph.v1, nx)
    nu = np.tile(coll.nu, nx)
    w = op0.w
    G1 = dsol.G1.reshape(-1)
    lam = dsol.lambda_star
    g = lam * sm - 1j * v1 * G1
    sysm = ShiftedSystem(op0, 0.0, extra=[_mass_regulariser(op0)])
    Gt = np.zeros(nx * nv, complex)
    incs = []
    scale = None
    for it in range(1, maxiter + 1):
        gam = 0.5 * np.sum(w * 1j * k * v1 * Gt * sm)
        eta = lam + gam
        h = g + eta * k * G1 + gam * sm - 1j * k * v1 * Gt + eta * k * k * Gt
        G = sysm.solve(h, tol=min(1e-11, tol * 0.1))
        inc = float(np.sqrt(np.sum(w * nu * np.abs(G - Gt) ** 2)))
        nrm = float(np.sqrt(np.sum(w * nu * np.abs(G) ** 2)))
        scale = scale or max(nrm, 1.0)
        incs.append(inc)
        Gt = G
        if nrm > blowup * scale:
            raise SolverError(f"contraction failure, k={k} too large", inc, it)
        if inc <= tol * max(nrm, 1.0):
            break
    else:
        raise SolverError(f"G2 iteration did not converge at k={k}", incs[-1], maxiter)
    gam = 0.5 * np.sum(w * 1j * k * v1 * Gt * sm)
    eta = lam + gam
    op = ModeOperator(ph, coll, k, n, use_full_K, bc="diffuse")
    f = sm + k * G1 + k * k * Gt
    res = eigen_residual(op, -eta * k * k, f)
    return G2Result(float(k), Gt.reshape(nx, nv), complex(gam), complex(eta), complex(-eta * k * k), f.reshape(nx, nv), res, it, incs)


def truncated_series_residual(ph, coll, n, k, dsol, G2_zero, use_full_K=False):
    """Residual of the second-order series sqrt(mu) + k G1 + k^2 G2(0) with eigenvalue -lambda* k^2.

    G2(0) is the k -> 0 corrector.  The residual is k^3 (lambda* G1 - i v1 G2(0))
    plus O(k^4).
    """
    op = ModeOperator(ph, coll, k, n, use_full_K, bc="diffuse")
    sm = np.tile(ph.mw.sqrt_mu, ph.slab.nx)
    f = sm + k * dsol.G1.reshape(-1) + k * k * G2_zero.reshape(-1)
    r = op.matvec(f) + dsol.lambda_star * k * k * f
    return _wnorm(op, r) / _wnorm(op, f)


# --------------------------------------------------------------------------
# dispersion fit


@dataclass
class SpectralBranch:
    k: list
    eigenvalues: list
    residuals: list
    lambda_star_fit: float = float("nan")
    C_fit: float = float("nan")
    fit_residual: float = float("nan")
    leave_one_out: list = field(default_factory=list)
    lambda_star_fit_even: float = float("nan")
    C_fit_even: float = float("nan")
    leave_one_out_even: list = field(default_factory=list)

    def fit_lambda_star(self, basis="even"):
        return self.lambda_star_fit_even if basis == "even" else self.lambda_star_fit


def fit_dispersion(ks, lams, basis="cubic"):
    """Least-squares fit Re lambda(k) = -lambda* k^2 + C k^p.

    ``basis="cubic"`` uses p = 3.  ``basis="even"`` uses p = 4, which matches
    the parity of the branch: the reflection v1 -> -v1 maps B(k) to B(-k), so
    lambda is even in k.  Returns (lambda_star_fit, C_fit, diagnostics).
    """
    ks = np.asarray(ks, float)
    y = np.real(np.asarray(lams))
    if len(ks) < 2:
        raise ValueError("need at least two branch points")
    if ks.max() / ks.min() < 2.0:
        raise ValueError("ill-conditioned fit: k range too narrow")
    if basis not in ("cubic", "even"):
        raise ValueError(f"unknown fit basis {basis!r}")
    A = np.stack([-ks**2, ks ** (3 if basis == "cubic" else 4)], axis=1)
    # scale rows by k^-2 so that every point carries comparable weight
    Ws = 1 / ks**2
    coef, *_ = np.linalg.lstsq(A * Ws[:, None], y * Ws, rcond=None)
    resid = float(np.linalg.norm((A @ coef - y) * Ws))
    loo = []
    if len(ks) > 2:
        for i in range(len(ks)):
            m = np.arange(len(ks)) != i
            c, *_ = np.linalg.lstsq(A[m] * Ws[m, None], y[m] * Ws[m], rcond=None)
            loo.append(float(c[0]))
    return float(coef[0]), float(coef[1]), {"fit_residual": resid, "leave_one_out": loo, "basis": basis}


def compute_branch(ph, coll, n, ks, use_full_K=False, dense_threshold=DENSE_THRESHOLD):
    branch = SpectralBranch([], [], [])
    for k in ks:
        op = ModeOperator(ph, coll, k, n, use_full_K)
        pair = leading_eigenpair(op, shift=1e-3, dense_threshold=dense_threshold)
        branch.k.append(float(k))
        branch.eigenvalues.append(pair.value)
        branch.residuals.append(pair.residual)
    if len(ks) >= 2:
        lf, cf, diag = fit_dispersion(branch.k, branch.eigenvalues)
        branch.lambda_star_fit, branch.C_fit = lf, cf
        branch.fit_residual = diag["fit_residual"]
        branch.leave_one_out = diag["leave_one_out"]
        le, ce, de = fit_dispersion(branch.k, branch.eigenvalues, basis="even")
        branch.lambda_star_fit_even, branch.C_fit_even = le, ce
        branch.leave_one_out_even = de["leave_one_out"]
    return branch


# --------------------------------------------------------------------------
# resolvent probes


def resolvent_norm_estimate(op, z, probes=4, power_steps=3, seed=0, tol=1e-9):
    """Randomised lower estimate of ||(z - B)^{-1}|| in the weighted norm.

    Power iteration on R^* R with R = (z - B)^{-1}, started from random probes.
    Each step costs one forward and one adjoint solve.
    """
    rng = np.random.default_rng(seed)
    sysm = ShiftedSystem(op, z)
    d = np.sqrt(op.w)
    best = 0.0
    for _ in range(probes):
        y = rng.standard_normal(op.size) + 1j * rng.standard_normal(op.size)
        y /= np.linalg.norm(y)
        for _ in range(power_steps):
            x = d * sysm.solve(y / d, tol=tol)  # weighted R
            best = max(best, np.linalg.norm(x))
            y = _adjoint_weighted(sysm, x, d, tol)
            y /= np.linalg.norm(y)
    return float(best), sysm.iterations


def _adjoint_weighted(sysm, x, d, tol):
    # adjoint of D^{1/2} R D^{-1/2} in the Euclidean sense is D^{-1/2} R^H D^{1/2}
    return sysm.solve(x * d, tol=tol, adjoint=True) / d
