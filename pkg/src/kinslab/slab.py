"""Discretisation of the slab (-1, 1) in x3.

Unknowns live at cell centres ``x_j = -1 + (j + 1/2) h``, so no node touches a
wall.  The transport term ``v3 d/dx3`` uses upwind differences.  The first-order
scheme uses ``(f_j - f_{j-1}) / h``.  The second-order scheme uses the
linear-upwind face value ``(3 f_j - f_{j-1}) / 2``, except on the face next to
the inflow wall, which stays first order; that closure keeps the discrete
transport form dissipative.  Wall traces are the outgoing face values.  Incoming
wall values come from the boundary operator, either diffuse reflection or zero
inflow.

A state is an array of shape ``(..., Nx, Nv)``; leading axes are batch axes.
For the solvers the operator is split as ``T = S + U Phi^T``.  ``S`` is sparse
and block diagonal in velocity.  ``U Phi^T`` has rank two and carries the
diffuse-reflection coupling at the two walls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .velocity import maxwellian

SCHEMES = ("upwind_fd_order1", "upwind_fd_order2")


class SlabError(ValueError):
    pass


def _face_matrices(nx, scheme):
    # face values for flow in +x3; face f sits at x = -1 + f h, f = 0..nx
    Fm = np.zeros((nx + 1, nx))
    Fb = np.zeros(nx + 1)
    Fb[0] = 1.0
    for f in range(1, nx + 1):
        j = f - 1
        if scheme == "upwind_fd_order1" or j == 0:
            Fm[f, j] = 1.0
        else:
            Fm[f, j] = 1.5
            Fm[f, j - 1] = -0.5
    D = Fm[1:] - Fm[:-1]
    b = Fb[1:] - Fb[:-1]
    return D, b, Fm[-1].copy()


@dataclass(frozen=True)
class SlabGrid:
    """Cell-centred grid on (-1, 1).

    ``D``, ``b`` and ``e`` describe the scheme for v3 > 0.  They are
    ``h dx f ~ D f + b f_in`` and the outgoing trace ``e . f`` at x3 = +1.
    For v3 < 0 the mirror image is used.
    """

    nx: int
    scheme: str
    x: np.ndarray = field(repr=False)
    h: float
    D: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    e: np.ndarray = field(repr=False)

    @property
    def weights(self):
        return np.full(self.nx, self.h)


def build_slab(nx=16, scheme="upwind_fd_order2"):
    if scheme not in SCHEMES:
        raise SlabError(f"unknown scheme {scheme!r}")
    if nx < 4 or nx % 2:
        raise SlabError("nx must be even and >= 4")
    h = 2.0 / nx
    x = -1.0 + (np.arange(nx) + 0.5) * h
    D, b, e = _face_matrices(nx, scheme)
    return SlabGrid(nx, scheme, x, h, D, b, e)


@dataclass
class Phase:
    """Velocity grid, Maxwellian tables and slab grid bundled together."""

    vgrid: object
    slab: SlabGrid
    mw: object = None

    def __post_init__(self):
        if self.mw is None:
            self.mw = maxwellian(self.vgrid)
        v3 = self.vgrid.nodes[:, 2]
        self.pos = v3 > 0
        self.neg = v3 < 0
        self.v1 = self.vgrid.nodes[:, 0]
        self.v3 = v3
        # weights of the wall flux functional sum_u W sqrt(mu) |u3| f(u)
        self.flux_w = self.vgrid.weights * self.mw.sqrt_mu * np.abs(v3)

    @property
    def shape(self):
        return (self.slab.nx, self.vgrid.count)

    @property
    def size(self):
        return self.slab.nx * self.vgrid.count

    @property
    def cell_weights(self):
        """Weights of the discrete L^2_{x3, v} pairing, shape (Nx, Nv)."""
        return self.slab.h * self.vgrid.weights[None, :] * np.ones((self.slab.nx, 1))


# --------------------------------------------------------------------------
# wall traces and boundary operator


def outgoing_traces(F, ph):
    """Outgoing face values: (left wall for v3 < 0, right wall for v3 > 0).

    Returns two arrays of shape ``(..., Nv)``; only the outgoing rows are meaningful.
    """
    e = ph.slab.e
    right = np.tensordot(F, e, axes=([-2], [0]))
    left = np.tensordot(F[..., ::-1, :], e, axes=([-2], [0]))
    return left, right


def diffuse_inflow(F, ph):
    """Incoming wall data from diffuse reflection of the outgoing traces."""
    left, right = outgoing_traces(F, ph)
    c = ph.mw.c_mu_h
    sm = ph.mw.sqrt_mu
    mL = np.sum(left[..., ph.neg] * ph.flux_w[ph.neg], axis=-1)
    mR = np.sum(right[..., ph.pos] * ph.flux_w[ph.pos], axis=-1)
    inL = c * np.asarray(mL)[..., None] * sm * ph.pos
    inR = c * np.asarray(mR)[..., None] * sm * ph.neg
    return inL, inR


def apply_Pgamma(traces, ph):
    """Diffuse reflection on full wall traces.

    ``traces`` has shape ``(..., 2, Nv)`` (left wall, right wall).  Incoming
    rows are overwritten by ``c sqrt(mu(v)) sum_{out} W sqrt(mu) |u3| trace``;
    outgoing rows are left alone.
    """
    out = np.array(traces, dtype=np.result_type(traces, float), copy=True)
    c = ph.mw.c_mu_h
    sm = ph.mw.sqrt_mu
    mL = np.sum(out[..., 0, :][..., ph.neg] * ph.flux_w[ph.neg], axis=-1)
    mR = np.sum(out[..., 1, :][..., ph.pos] * ph.flux_w[ph.pos], axis=-1)
    out[..., 0, ph.pos] = c * np.asarray(mL)[..., None] * sm[ph.pos]
    out[..., 1, ph.neg] = c * np.asarray(mR)[..., None] * sm[ph.neg]
    return out


def wall_traces(F, ph, bc="diffuse"):
    """Full wall traces (..., 2, Nv): outgoing values plus incoming data from ``bc``."""
    left, right = outgoing_traces(F, ph)
    if bc == "diffuse":
        inL, inR = diffuse_inflow(F, ph)
    else:
        inL = np.zeros_like(left)
        inR = np.zeros_like(right)
    tl = np.where(ph.neg, left, inL)
    tr = np.where(ph.pos, right, inR)
    return np.stack([tl, tr], axis=-2)


def apply_transport(F, ph, bc="diffuse", inflow=None):
    """v3 d/dx3 F with upwind differences.

    Parameters
    ----------
    bc : {"diffuse", "absorbing", "given"}
        Source of incoming wall data.  With "given", ``inflow = (inL, inR)``
        supplies it.
    """
    F = np.asarray(F)
    if F.shape[-2:] != ph.shape:
        raise SlabError("state shape does not match the phase grid")
    if bc == "diffuse":
        inL, inR = diffuse_inflow(F, ph)
    elif bc == "absorbing":
        inL = inR = np.zeros(F.shape[:-2] + (ph.vgrid.count,))
    elif bc == "given":
        inL, inR = inflow
    else:
        raise SlabError(f"unknown bc {bc!r}")
    D, b, h = ph.slab.D, ph.slab.b, ph.slab.h
    out = np.zeros(np.broadcast_shapes(F.shape, np.shape(inL)[:-1] + (1, 1)), dtype=np.result_type(F, inL))
    Fp = F[..., ph.pos]
    out[..., ph.pos] = (
        np.einsum("jl,...lv->...jv", D, Fp) + b[:, None] * np.asarray(inL)[..., None, ph.pos]
    ) * (ph.v3[ph.pos] / h)
    Fn = F[..., ::-1, :][..., ph.neg]
    tn = (np.einsum("jl,...lv->...jv", D, Fn) + b[:, None] * np.asarray(inR)[..., None, ph.neg]) * (
        np.abs(ph.v3[ph.neg]) / h
    )
    # d/dx3 = -d/dy with y = -x3, and v3 = -|v3|
    out[..., ph.neg] = tn[..., ::-1, :]
    return out


def transport_parts(ph, bc="diffuse"):
    """Sparse stencil S and rank-two boundary factors (U, Phi) with T = S + U Phi^T.

    Flat index of state entry (j, i) is ``j * Nv + i``.
    """
    nx, nv = ph.shape
    D, b, e, h = ph.slab.D, ph.slab.b, ph.slab.e, ph.slab.h
    J = np.eye(nx)[::-1]
    blocks = []
    rows, cols, vals = [], [], []
    Dn = J @ D @ J
    for i in range(nv):
        M = D if ph.pos[i] else Dn
        r, c = np.nonzero(M)
        rows.append(r * nv + i)
        cols.append(c * nv + i)
        vals.append(M[r, c] * abs(ph.v3[i]) / h)
    S = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nx * nv, nx * nv)
    )
    if bc != "diffuse":
        return S, np.zeros((nx * nv, 0)), np.zeros((nx * nv, 0))
    c = ph.mw.c_mu_h
    sm = ph.mw.sqrt_mu
    U = np.zeros((nx, nv, 2))
    Phi = np.zeros((nx, nv, 2))
    # left wall: inflow on v3 > 0 rows enters through b; functional reads v3 < 0 traces
    U[:, ph.pos, 0] = b[:, None] * (c * sm[ph.pos] * ph.v3[ph.pos] / h)
    Phi[:, ph.neg, 0] = (J @ e)[:, None] * ph.flux_w[ph.neg]
    bn = J @ b
    U[:, ph.neg, 1] = bn[:, None] * (c * sm[ph.neg] * np.abs(ph.v3[ph.neg]) / h)
    Phi[:, ph.pos, 1] = e[:, None] * ph.flux_w[ph.pos]
    return S, U.reshape(nx * nv, 2), Phi.reshape(nx * nv, 2)


# --------------------------------------------------------------------------
# projections


def fourier_basis(slab, n):
    """Columns 1/sqrt2, cos(m pi x), sin(m pi x) for m = 1..n.

    The columns are orthonormal under the midpoint sum ``h sum_j``.
    """
    if n < 0:
        raise SlabError("n must be >= 0")
    if 2 * n >= slab.nx:
        raise SlabError(f"order n={n} aliases on {slab.nx} cells (need n < Nx/2)")
    cols = [np.full(slab.nx, 1 / np.sqrt(2))]
    for m in range(1, n + 1):
        cols.append(np.cos(m * np.pi * slab.x))
        cols.append(np.sin(m * np.pi * slab.x))
    return np.stack(cols, axis=1)


def apply_Pn(F, slab, n):
    """Fourier truncation of the x3 dependence, column by column in v."""
    B = fourier_basis(slab, n)
    coef = np.einsum("jm,...jv->...mv", B, F) * slab.h
    return np.einsum("jm,...mv->...jv", B, coef)


def apply_Kn(F, op, slab, n):
    """K_n F = K P_n F."""
    return op.apply_K(apply_Pn(F, slab, n))


def apply_Ln(F, op, slab, n):
    """L_n F = nu F - K P_n F."""
    return op.nu * F - apply_Kn(F, op, slab, n)


def invariant_basis(ph):
    """Orthonormal (discrete pairing) basis of {1, v1, v2, v3, |v|^2} sqrt(mu)."""
    V = ph.vgrid.nodes
    sm = ph.mw.sqrt_mu
    raw = np.stack([sm, V[:, 0] * sm, V[:, 1] * sm, V[:, 2] * sm, ph.vgrid.speed2 * sm], axis=1)
    W = ph.vgrid.weights
    G = raw.T @ (W[:, None] * raw)
    R = np.linalg.cholesky(G)
    return np.linalg.solve(R, raw.T).T


def apply_P(F, ph):
    """Pointwise-in-x3 projection onto the collision invariants."""
    E = invariant_basis(ph)
    coef = np.einsum("...v,vk->...k", F * ph.vgrid.weights, E)
    return np.einsum("...k,vk->...v", coef, E)


def mass(F, ph):
    """int int F sqrt(mu) dv dx3 (discrete)."""
    return np.sum(F * (ph.vgrid.weights * ph.mw.sqrt_mu), axis=(-1, -2)) * ph.slab.h


def apply_P0(F, ph):
    """Average-mass projection (1/2) (int int F sqrt mu) sqrt mu."""
    m = mass(F, ph)
    return 0.5 * np.asarray(m)[..., None, None] * np.broadcast_to(ph.mw.sqrt_mu, ph.shape)


def finite_rank_check(op, slab, n, nv_probe=None, tol=1e-10):
    """Numerical x3-rank of K_n.

    K_n = P_n (x) K, so its x3 factor is the P_n matrix.  The rank is read off
    the singular values of K_n applied to x3-unit vectors with a random velocity profile.
    """
    rng = np.random.default_rng(0)
    g = rng.standard_normal(op.grid.count)
    cols = []
    for j in range(slab.nx):
        F = np.zeros((slab.nx, op.grid.count))
        F[j] = g
        cols.append(apply_Kn(F, op, slab, n).ravel())
    s = np.linalg.svd(np.stack(cols, axis=1), compute_uv=False)
    rank = int(np.sum(s > tol * s[0]))
    return {"rank": rank, "expected": 2 * n + 1, "singular_values": s.tolist()}


def pairing(F, G, ph):
    """Discrete L^2_{x3, v} pairing sum h W F conj(G)."""
    return np.sum(F * np.conj(G) * ph.vgrid.weights, axis=(-1, -2)) * ph.slab.h


def to_bytes(F):
    """Flat little-endian complex64 layout, row-major (x3, v)."""
    return np.ascontiguousarray(F, dtype="<c8").tobytes()


def from_bytes(buf, ph):
    return np.frombuffer(buf, dtype="<c8").reshape(ph.shape).astype(complex)
