"""Velocity-space grids, Maxwellian tables and the discrete L^2_v pairing.

Two tensor-product rules are provided.  ``gauss_hermite_tensor`` places the
probabilists' Gauss-Hermite nodes on each axis, so that sums against the
stored weights integrate ``polynomial * mu`` exactly.  ``uniform_truncated``
uses cell-centred equispaced nodes in ``[-cutoff, cutoff]`` with
interpolatory weights, which integrate ``p * mu`` exactly whenever ``p`` has
per-axis degree below ``n_per_axis``.  Both rules share the same polynomial
space ``{p(v) sqrt(mu(v))}`` spanned by tensor Hermite functions, which is
what the collision module works with.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

RULES = ("gauss_hermite_tensor", "uniform_truncated")
C_MU = np.sqrt(2.0 * np.pi)


class GridError(ValueError):
    """Raised for invalid velocity-grid or Maxwellian parameters."""


def mu_of(v):
    """Global Maxwellian (2 pi)^{-3/2} exp(-|v|^2/2) evaluated row-wise."""
    v = np.asarray(v, dtype=float)
    return np.exp(-0.5 * np.sum(v * v, axis=-1)) / (2.0 * np.pi) ** 1.5


def hermite_functions(x, n):
    """Orthonormal probabilists' Hermite polynomials h_0..h_{n-1} at ``x``.

    Orthonormal with respect to the standard normal density, so that
    ``h_a(v) sqrt(mu(v))`` (tensorised) is an orthonormal family in L^2(R^3).
    Returns an array of shape ``x.shape + (n,)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (n,))
    out[..., 0] = 1.0
    if n > 1:
        out[..., 1] = x
    for a in range(2, n):
        out[..., a] = (x * out[..., a - 1] - np.sqrt(a - 1.0) * out[..., a - 2]) / np.sqrt(a)
    return out


def _interpolatory_weights(x):
    # weights (w.r.t. the standard normal) exact for polynomials of degree < len(x)
    n = len(x)
    gx, gw = np.polynomial.hermite_e.hermegauss(max(2 * n, 20))
    gw = gw / np.sqrt(2.0 * np.pi)
    V = hermite_functions(x, n)
    moments = hermite_functions(gx, n).T @ gw
    return np.linalg.solve(V.T, moments)


@dataclass(frozen=True)
class VelocityGrid:
    """Tensor velocity grid.

    Attributes
    ----------
    nodes : ndarray, shape (N, 3)
        Node ``(i, j, l)`` sits at flat index ``(i * n + j) * n + l``.
    weights : ndarray, shape (N,)
        Quadrature weights for ``int dv`` (not ``int mu dv``).
    axis : ndarray, shape (n,)
        One-dimensional node set shared by the three axes.
    axis_prob_weights : ndarray, shape (n,)
        One-dimensional weights for integrals against the standard normal.
    tol_q : float
        Certified quadrature tolerance from the moment table.
    """

    rule: str
    n_per_axis: int
    cutoff: float | None
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    axis: np.ndarray = field(repr=False)
    axis_prob_weights: np.ndarray = field(repr=False)
    tol_q: float = 0.0

    @property
    def count(self):
        return self.nodes.shape[0]

    @property
    def speed2(self):
        return np.sum(self.nodes**2, axis=1)

    def mirror_index(self, axes=(0, 1, 2)):
        """Index permutation realising v -> v with the listed components negated."""
        n = self.n_per_axis
        idx = np.arange(self.count).reshape(n, n, n)
        for a in axes:
            idx = np.flip(idx, axis=a)
        return idx.ravel()

    def to_json(self):
        return {"rule": self.rule, "n_per_axis": self.n_per_axis, "cutoff": self.cutoff}

    def hash(self):
        payload = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _moment_errors(nodes, weights):
    mu = mu_of(nodes)
    wm = weights * mu
    v1, v3 = nodes[:, 0], nodes[:, 2]
    s2 = np.sum(nodes**2, axis=1)
    table = {
        "mass": (wm.sum(), 1.0),
        "v1^2": ((wm * v1**2).sum(), 1.0),
        "v1^4": ((wm * v1**4).sum(), 3.0),
        "|v|^2": ((wm * s2).sum(), 3.0),
        "|v|^4": ((wm * s2**2).sum(), 15.0),
        "wall_flux": (C_MU * (wm * np.abs(v3) * (v3 > 0)).sum(), 1.0),
    }
    return {k: abs(a - b) / abs(b) for k, (a, b) in table.items()}


def build_velocity_grid(rule="gauss_hermite_tensor", n_per_axis=12, cutoff=None):
    """Build a tensor velocity grid.

    Parameters
    ----------
    rule : {"gauss_hermite_tensor", "uniform_truncated"}
    n_per_axis : int
        Even and at least 4, so that no node has a zero component.
    cutoff : float, optional
        Half-width of the box; required for ``uniform_truncated``.
    """
    if rule not in RULES:
        raise GridError(f"unknown rule {rule!r}")
    n = int(n_per_axis)
    if n != n_per_axis or n < 4:
        raise GridError("n_per_axis must be an integer >= 4")
    if n % 2:
        raise GridError("grazing node: odd n_per_axis puts a node at v3 = 0")
    if rule == "gauss_hermite_tensor":
        x, w = np.polynomial.hermite_e.hermegauss(n)
        wp = w / np.sqrt(2.0 * np.pi)
        cutoff = None
    else:
        if cutoff is None or not cutoff > 0:
            raise GridError("uniform_truncated needs a positive cutoff")
        cutoff = float(cutoff)
        h = 2.0 * cutoff / n
        x = -cutoff + (np.arange(n) + 0.5) * h
        wp = _interpolatory_weights(x)
        if np.any(wp <= 0):
            raise GridError("interpolatory weights lost positivity; reduce cutoff")
    V = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
    wprob = np.einsum("i,j,k->ijk", wp, wp, wp).ravel()
    weights = wprob / mu_of(V)
    errs = _moment_errors(V, weights)
    tol_q = max(max(errs.values()), 1e-13)
    return VelocityGrid(rule, n, cutoff, V, weights, x, wp, tol_q)


def grid_from_json(spec):
    return build_velocity_grid(spec["rule"], spec["n_per_axis"], spec.get("cutoff"))


@dataclass(frozen=True)
class MaxwellianWeights:
    """Tabulated Maxwellian data on a grid.

    ``c_mu`` is the continuum constant sqrt(2 pi).  ``c_mu_h`` is its discrete
    counterpart, chosen so the discrete diffuse-reflection operator carries
    exactly zero wall mass flux.
    """

    mu: np.ndarray = field(repr=False)
    sqrt_mu: np.ndarray = field(repr=False)
    c_mu: float
    c_mu_h: float
    theta: float
    w: np.ndarray = field(repr=False)


def maxwellian(grid, theta=0.125):
    """Tabulate mu, sqrt(mu) and the weight exp(theta |v|^2) on ``grid``."""
    if not 0.0 < theta < 0.25:
        raise GridError("theta outside (0, 1/4)")
    mu = mu_of(grid.nodes)
    v3 = grid.nodes[:, 2]
    flux = np.sum(grid.weights * mu * np.abs(v3) * (v3 > 0))
    return MaxwellianWeights(
        mu=mu,
        sqrt_mu=np.sqrt(mu),
        c_mu=float(C_MU),
        c_mu_h=float(1.0 / flux),
        theta=float(theta),
        w=np.exp(theta * grid.speed2),
    )


def inner_product(f, g, grid):
    """Discrete pairing sum_i w_i f_i conj(g_i) over the last axis."""
    f = np.asarray(f)
    g = np.asarray(g)
    if f.shape[-1] != grid.count or g.shape[-1] != grid.count:
        raise GridError("length mismatch with velocity grid")
    return np.sum(grid.weights * f * np.conj(g), axis=-1)


def norm(f, grid):
    return float(np.sqrt(np.real(inner_product(f, f, grid)).sum()))


def moment_table(grid):
    """Relative errors of the Gaussian moment table and wall-flux normalisation."""
    return _moment_errors(grid.nodes, grid.weights)
