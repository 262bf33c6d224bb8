"""Wasserstein-2 distance, optimal couplings, geodesics and entropic solvers.

In one dimension a ``GridDensity`` is read as a piecewise-constant density
(histogram).  Its quantile function is then piecewise linear and W2 between
two histograms is computed exactly by integrating the squared quantile
difference over the merged breakpoints.  The optimal coupling restricted to
cells is the north-west-corner (monotone) plan.

In two dimensions the exact solver treats each cell as an atom at its centre
and solves the transport linear program with a network simplex (POT).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import NonConvergence, SizeLimit
from .grid import Grid, GridDensity

EXACT_2D_MAX_CELLS = 4096
MARGINAL_TOL = 1e-8
ABSORB_EVERY = 50


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint law on (source cell, target cell); dense array or sparse matrix."""

    joint: object
    row_residual: float
    col_residual: float

    @classmethod
    def build(cls, joint, a: np.ndarray, b: np.ndarray) -> Coupling:
        rows = np.asarray(joint.sum(axis=1)).ravel()
        cols = np.asarray(joint.sum(axis=0)).ravel()
        return cls(joint, float(np.abs(rows - a).max()), float(np.abs(cols - b).max()))

    def toarray(self) -> np.ndarray:
        return self.joint.toarray() if sp.issparse(self.joint) else np.asarray(self.joint)


class TransportResult(NamedTuple):
    distance: float
    coupling: Coupling


@dataclass(frozen=True, eq=False)
class GeodesicCurve:
    times: np.ndarray
    densities: tuple[GridDensity, ...]

    @property
    def masses(self) -> np.ndarray:
        return np.stack([d.masses for d in self.densities])


def _cost_matrix(grid: Grid) -> np.ndarray:
    x = grid.cell_centers
    sq = np.sum(x * x, axis=1)
    C = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    return np.maximum(C, 0.0)


# ---------------------------------------------------------------------------
# one dimension: histogram quantiles


class _QuantilePieces(NamedTuple):
    """Merged u-partition on which both quantile functions are affine."""

    du: np.ndarray  # length of every u-piece
    cell0: np.ndarray  # source cell of the piece
    cell1: np.ndarray  # target cell of the piece
    q0: np.ndarray  # (pieces, 2) source quantile at piece ends
    q1: np.ndarray  # (pieces, 2) target quantile at piece ends


def _quantile_pieces(a: np.ndarray, b: np.ndarray, grid: Grid) -> _QuantilePieces:
    edges = grid.axis_edges[0]
    h = grid.h[0]
    ca = np.concatenate([[0.0], np.cumsum(a)])
    cb = np.concatenate([[0.0], np.cumsum(b)])
    # pin the total to exactly one so that the partitions end together
    ca[-1] = cb[-1] = 1.0
    u = np.union1d(ca, cb)
    u = u[(u >= 0.0) & (u <= 1.0)]
    lo, hi = u[:-1], u[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    mid = 0.5 * (lo + hi)
    i0 = np.clip(np.searchsorted(ca, mid, side="right") - 1, 0, a.size - 1)
    i1 = np.clip(np.searchsorted(cb, mid, side="right") - 1, 0, b.size - 1)

    def quantile(c, idx, uu):
        # masses from the pinned cumulative sums, so that pieces stay consistent
        m = c[idx + 1] - c[idx]
        frac = np.divide(uu - c[idx], m, out=np.zeros_like(uu), where=m > 0)
        return edges[idx] + np.clip(frac, 0.0, 1.0) * h

    q0 = np.stack([quantile(ca, i0, lo), quantile(ca, i0, hi)], axis=1)
    q1 = np.stack([quantile(cb, i1, lo), quantile(cb, i1, hi)], axis=1)
    return _QuantilePieces(hi - lo, i0, i1, q0, q1)


def _w2sq_1d(a: np.ndarray, b: np.ndarray, grid: Grid) -> tuple[float, _QuantilePieces]:
    p = _quantile_pieces(a, b, grid)
    d0 = p.q0[:, 0] - p.q1[:, 0]
    d1 = p.q0[:, 1] - p.q1[:, 1]
    w2sq = float(np.sum(p.du * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0))
    return w2sq, p


def w2sq_gradient_1d(rho0: GridDensity, rho1: GridDensity) -> np.ndarray:
    """Derivative of W2^2(rho0, rho1) with respect to the masses of ``rho1``.

    Returns the cell averages of the Kantorovich potential psi of the target,
    psi' (y) = 2 (y - S(y)) with S the monotone map from ``rho1`` back to
    ``rho0``.  Defined up to an additive constant, which is irrelevant for
    mass-preserving perturbations.  Every target cell must carry mass.
    """
    grid = rho0.grid
    a, b = rho0.masses, rho1.masses
    if b.min() <= 0:
        raise ValueError("target density must be positive for the potential")
    p = _quantile_pieces(a, b, grid)
    y = p.q1
    S = p.q0
    dpsi = 2.0 * (y - S)  # psi' at both piece ends; affine in y on each piece
    dy = y[:, 1] - y[:, 0]
    incr = 0.5 * dy * (dpsi[:, 0] + dpsi[:, 1])
    psi_start = np.concatenate([[0.0], np.cumsum(incr)[:-1]])
    # Simpson on the piecewise-quadratic psi
    ym = 0.5 * (y[:, 0] + y[:, 1])
    dpsi_m = 0.5 * (dpsi[:, 0] + dpsi[:, 1])
    psi_mid = psi_start + 0.5 * (ym - y[:, 0]) * (dpsi[:, 0] + dpsi_m)
    psi_end = psi_start + incr
    integral = dy / 6.0 * (psi_start + 4.0 * psi_mid + psi_end)
    avg = np.bincount(p.cell1, weights=integral, minlength=b.size) / grid.h[0]
    return avg


def _w2_exact_1d(rho0: GridDensity, rho1: GridDensity) -> TransportResult:
    grid = rho0.grid
    a, b = rho0.masses, rho1.masses
    w2sq, p = _w2sq_1d(a, b, grid)
    joint = sp.coo_matrix((p.du, (p.cell0, p.cell1)), shape=(a.size, b.size)).tocsr()
    return TransportResult(math.sqrt(max(w2sq, 0.0)), Coupling.build(joint, a, b))


def _import_pot():
    for backend in ("PYTORCH", "JAX", "TENSORFLOW", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    import ot

    return ot


def _w2_exact_2d(rho0: GridDensity, rho1: GridDensity) -> TransportResult:
    grid = rho0.grid
    if grid.size > EXACT_2D_MAX_CELLS:
        raise SizeLimit(
            f"{grid.size} cells exceeds the exact-solver limit {EXACT_2D_MAX_CELLS}; "
            "use w2_entropic"
        )
    ot = _import_pot()
    a, b = rho0.masses, rho1.masses
    sa, sb = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    C = _cost_matrix(grid)[np.ix_(sa, sb)]
    # POT wants exactly equal totals
    aa, bb = a[sa] / a[sa].sum(), b[sb] / b[sb].sum()
    plan = ot.emd(aa, bb, C, numItermax=50_000_000)
    cost = float(np.sum(plan * C))
    r, c = np.nonzero(plan)
    joint = sp.coo_matrix((plan[r, c], (sa[r], sb[c])), shape=(a.size, b.size)).tocsr()
    return TransportResult(math.sqrt(max(cost, 0.0)), Coupling.build(joint, a, b))


def w2_exact(rho0: GridDensity, rho1: GridDensity) -> TransportResult:
    """Exact W2 distance (not squared) and an optimal coupling."""
    rho0.grid.check_same(rho1.grid)
    if rho0.grid.dim == 1:
        return _w2_exact_1d(rho0, rho1)
    return _w2_exact_2d(rho0, rho1)


def w2sq(rho0: GridDensity, rho1: GridDensity) -> float:
    rho0.grid.check_same(rho1.grid)
    if rho0.grid.dim == 1:
        return _w2sq_1d(rho0.masses, rho1.masses, rho0.grid)[0]
    return w2_exact(rho0, rho1).distance ** 2


# ---------------------------------------------------------------------------
# entropic transport


@dataclass
class SinkhornResult:
    cost: float  # <C, gamma>
    entropic_value: float  # <C, gamma> + eps KL(gamma | a x b)
    joint: np.ndarray
    f: np.ndarray
    g: np.ndarray
    iterations: int
    row_residual: float
    col_residual: float


def sinkhorn_log(
    a: np.ndarray,
    b: np.ndarray,
    C: np.ndarray,
    eps: float,
    tol: float = MARGINAL_TOL,
    max_iter: int = 100_000,
    eps_scaling: bool = True,
) -> SinkhornResult:
    """Stabilised Sinkhorn for min <C, P> + eps KL(P | a x b).

    Kernel-scaling iterations on a kernel that has the current dual potentials
    absorbed into it; scalings are absorbed into the potentials every
    ``ABSORB_EVERY`` iterations (or when they grow large), and the kernel is
    rebuilt with a max-shifted exponent.  With ``eps_scaling`` the potentials
    are warm-started along a geometric eps schedule.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    sa, sb = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    aa, bb = a[sa], b[sb]
    Cs = C[np.ix_(sa, sb)]
    la, lb = np.log(aa), np.log(bb)
    f = np.zeros(aa.size)
    g = np.zeros(bb.size)
    if eps_scaling:
        scale = float(Cs.max()) if Cs.size else 1.0
        schedule = []
        e = max(scale, eps)
        while e > eps:
            schedule.append(e)
            e /= 4.0
        schedule.append(eps)
    else:
        schedule = [eps]
    total_iter = 0
    for stage, e in enumerate(schedule):
        final = stage == len(schedule) - 1
        stage_tol = tol if final else max(tol, 1e-3)
        f, g, it, row_res, col_res = _sinkhorn_stage(
            la, lb, Cs, e, f, g, stage_tol, max_iter - total_iter
        )
        total_iter += it
        if final and col_res > tol:
            raise NonConvergence(
                f"Sinkhorn did not reach marginal tolerance {tol} (residual {col_res:.2e})",
                {"iterations": total_iter, "row_residual": row_res, "col_residual": col_res},
            )
    logP = (f[:, None] + g[None, :] - Cs) / eps + la[:, None] + lb[None, :]
    P = np.exp(logP)
    joint = np.zeros((a.size, b.size))
    joint[np.ix_(sa, sb)] = P
    cost = float(np.sum(P * Cs))
    # KL(P | a x b) with P = a b exp((f + g - C)/eps)
    kl = float(np.sum(P * (f[:, None] + g[None, :] - Cs)) / eps - P.sum() + 1.0)
    rows = np.abs(P.sum(axis=1) - aa).max()
    cols = np.abs(P.sum(axis=0) - bb).max()
    return SinkhornResult(cost, cost + eps * kl, joint, f, g, total_iter, float(rows), float(cols))


def _sinkhorn_stage(la, lb, C, eps, f, g, tol, max_iter):
    """Absorbed-kernel Sinkhorn at fixed eps; returns updated potentials."""
    a, b = np.exp(la), np.exp(lb)

    def kernel(f, g):
        # entries are exp((f + g - C)/eps) times the reference a x b; <= O(1)
        return np.exp((f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :])

    K = kernel(f, g)
    u = np.ones(a.size)
    v = np.ones(b.size)
    it = 0
    row_res = col_res = np.inf
    while it < max_iter:
        Kv = K @ v
        u = a / np.maximum(Kv, 1e-300)
        Ktu = K.T @ u
        v = b / np.maximum(Ktu, 1e-300)
        it += 1
        absorb = it % ABSORB_EVERY == 0 or max(np.abs(np.log(u)).max(), np.abs(np.log(v)).max()) > 30
        if absorb or it == max_iter:
            f = f + eps * np.log(u)
            g = g + eps * np.log(v)
            # max-shift keeps the pair of potentials centred
            shift = 0.5 * (f.max() - g.max())
            f, g = f - shift, g + shift
            # exact row update in log domain before measuring residuals
            logK = (f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :]
            f = f - eps * (logsumexp(logK, axis=1) - la)
            K = kernel(f, g)
            u = np.ones(a.size)
            v = np.ones(b.size)
            row_res = float(np.abs(K.sum(axis=1) - a).max())
            col_res = float(np.abs(K.sum(axis=0) - b).max())
            if col_res <= tol:
                break
    return f, g, it, row_res, col_res


class EntropicResult(NamedTuple):
    distance: float
    coupling: Coupling
    info: SinkhornResult


def w2_entropic(
    rho0: GridDensity,
    rho1: GridDensity,
    eps: float,
    debias: bool = False,
    tol: float = MARGINAL_TOL,
    max_iter: int = 100_000,
) -> EntropicResult:
    """Entropic estimate of W2 between cell-centre atoms.

    Without ``debias`` the estimate is the transport cost of the entropic plan.
    With ``debias`` it is the Sinkhorn divergence
    ``OT_eps(a, b) - (OT_eps(a, a) + OT_eps(b, b)) / 2``.
    """
    rho0.grid.check_same(rho1.grid)
    a, b = rho0.masses, rho1.masses
    C = _cost_matrix(rho0.grid)
    res = sinkhorn_log(a, b, C, eps, tol, max_iter)
    if debias:
        raa = sinkhorn_log(a, a, C, eps, tol, max_iter)
        rbb = sinkhorn_log(b, b, C, eps, tol, max_iter)
        value = res.entropic_value - 0.5 * (raa.entropic_value + rbb.entropic_value)
    else:
        value = res.cost
    coupling = Coupling(res.joint, res.row_residual, res.col_residual)
    return EntropicResult(math.sqrt(max(value, 0.0)), coupling, res)


# ---------------------------------------------------------------------------
# geodesics


def _interpolate_1d(rho0: GridDensity, rho1: GridDensity, t: float) -> GridDensity:
    """McCann interpolant of two histograms, re-binned onto the grid exactly.

    On each u-piece the interpolated quantile is affine, so its inverse CDF
    evaluated at the cell edges gives the exact cell masses.
    """
    grid = rho0.grid
    p = _quantile_pieces(rho0.masses, rho1.masses, grid)
    qt = (1.0 - t) * p.q0 + t * p.q1
    u_lo = np.concatenate([[0.0], np.cumsum(p.du)[:-1]])
    u_hi = u_lo + p.du
    # CDF of the interpolant at every cell edge: piecewise-linear inverse
    x = np.concatenate([qt[:, 0], qt[-1:, 1]])
    u = np.concatenate([u_lo, u_hi[-1:]])
    # pieces with zero spatial extent (atoms) would duplicate x; np.interp
    # picks the last u for repeated abscissae, which is the right limit
    edges = grid.axis_edges[0]
    cdf = np.interp(edges, x, u, left=0.0, right=1.0)
    masses = np.clip(np.diff(cdf), 0.0, None)
    return GridDensity.from_values(grid, masses)


def _splat(grid: Grid, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Multilinear deposit of point masses onto cell centres."""
    out = np.zeros(grid.n)
    idx_lo, frac = [], []
    for k in range(grid.dim):
        s = (points[:, k] - grid.axis_centers[k][0]) / grid.h[k]
        s = np.clip(s, 0.0, grid.n[k] - 1)
        lo = np.minimum(np.floor(s).astype(int), grid.n[k] - 2)
        idx_lo.append(lo)
        frac.append(s - lo)
    for corner in range(2 ** grid.dim):
        w = weights.copy()
        idx = []
        for k in range(grid.dim):
            bit = (corner >> k) & 1
            w = w * (frac[k] if bit else 1.0 - frac[k])
            idx.append(idx_lo[k] + bit)
        np.add.at(out, tuple(idx), w)
    return out.ravel()


def _interpolate_coupling(grid: Grid, coupling: Coupling, t: float) -> GridDensity:
    J = coupling.joint.tocoo() if sp.issparse(coupling.joint) else sp.coo_matrix(coupling.joint)
    x = grid.cell_centers
    pts = (1.0 - t) * x[J.row] + t * x[J.col]
    return GridDensity.from_values(grid, _splat(grid, pts, J.data))


def displacement_interpolation(
    rho0: GridDensity, rho1: GridDensity, times: Sequence[float]
) -> GeodesicCurve:
    """Constant-speed W2 geodesic sampled at ``times``.

    1D: exact McCann interpolation of histograms.  2D: mass of the optimal
    coupling moved along straight lines and deposited bilinearly.  Endpoints
    are returned unchanged.
    """
    rho0.grid.check_same(rho1.grid)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times.min() < 0 or times.max() > 1:
        raise ValueError("times must be sorted within [0, 1]")
    grid = rho0.grid
    coupling = None if grid.dim == 1 else w2_exact(rho0, rho1).coupling
    out = []
    for t in times:
        if t == 0.0:
            out.append(rho0)
        elif t == 1.0:
            out.append(rho1)
        elif grid.dim == 1:
            out.append(_interpolate_1d(rho0, rho1, t))
        else:
            out.append(_interpolate_coupling(grid, coupling, t))
    return GeodesicCurve(times, tuple(out))
