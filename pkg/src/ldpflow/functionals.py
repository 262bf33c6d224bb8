"""Free energy, relative Fisher information and the weighted H^-1(rho) norm.

The H^-1(rho) norm of a zero-sum measure ``s`` is computed two ways:

* dual / pressure form: ``s^T L_rho^+ s`` from a grounded sparse solve of
  ``L_rho f = s`` (``hm1_norm``);
* flux form: ``min vol * sum_e m_e^2 / theta_e`` subject to
  ``div m = -s``, solved as a saddle-point (KKT) system that never forms
  ``L_rho`` (``hm1_norm_flux_form``).

The two must agree; the test-suite holds them to relative 1e-8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import InfeasibleSupport, Infinite, LinearSolveFailure
from .grid import (
    EdgeField,
    Grid,
    GridDensity,
    GridSignedMeasure,
    Potential,
    edge_weights,
    laplacian_from_weights,
)

DIRECT_SOLVE_MAX_CELLS = 10_000
CG_RTOL = 1e-11
FEASIBILITY_TOL = 1e-10
FISHER_BLOWUP = 1e12


@dataclass(frozen=True, eq=False)
class Hm1Solution:
    norm_sq: float
    potential_f: np.ndarray
    flux_m: EdgeField


def log_mean(a, b):
    """Logarithmic mean (a - b)/(log a - log b), with L(a, a) = a and L(0, b) = 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros(np.broadcast(a, b).shape)
    pos = (a > 0) & (b > 0)
    aa, bb = np.broadcast_to(a, out.shape)[pos], np.broadcast_to(b, out.shape)[pos]
    x = np.log(bb) - np.log(aa)
    small = np.abs(x) < 1e-4
    res = np.empty_like(aa)
    # L(a, b) = a * (e^x - 1)/x
    res[~small] = aa[~small] * np.expm1(x[~small]) / x[~small]
    xs = x[small]
    res[small] = aa[small] * (1.0 + xs / 2.0 + xs * xs / 6.0 + xs**3 / 24.0)
    out[pos] = res
    return out


def _components(grid: Grid, active: np.ndarray):
    """Connected components of the graph of edges where ``active`` holds.

    Returns (n_components, labels, ground) with ``ground`` the lowest cell
    index of each component.
    """
    tail, head = grid.edge_tail[active], grid.edge_head[active]
    adj = sp.coo_matrix((np.ones(tail.size), (tail, head)), shape=(grid.size, grid.size))
    n_comp, labels = connected_components(adj, directed=False)
    ground = np.full(n_comp, -1)
    order = np.arange(grid.size)[::-1]
    ground[labels[order]] = order
    return n_comp, labels, ground


def _check_component_sums(labels: np.ndarray, n_comp: int, s: np.ndarray) -> None:
    s2 = s.reshape(labels.size, -1)
    scale = np.maximum(1.0, np.abs(s2).sum(axis=0))
    for col in range(s2.shape[1]):
        sums = np.bincount(labels, weights=s2[:, col], minlength=n_comp)
        bad = np.abs(sums) > FEASIBILITY_TOL * scale[col]
        if np.any(bad):
            raise InfeasibleSupport(
                f"signed measure has net mass {sums[bad][0]:.3e} on a component "
                "isolated by zero density"
            )


class WeightedLaplacianSolver:
    """Pseudo-inverse solves with ``L_theta`` for one fixed edge weight vector.

    Constants (per connected component of the positive-weight edge graph) are
    projected out by grounding one cell per component.
    """

    def __init__(self, grid: Grid, theta: np.ndarray):
        self.grid = grid
        self.theta = np.asarray(theta, dtype=float)
        self.n_components, self.labels, self.ground = _components(grid, self.theta > 0)
        keep = np.ones(grid.size, dtype=bool)
        keep[self.ground] = False
        self.free = np.flatnonzero(keep)
        L = laplacian_from_weights(grid, self.theta)
        self.L = L
        Lr = L[self.free][:, self.free].tocsc()
        self._direct = grid.size <= DIRECT_SOLVE_MAX_CELLS
        if self.free.size == 0:
            self._lu = None
        elif self._direct:
            self._lu = spla.splu(Lr)
        else:
            self._Lr = Lr
            self._precond = sp.diags(1.0 / Lr.diagonal())

    def check_feasible(self, s: np.ndarray) -> None:
        _check_component_sums(self.labels, self.n_components, s)

    def solve(self, s: np.ndarray) -> np.ndarray:
        """Return ``f`` with ``L f = s``; ``s`` may be (size,) or (size, k)."""
        s = np.asarray(s, dtype=float)
        self.check_feasible(s)
        f = np.zeros_like(s)
        if self._lu is None:
            return f
        rhs = s[self.free]
        if self._direct:
            f[self.free] = self._lu.solve(rhs)
        else:
            cols = rhs.reshape(rhs.shape[0], -1)
            out = np.empty_like(cols)
            for k in range(cols.shape[1]):
                x, info = spla.cg(self._Lr, cols[:, k], rtol=CG_RTOL, M=self._precond,
                                  maxiter=20 * self.free.size)
                if info != 0:
                    raise LinearSolveFailure(f"CG failed with info={info}")
                out[:, k] = x
            f[self.free] = out.reshape(rhs.shape)
        return f

    def norm_sq(self, s: np.ndarray) -> float:
        f = self.solve(s)
        return float(s @ f)


def hm1_solver(rho: GridDensity) -> WeightedLaplacianSolver:
    return WeightedLaplacianSolver(rho.grid, edge_weights(rho))


def free_energy(rho: GridDensity, pot: Potential) -> float:
    """F(rho) = sum_cells vol * (f log f + Psi f), with 0 log 0 = 0."""
    pot.grid.check_same(rho.grid)
    m = rho.masses
    pos = m > 0
    vol = rho.grid.vol
    return float(np.sum(m[pos] * np.log(m[pos] / vol)) + np.dot(pot.psi, m))


def relative_entropy_to_gibbs(rho: GridDensity, pot: Potential) -> float:
    """H(rho | nu / Z) = F(rho) + log Z, with Z the Gibbs mass."""
    return free_energy(rho, pot) + math.log(pot.gibbs_mass)


def fisher_information_quadrature(rho: GridDensity, pot: Potential):
    """Edge quadrature of int_{g>0} |grad g|^2 / g dnu, g = d rho / d nu.

    The integrand is rewritten as ``|grad g|^2 f / g^2`` and evaluated with
    log-mean edge values of ``f`` and ``g``.  Edges between two empty cells
    contribute nothing; an edge joining an empty and an occupied cell makes
    the difference quotient of ``log g`` unbounded and yields ``Infinite``.
    """
    grid = rho.grid
    grid.check_same(pot.grid)
    f = rho.density
    g = f / pot.gibbs
    ft, fh = f[grid.edge_tail], f[grid.edge_head]
    empty_t, empty_h = ft <= 0, fh <= 0
    if np.any(empty_t ^ empty_h):
        return Infinite("density jumps to zero across an edge")
    live = ~(empty_t & empty_h)
    gt, gh = g[grid.edge_tail][live], g[grid.edge_head][live]
    hk = grid.edge_h[live]
    dlog = np.abs(np.log(gh) - np.log(gt)) / hk
    if np.any(dlog > FISHER_BLOWUP):
        return Infinite("difference quotient of log g blows up")
    g_e = log_mean(gt, gh)
    f_e = log_mean(ft[live], fh[live])
    return float(grid.vol * np.sum(((gh - gt) / hk) ** 2 * f_e / g_e**2))


def _signed_values(s, rho: GridDensity) -> np.ndarray:
    if isinstance(s, GridSignedMeasure):
        rho.grid.check_same(s.grid)
        return np.asarray(s.values)
    v = np.asarray(s, dtype=float).ravel()
    return GridSignedMeasure(v, rho.grid).values


def hm1_norm(s, rho: GridDensity, solver: WeightedLaplacianSolver | None = None) -> Hm1Solution:
    """Squared weighted H^-1(rho) norm via ``s^T L_rho^+ s``.

    Raises ``InfeasibleSupport`` when ``s`` puts net mass on a region that is
    disconnected from the rest by zero density (the norm is infinite).
    """
    v = _signed_values(s, rho)
    solver = solver or hm1_solver(rho)
    f = solver.solve(v)
    grid = rho.grid
    flux = solver.theta * (grid.gradient_matrix @ f)
    return Hm1Solution(float(v @ f), f, EdgeField(flux, grid))


def hm1_inner(s1, s2, rho: GridDensity, solver: WeightedLaplacianSolver | None = None) -> float:
    """Polarised inner product ``s1^T L_rho^+ s2``."""
    v1 = _signed_values(s1, rho)
    v2 = _signed_values(s2, rho)
    solver = solver or hm1_solver(rho)
    return float(v1 @ solver.solve(v2))


def hm1_norm_flux_form(s, rho: GridDensity) -> float:
    """min over momenta m with div m = -s of vol * sum_e m_e^2 / theta_e.

    Edges with zero weight carry no flux (perspective convention).  One
    constraint per connected component is redundant and dropped.
    """
    v = _signed_values(s, rho)
    grid = rho.grid
    theta = edge_weights(rho)
    n_comp, labels, ground = _components(grid, theta > 0)
    _check_component_sums(labels, n_comp, v)
    active = np.flatnonzero(theta > 0)
    if active.size == 0:
        return 0.0
    keep = np.ones(grid.size, dtype=bool)
    keep[ground] = False
    rows = np.flatnonzero(keep)
    B = grid.divergence_matrix[:, active][rows]
    w = 2.0 * grid.vol / theta[active]
    ne = active.size
    kkt = sp.bmat([[sp.diags(w), B.T], [B, None]], format="csc")
    rhs = np.concatenate([np.zeros(ne), -v[rows]])
    sol = spla.splu(kkt).solve(rhs)
    m = sol[:ne]
    return float(grid.vol * np.sum(m * m / theta[active]))


@dataclass(frozen=True)
class HwiReport:
    lhs: float
    rhs: float
    slack: float
    violated: bool


def hwi_check(rho: GridDensity, pot: Potential, w2_to_nu: float, tol: float = 5e-3) -> HwiReport:
    """Evaluate both sides of H(rho|nu) <= W sqrt(G) - (lam/2) W^2.

    ``nu`` is the normalised Gibbs measure, so the left side is the free
    energy shifted by ``log Z``.  ``w2_to_nu`` is supplied by the caller.
    """
    lhs = relative_entropy_to_gibbs(rho, pot)
    G = fisher_information_quadrature(rho, pot)
    if isinstance(G, Infinite):
        return HwiReport(lhs, math.inf, math.inf, False)
    w = float(w2_to_nu)
    rhs = w * math.sqrt(G) - 0.5 * pot.lam * w * w
    slack = rhs - lhs
    return HwiReport(lhs, rhs, slack, slack < -tol)
