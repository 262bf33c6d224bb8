"""Fokker-Planck generator, implicit-Euler semigroup and the OU reference.

The generator acts on masses.  Across an edge (i, j) with d = Psi_j - Psi_i
the Scharfetter-Gummel mass flux from i to j is

    J_ij = (B(d) M_i - B(-d) M_j) / h^2,    B(z) = z / (e^z - 1).

Since B(-d) = e^d B(d), the flux vanishes identically on M ~ exp(-Psi), so
the discrete Gibbs density is an exact equilibrium, and all off-diagonal
entries of the generator are positive.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InfeasibleSupport, Infinite, LinearSolveFailure
from .functionals import WeightedLaplacianSolver, free_energy, hm1_norm
from .grid import Grid, GridDensity, Potential

DT_MAX = 1e-3
_SERIES_CUTOFF = 1e-5
_NEGATIVE_ROUNDOFF = 1e-13


def bernoulli(z):
    """B(z) = z / (e^z - 1) with B(0) = 1, stable for small and large |z|."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < _SERIES_CUTOFF
    zs = z[small]
    out[small] = 1.0 - zs / 2.0 + zs * zs / 12.0
    zb = z[~small]
    with np.errstate(over="ignore"):
        out[~small] = zb / np.expm1(zb)
    return out


def assemble_generator(grid: Grid, pot: Potential) -> sp.csr_matrix:
    """Sparse (size, size) generator A with dM/dt = A M."""
    grid.check_same(pot.grid)
    i, j = grid.edge_tail, grid.edge_head
    d = pot.psi[j] - pot.psi[i]
    inv_h2 = 1.0 / grid.edge_h**2
    fwd = bernoulli(d) * inv_h2  # rate i -> j
    bwd = bernoulli(-d) * inv_h2  # rate j -> i
    n = grid.size
    rows = np.concatenate([j, i, i, j])
    cols = np.concatenate([i, j, i, j])
    vals = np.concatenate([fwd, bwd, -fwd, -bwd])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass(eq=False)
class FPOperator:
    """Discrete Fokker-Planck generator with a cached implicit-Euler solver.

    ``rate`` multiplies the generator (the tau-scaled flow uses rate = tau).
    """

    grid: Grid
    potential: Potential
    A: sp.csr_matrix
    dt_max: float = DT_MAX
    rate: float = 1.0
    _factors: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def build(cls, pot: Potential, dt_max: float = DT_MAX) -> FPOperator:
        return cls(pot.grid, pot, assemble_generator(pot.grid, pot), dt_max)

    def scaled(self, rate: float) -> FPOperator:
        """Operator of the time-changed flow d/dt M = rate * A M."""
        return FPOperator(self.grid, self.potential, self.A * rate, self.dt_max, self.rate * rate)

    def apply(self, masses: np.ndarray) -> np.ndarray:
        return self.A @ masses

    def step_solver(self, dt: float):
        """Factorisation of I - dt A, cached by step size."""
        key = float(dt)
        with self._lock:
            lu = self._factors.get(key)
            if lu is None:
                M = (sp.identity(self.grid.size, format="csc") - dt * self.A).tocsc()
                try:
                    lu = spla.splu(
                        M,
                        permc_spec="MMD_AT_PLUS_A",
                        diag_pivot_thresh=0.0,
                        options={"SymmetricMode": True},
                    )
                except RuntimeError as exc:
                    raise LinearSolveFailure(str(exc)) from exc
                if len(self._factors) > 32:
                    self._factors.clear()
                self._factors[key] = lu
        return lu

    def step_count(self, t: float) -> int:
        return max(1, math.ceil(t / self.dt_max - 1e-9))


def _clean(masses: np.ndarray) -> np.ndarray:
    """Remove roundoff negatives and renormalise each column."""
    lo = masses.min(axis=0)
    if np.any(lo < -_NEGATIVE_ROUNDOFF * np.abs(masses).max(axis=0)):
        raise LinearSolveFailure(f"implicit step lost positivity (min {lo.min():.3e})")
    m = np.clip(masses, 0.0, None)
    return m / m.sum(axis=0)


def evolve_masses(masses: np.ndarray, op: FPOperator, t: float, n_steps: int | None = None,
                  record_every: int | None = None):
    """Implicit Euler on raw masses, shape (size,) or (size, k).

    With ``record_every`` the states after every ``record_every`` steps are
    returned as a list (including the initial state).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    m = np.array(masses, dtype=float)
    states = [m.copy()] if record_every else None
    if t == 0:
        return states if record_every else m
    n = n_steps if n_steps is not None else op.step_count(t)
    dt = t / n
    lu = op.step_solver(dt)
    for k in range(1, n + 1):
        m = lu.solve(m)
        if not np.all(np.isfinite(m)):
            raise LinearSolveFailure("non-finite values in implicit step")
        m = _clean(m.reshape(m.shape[0], -1)).reshape(m.shape)
        if record_every and k % record_every == 0:
            states.append(m.copy())
    return states if record_every else m


def evolve(rho: GridDensity, op: FPOperator, t: float, n_steps: int | None = None) -> GridDensity:
    """P_t rho by ceil(t / dt_max) implicit-Euler steps (or ``n_steps``)."""
    op.grid.check_same(rho.grid)
    if t == 0:
        return rho
    m = evolve_masses(rho.masses, op, t, n_steps)
    return GridDensity(m, rho.grid)


def evolve_many(rhos, op: FPOperator, t: float, n_steps: int | None = None) -> list[GridDensity]:
    """Evolve several initial densities with one batched solve per step."""
    rhos = list(rhos)
    if not rhos:
        return []
    for r in rhos:
        op.grid.check_same(r.grid)
    if t == 0:
        return rhos
    M = evolve_masses(np.stack([r.masses for r in rhos], axis=1), op, t, n_steps)
    return [GridDensity(M[:, k], op.grid) for k in range(M.shape[1])]


def evolve_path(rho: GridDensity, op: FPOperator, t: float, n_samples: int,
                substeps: int) -> list[GridDensity]:
    """States at ``n_samples + 1`` equispaced times of [0, t], ``substeps`` steps apart."""
    op.grid.check_same(rho.grid)
    if t == 0:
        return [rho] * (n_samples + 1)
    states = evolve_masses(rho.masses, op, t, n_samples * substeps, record_every=substeps)
    return [rho] + [GridDensity(m, rho.grid) for m in states[1:]]


def ou_reference(m0: float, var0: float, t: float, lam: float = 1.0) -> tuple[float, float]:
    """Mean and variance of the OU flow for Psi = lam x^2 / 2."""
    if var0 <= 0:
        raise ValueError("var0 must be positive")
    decay = math.exp(-lam * t)
    return m0 * decay, 1.0 / lam + (var0 - 1.0 / lam) * decay * decay


def fisher_information_metric(rho: GridDensity, op: FPOperator,
                              solver: WeightedLaplacianSolver | None = None):
    """||A rho||^2 in H^-1(rho); ``Infinite`` if the norm is unbounded."""
    op.grid.check_same(rho.grid)
    s = op.A @ rho.masses
    try:
        return hm1_norm(s, rho, solver).norm_sq / op.rate**2
    except InfeasibleSupport as exc:
        return Infinite(str(exc))


def dissipation_defects(rho: GridDensity, op: FPOperator, t: float, n_steps: int) -> np.ndarray:
    """Per-step |(F_{k+1} - F_k)/dt + G(rho_{k+1/2})| along an implicit-Euler path.

    G is the metric Fisher information at the midpoint density.  Exact
    dissipation would make every entry zero.
    """
    pot = op.potential
    dt = t / n_steps
    states = evolve_path(rho, op, t, n_steps, 1)
    F = np.array([free_energy(s, pot) for s in states])
    out = np.empty(n_steps)
    for k in range(n_steps):
        mid = states[k].masses + states[k + 1].masses
        G = fisher_information_metric(GridDensity(mid / mid.sum(), rho.grid), op)
        if isinstance(G, Infinite):
            raise InfeasibleSupport(f"Fisher information unbounded at step {k}")
        out[k] = abs((F[k + 1] - F[k]) / dt + G)
    return out


def uniform_entropy_gap(densities, op: FPOperator, eps: float) -> float:
    """max over the given densities of F(rho) - F(P_eps rho)."""
    pot = op.potential
    smoothed = evolve_many(list(densities), op, eps)
    return max(free_energy(r, pot) - free_energy(s, pot) for r, s in zip(densities, smoothed))
