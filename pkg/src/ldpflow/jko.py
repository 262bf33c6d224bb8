"""Minimising-movement (JKO) steps for the free energy.

One dimension: the step minimises F(r) + W2^2(rho0, r)/(2t) over the
simplex with the exact histogram W2 and its analytic gradient.  Each
iteration solves the Newton-like system

    (I + t L_r diag(1/r)) delta = -t L_r g

which is the Newton step for the entropy Hessian plus the H^-1 metric as
the local model of W2^2/(2t); the step is safeguarded by a backtracking
line search on the exact objective.

Two dimensions: the entropically smoothed step is solved in its dual, one
potential per cell, by damped Newton, annealing the smoothing from 0.1 h^2 down to
1e-3 h^2.  The objective is always scored with the exact W2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp

from . import defaults
from .errors import NonConvergence
from .functionals import free_energy
from .grid import GridDensity, Potential, edge_weights, laplacian_from_weights
from .static_ot import _cost_matrix, w2sq, w2sq_gradient_1d


@dataclass
class JkoStepResult:
    minimizer: GridDensity
    objective: float
    w2_term: float
    entropy_term: float
    diagnostics: dict = field(default_factory=dict)


def jko_objective(rho_bar: GridDensity, rho0: GridDensity, pot: Potential, t: float) -> float:
    """J_t(rho_bar | rho0) = F(rho_bar) - F(rho0) + W2^2(rho0, rho_bar)/(2t)."""
    if t <= 0:
        raise ValueError("t must be positive")
    rho0.grid.check_same(rho_bar.grid)
    return (free_energy(rho_bar, pot) - free_energy(rho0, pot)
            + w2sq(rho0, rho_bar) / (2.0 * t))


def _objective_parts(m: np.ndarray, rho0: GridDensity, pot: Potential, t: float, F0: float):
    r = GridDensity(m, rho0.grid)
    W = w2sq(rho0, r)
    F = free_energy(r, pot)
    return F - F0 + W / (2.0 * t), W / (2.0 * t), F


def _jko_step_1d(rho0: GridDensity, pot: Potential, t: float, tol: float, max_iter: int,
                 start: np.ndarray | None):
    grid = rho0.grid
    vol = grid.vol
    F0 = free_energy(rho0, pot)
    m = np.array(rho0.masses if start is None else start, dtype=float)
    if m.min() <= 0:
        m = 0.999 * m + 0.001 / m.size
    m = m / m.sum()
    J, Wt, F = _objective_parts(m, rho0, pot, t, F0)
    history = [J]
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        r = GridDensity(m, grid)
        grad = np.log(m / vol) + 1.0 + pot.psi + w2sq_gradient_1d(rho0, r) / (2.0 * t)
        L = laplacian_from_weights(grid, edge_weights(r))
        lhs = (sp.identity(m.size, format="csc") + t * (L @ sp.diags(1.0 / m))).tocsc()
        delta = spla.spsolve(lhs, -t * (L @ grad))
        decrease = float(grad @ delta)
        if decrease > 0:  # not a descent direction; fall back to the metric gradient
            delta = -t * (L @ grad)
            decrease = float(grad @ delta)
        # largest step keeping masses positive
        neg = delta < 0
        alpha = 1.0
        if np.any(neg):
            alpha = min(1.0, 0.95 * float(np.min(-m[neg] / delta[neg])))
        accepted = False
        while alpha > 1e-12:
            trial = m + alpha * delta
            if trial.min() > 0:
                trial = trial / trial.sum()
                J_new, Wt_new, F_new = _objective_parts(trial, rho0, pot, t, F0)
                if J_new <= J + 1e-4 * alpha * decrease:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            converged = abs(decrease) <= tol * max(1.0, abs(J))
            break
        change = J - J_new
        m, J, Wt, F = trial, J_new, Wt_new, F_new
        history.append(J)
        if change <= tol * max(1.0, abs(J)) and abs(decrease) <= 10 * tol * max(1.0, abs(J)):
            converged = True
            break
    diagnostics = {"iterations": it, "converged": converged, "history": history[-5:],
                   "method": "newton-w2"}
    return m, J, Wt, F, diagnostics


def _dual_parts(phi, a, c, eps, log_r_off, vol, hessian=False):
    """Negated smoothed dual, its gradient and (optionally) Hessian.

    D(phi) = sum_i a_i softmin_eps(c_i. + phi) - sum_j vol exp(phi_j - psi_j - 1)
    """
    z = -(c + phi[None, :]) / eps
    lse = logsumexp(z, axis=1)
    p = np.exp(z - lse[:, None])
    r = vol * np.exp(phi + log_r_off)
    q = a @ p
    value = -(float(a @ (-eps * lse)) - float(r.sum()))
    grad = r - q
    if not hessian:
        return value, grad
    H = (np.diag(q) - (p.T * a) @ p) / eps + np.diag(r)
    return value, grad, H


def _jko_step_entropic(rho0: GridDensity, pot: Potential, t: float, tol: float, max_iter: int):
    """Entropically smoothed step solved in the dual by damped Newton.

    The dual is concave in one potential per cell; the smoothing eps * h^2 is
    annealed from JKO_ENTROPIC_EPS_START down to JKO_ENTROPIC_EPS_END with a
    warm start per stage.  Converged when the two marginals of the smoothed
    plan agree to ``tol``.
    """
    grid = rho0.grid
    vol = grid.vol
    h2 = grid.hmax**2
    a_full = rho0.masses
    rows = np.flatnonzero(a_full > 0)
    a = a_full[rows]
    c = _cost_matrix(grid)[rows] / (2.0 * t)
    log_r_off = -pot.psi - 1.0
    start = np.maximum(a_full, 1e-12 * a_full.max())
    phi = np.log(start / vol) - log_r_off
    schedule = np.geomspace(defaults.JKO_ENTROPIC_EPS_START * h2,
                            defaults.JKO_ENTROPIC_EPS_END * h2, 5) / (2.0 * t)
    total = 0
    residual = math.inf
    for eps in schedule:
        for _ in range(max_iter):
            value, grad, H = _dual_parts(phi, a, c, eps, log_r_off, vol, hessian=True)
            residual = float(np.abs(grad).max())
            if residual <= tol:
                break
            total += 1
            step = -np.linalg.solve(H, grad)
            slope = float(grad @ step)
            alpha = 1.0
            while alpha > 1e-10:
                trial = phi + alpha * step
                if _dual_parts(trial, a, c, eps, log_r_off, vol)[0] <= value + 1e-4 * alpha * slope:
                    break
                alpha *= 0.5
            phi = trial
    m = vol * np.exp(phi + log_r_off)
    m = m / m.sum()
    F0 = free_energy(rho0, pot)
    J, Wt, F = _objective_parts(m, rho0, pot, t, F0)
    return m, J, Wt, F, {"iterations": total, "converged": residual <= tol,
                         "marginal_residual": residual, "method": "entropic-dual-newton"}


def jko_step(rho0: GridDensity, pot: Potential, t: float, tol: float = defaults.JKO_TOL,
             max_iter: int = 500, start: np.ndarray | None = None,
             strict: bool = True) -> JkoStepResult:
    """S_t[rho0] = argmin_r F(r) + W2^2(rho0, r)/(2t)."""
    if t <= 0:
        raise ValueError("t must be positive")
    pot.grid.check_same(rho0.grid)
    if rho0.grid.dim == 1:
        m, J, Wt, F, diag = _jko_step_1d(rho0, pot, t, tol, max_iter, start)
    else:
        m, J, Wt, F, diag = _jko_step_entropic(rho0, pot, t, tol, max_iter)
    if strict and not diag["converged"]:
        raise NonConvergence("JKO step did not converge", diag)
    return JkoStepResult(GridDensity(m, rho0.grid), J, Wt, F, diag)


def jko_iterate(rho0: GridDensity, pot: Potential, t: float, n: int, **kw) -> GridDensity:
    """n-fold composition of jko_step with step t/n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rho = rho0
    for _ in range(n):
        rho = jko_step(rho, pot, t / n, **kw).minimizer
    return rho


def jko_oracle(rho0: GridDensity, pot: Potential, t: float) -> tuple[np.ndarray, float]:
    """Brute-force reference for tiny 1D grids.

    SLSQP over the simplex using only objective values (finite-difference
    gradients), so it shares nothing with the Newton iteration.
    """
    from scipy.optimize import minimize

    grid = rho0.grid
    if grid.dim != 1 or grid.size > 48:
        raise ValueError("oracle is limited to 1D grids with at most 48 cells")
    F0 = free_energy(rho0, pot)
    n = grid.size

    def fun(x):
        m = np.clip(x, 1e-300, None)
        m = m / m.sum()
        return _objective_parts(m, rho0, pot, t, F0)[0]

    x0 = np.maximum(rho0.masses, 1e-12)
    x0 = x0 / x0.sum()
    res = minimize(fun, x0, method="SLSQP",
                   constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1.0,
                                 "jac": lambda x: np.ones(n)}],
                   bounds=[(1e-14, 1.0)] * n,
                   options={"ftol": 1e-15, "maxiter": 2000})
    m = np.clip(res.x, 1e-300, None)
    m = m / m.sum()
    return m, fun(m)
