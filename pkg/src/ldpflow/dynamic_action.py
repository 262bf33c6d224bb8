"""Discrete curves of densities, kinetic and controlled actions.

Every slice norm uses the midpoint density rho_{k+1/2} = (rho_k + rho_{k+1})/2.
With a_k = (rho_{k+1} - rho_k)/dt_k and b_k = A rho_{k+1/2} the controlled
action is

    sum_k dt_k / (4 tau) * ||a_k - tau b_k||^2_{-1, rho_{k+1/2}}

and it splits exactly into (1/4tau)||a||^2 - (1/2)<a, b> + (tau/4)||b||^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize

from . import defaults
from .errors import InfeasibleSupport, Infinite, NonConvergence
from .functionals import WeightedLaplacianSolver
from .grid import Grid, GridDensity, edge_weights, stack_masses
from .semigroup import FPOperator
from .static_ot import displacement_interpolation


@dataclass(frozen=True, eq=False)
class DiscreteCurve:
    """Densities sampled at increasing times spanning [0, 1].

    ``masses`` has shape (K + 1, size).  ``momenta`` optionally holds one
    edge field per step, shape (K, n_edges).
    """

    times: np.ndarray
    masses: np.ndarray
    grid: Grid
    momenta: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        m = np.array(self.masses, dtype=float)
        if m.ndim != 2 or m.shape[0] != t.size or m.shape[1] != self.grid.size:
            raise ValueError("masses must have shape (len(times), grid.size)")
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing with at least two samples")
        if abs(t[0]) > 1e-12 or abs(t[-1] - 1.0) > 1e-12:
            raise ValueError("times must span [0, 1]")
        for k, row in enumerate(m):
            GridDensity(row, self.grid)  # validates slice k
        t.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "masses", m)

    @classmethod
    def from_densities(cls, times, densities, momenta=None) -> DiscreteCurve:
        return cls(np.asarray(times, dtype=float), stack_masses(densities),
                   densities[0].grid, momenta)

    @classmethod
    def uniform(cls, densities) -> DiscreteCurve:
        densities = list(densities)
        return cls.from_densities(np.linspace(0.0, 1.0, len(densities)), densities)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def density(self, k: int) -> GridDensity:
        return GridDensity(self.masses[k], self.grid)

    @property
    def densities(self) -> list[GridDensity]:
        return [self.density(k) for k in range(self.times.size)]

    def continuity_residual(self, source: np.ndarray | None = None) -> float:
        """Max residual of (rho_{k+1} - rho_k)/dt + div m_k = source_k (mass units)."""
        if self.momenta is None:
            raise ValueError("curve carries no momenta")
        a = np.diff(self.masses, axis=0) / self.dt[:, None]
        div = (self.grid.divergence_matrix @ self.momenta.T).T
        src = 0.0 if source is None else source
        return float(np.abs(a + div - src).max())

    def write_csv(self, path) -> None:
        """Long format: time, cell, mass."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "cell", "mass"])
            for t, row in zip(self.times, self.masses):
                for i, m in enumerate(row):
                    w.writerow([repr(float(t)), i, repr(float(m))])


def concatenate_curves(pieces, breaks) -> DiscreteCurve:
    """Join curves placed on [breaks[i], breaks[i+1]], sharing junction slices.

    The last density of each piece must equal the first of the next; the
    shared slice is kept once.
    """
    grid = pieces[0].grid
    times, masses = [], []
    for i, (c, t0, t1) in enumerate(zip(pieces, breaks[:-1], breaks[1:])):
        grid.check_same(c.grid)
        ts = t0 + (t1 - t0) * c.times
        ms = c.masses
        if i > 0:
            if not np.array_equal(masses[-1][-1], ms[0]):
                raise ValueError(f"pieces {i - 1} and {i} do not meet")
            ts, ms = ts[1:], ms[1:]
        times.append(ts)
        masses.append(ms)
    t = np.concatenate(times)
    t[0], t[-1] = 0.0, 1.0
    return DiscreteCurve(t, np.concatenate(masses), grid)


class SliceNorms(NamedTuple):
    """Per-step squared norms (a, a), (a, b), (b, b), (a - tau b, a - tau b)."""

    aa: np.ndarray
    ab: np.ndarray
    bb: np.ndarray
    rr: np.ndarray | None


class ActionDecomposition(NamedTuple):
    kinetic_over_4tau: float
    entropy_cross_term: float
    fisher_term: float

    @property
    def total(self) -> float:
        return self.kinetic_over_4tau + self.entropy_cross_term + self.fisher_term


def _midpoint_density(curve: DiscreteCurve, k: int) -> GridDensity:
    mid = 0.5 * (curve.masses[k] + curve.masses[k + 1])
    return GridDensity(mid / mid.sum(), curve.grid)


def slice_norms(curve: DiscreteCurve, op: FPOperator | None = None, tau: float | None = None):
    """All midpoint-weighted slice norms; ``Infinite`` lists unbounded slices."""
    K = curve.n_steps
    aa, ab, bb = np.zeros(K), np.zeros(K), np.zeros(K)
    rr = np.zeros(K) if tau is not None else None
    A = None if op is None else op.A / op.rate
    if A is not None:
        curve.grid.check_same(op.grid)
    bad = []
    for k in range(K):
        dt = curve.dt[k]
        a = (curve.masses[k + 1] - curve.masses[k]) / dt
        mid = _midpoint_density(curve, k)
        cols = [a]
        if A is not None:
            b = A @ mid.masses
            cols.append(b)
            if tau is not None:
                cols.append(a - tau * b)
        rhs = np.stack(cols, axis=1)
        solver = WeightedLaplacianSolver(curve.grid, edge_weights(mid))
        try:
            phi = solver.solve(rhs)
        except InfeasibleSupport:
            bad.append(k)
            continue
        aa[k] = a @ phi[:, 0]
        if A is not None:
            ab[k] = a @ phi[:, 1]
            bb[k] = b @ phi[:, 1]
            if tau is not None:
                rr[k] = cols[2] @ phi[:, 2]
    if bad:
        return Infinite("curve crosses a zero-density bottleneck", tuple(bad))
    return SliceNorms(aa, ab, bb, rr)


def kinetic_action(curve: DiscreteCurve):
    """sum_k dt_k ||(rho_{k+1} - rho_k)/dt_k||^2_{-1, rho_{k+1/2}}."""
    norms = slice_norms(curve)
    if isinstance(norms, Infinite):
        return norms
    return float(np.sum(curve.dt * norms.aa))


def controlled_action(curve: DiscreteCurve, op: FPOperator, tau: float):
    """Action of ``curve`` against the tau-scaled Fokker-Planck drift.

    ``op`` is the unscaled generator; its ``rate`` is divided out.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    norms = slice_norms(curve, op, tau)
    if isinstance(norms, Infinite):
        return norms
    return float(np.sum(curve.dt * norms.rr) / (4.0 * tau))


def action_decomposition(curve: DiscreteCurve, op: FPOperator, tau: float):
    if tau <= 0:
        raise ValueError("tau must be positive")
    norms = slice_norms(curve, op, tau)
    if isinstance(norms, Infinite):
        return norms
    dt = curve.dt
    return ActionDecomposition(
        float(np.sum(dt * norms.aa) / (4.0 * tau)),
        float(-0.5 * np.sum(dt * norms.ab)),
        float(0.25 * tau * np.sum(dt * norms.bb)),
    )


def metric_speeds(curve: DiscreteCurve) -> np.ndarray:
    """||(rho_{k+1} - rho_k)/dt||_{-1, rho_{k+1/2}} per step."""
    norms = slice_norms(curve)
    if isinstance(norms, Infinite):
        raise InfeasibleSupport("curve has unbounded speed", norms.slices)
    return np.sqrt(norms.aa)


# ---------------------------------------------------------------------------
# minimisation over curves


@dataclass
class MinimizerInfo:
    method: str
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = True
    constraint_residual: float = 0.0


class MinimizationResult(NamedTuple):
    value: float
    curve: DiscreteCurve
    info: MinimizerInfo


def _perspective_prox(mt, tt, alpha):
    """prox of alpha * m^2 / theta at (mt, tt), elementwise.

    Solves (theta - tt)(theta + 2 alpha)^2 = alpha mt^2 for the positive root
    by Newton from above; returns (0, 0) when no positive root exists.
    """
    rhs = alpha * mt * mt
    zero = -tt * 4.0 * alpha * alpha - rhs >= 0.0  # phi(0) >= 0
    theta = np.maximum(tt, 0.0) + np.cbrt(rhs) + 1e-300
    for _ in range(60):
        s = theta + 2.0 * alpha
        phi = (theta - tt) * s * s - rhs
        dphi = s * s + 2.0 * (theta - tt) * s
        step = phi / dphi
        theta = theta - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(theta, 1e-300)):
            break
    theta = np.where(zero, 0.0, np.maximum(theta, 0.0))
    m = np.where(zero, 0.0, theta * mt / (theta + 2.0 * alpha))
    return m, theta


class _ControlProblem:
    """Linear structure of the discretised optimal-control problem.

    Unknowns: interior densities f_1..f_{K-1} (per volume) and momenta
    m_0..m_{K-1}.  Constraint per step k (divided by vol):

        (f_{k+1} - f_k)/dt - D^T m_k - (tau/2) A (f_k + f_{k+1}) = 0.
    """

    def __init__(self, rho0: GridDensity, rho1: GridDensity, op: FPOperator,
                 tau: float, K: int, drift: bool):
        grid = rho0.grid
        self.grid, self.K, self.tau = grid, K, tau
        N, E = grid.size, grid.n_edges
        self.N, self.E = N, E
        self.dt = np.full(K, 1.0 / K)
        self.f0, self.f1 = rho0.density, rho1.density
        self.m0, self.m1 = rho0.masses, rho1.masses
        A = (op.A / op.rate) if drift else sp.csr_matrix((N, N))
        I = sp.identity(N, format="csr")
        D = grid.gradient_matrix
        nf = (K - 1) * N
        blocks = [[None] * (2 * K - 1) for _ in range(K)]
        for k in range(K):
            up = I / self.dt[k] - 0.5 * tau * A  # multiplies f_{k+1}
            lo = -I / self.dt[k] - 0.5 * tau * A  # multiplies f_k
            if k + 1 <= K - 1:
                blocks[k][k] = up
            if k >= 1:
                blocks[k][k - 1] = lo
            blocks[k][K - 1 + k] = -D.T
        for k in range(K):
            for j in range(2 * K - 1):
                if blocks[k][j] is None and k == 0:
                    size = N if j < K - 1 else E
                    blocks[k][j] = sp.csr_matrix((N, size))
        C = sp.bmat(blocks, format="csr")
        d = np.zeros(K * N)
        d[:N] = (I / self.dt[0] + 0.5 * tau * A) @ self.f0
        d[-N:] -= (I / self.dt[-1] - 0.5 * tau * A) @ self.f1
        # the rows are dependent through total mass; drop one
        self.C = C[:-1]
        self.d = d[:-1]
        self.nf, self.nm = nf, K * E
        CCt = (self.C @ self.C.T).tocsc()
        self._lu = spla.splu(CCt)
        # theta = P f_interior + theta_off, one block per step
        avg = sp.csr_matrix(
            (np.full(2 * E, 0.25), (np.tile(np.arange(E), 2),
                                    np.concatenate([grid.edge_tail, grid.edge_head]))),
            shape=(E, N),
        )
        pb = [[None] * (K - 1) for _ in range(K)]
        for k in range(K):
            if k >= 1:
                pb[k][k - 1] = avg
            if k + 1 <= K - 1:
                pb[k][k] = avg
        if K == 1:
            self.P = sp.csr_matrix((E, 0))
        else:
            self.P = sp.bmat(pb, format="csr")
        off = np.zeros((K, E))
        off[0] += avg @ self.f0
        off[-1] += avg @ self.f1
        self.theta_off = off.ravel()
        self.weight = np.repeat(self.dt * grid.vol / (4.0 * tau), E)

    def project(self, x: np.ndarray) -> np.ndarray:
        r = self.C @ x - self.d
        return x - self.C.T @ self._lu.solve(r)

    def split(self, x):
        return x[: self.nf], x[self.nf:]

    def objective(self, x) -> float:
        f, m = self.split(x)
        theta = self.P @ f + self.theta_off
        if np.any(theta <= 0):
            return math.inf
        return float(np.sum(self.weight * m * m / theta))

    def curve_from(self, f_int: np.ndarray, momenta=None) -> DiscreteCurve:
        vol = self.grid.vol
        rows = [self.m0]
        for row in f_int.reshape(self.K - 1, self.N):
            m = np.clip(row * vol, 0.0, None)
            rows.append(m / m.sum())
        rows.append(self.m1)
        times = np.linspace(0.0, 1.0, self.K + 1)
        return DiscreteCurve(times, np.stack(rows), self.grid, momenta)


def _initial_curve(rho0, rho1, K) -> np.ndarray:
    geo = displacement_interpolation(rho0, rho1, np.linspace(0.0, 1.0, K + 1))
    return geo.masses


def _chambolle_pock(prob: _ControlProblem, op, tau, x0, max_iter, rel_tol, check_every,
                    evaluate):
    nf = prob.nf
    P = prob.P
    norm_K = math.sqrt(1.0 + spla.norm(P, 1) * spla.norm(P, np.inf)) if nf else 1.0
    sigma = step = 0.99 / norm_K
    x = prob.project(x0)
    xbar = x.copy()
    y_m = np.zeros(prob.nm)
    y_u = np.zeros(prob.E * prob.K)
    history = []
    last = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f, m = xbar[:nf], xbar[nf:]
        zm = y_m + sigma * m
        zu = y_u + sigma * (P @ f)
        # Moreau: prox_{sigma F*}(z) = z - sigma prox_{F/sigma}(z/sigma)
        pm, pt = _perspective_prox(zm / sigma, zu / sigma + prob.theta_off, prob.weight / sigma)
        y_m = zm - sigma * pm
        y_u = zu - sigma * (pt - prob.theta_off)
        grad = np.concatenate([P.T @ y_u, y_m])
        x_new = prob.project(x - step * grad)
        xbar = 2.0 * x_new - x
        x = x_new
        if it % check_every == 0:
            value = evaluate(x[:nf])
            if isinstance(value, Infinite):  # an iterate may touch a zero slice
                value = math.inf
            history.append((it, value))
            if last is not None and math.isfinite(value) and math.isfinite(last):
                if abs(last - value) <= rel_tol * max(abs(value), 1e-12):
                    converged = True
                    break
            last = value
    return x, it, history, converged


def _lbfgs(prob: _ControlProblem, op, tau, masses0, max_iter, rel_tol, drift):
    """Reduced-space solve over softmax-parametrised interior masses."""
    grid = prob.grid
    K, N = prob.K, prob.N
    vol = grid.vol
    A = (op.A / op.rate) if drift else sp.csr_matrix((N, N))
    D = grid.gradient_matrix
    dt = prob.dt
    M0, M1 = prob.f0 * vol, prob.f1 * vol
    tail, head = grid.edge_tail, grid.edge_head

    def unpack(s):
        s = s.reshape(K - 1, N)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def fun(s):
        Mi = unpack(s)
        M = np.vstack([M0, Mi, M1])
        total = 0.0
        gM = np.zeros_like(M)
        for k in range(K):
            mid = 0.5 * (M[k] + M[k + 1])
            theta = grid.edge_average(mid / vol)
            r = (M[k + 1] - M[k]) / dt[k] - tau * (A @ mid)
            solver = WeightedLaplacianSolver(grid, theta)
            phi = solver.solve(r)
            c = dt[k] / (4.0 * tau)
            total += c * float(r @ phi)
            g_r = 2.0 * phi
            g_theta = -vol * (D @ phi) ** 2
            # theta_e = (mid_tail + mid_head) / (2 vol), mid = (M_k + M_{k+1})/2
            g_mid = (np.bincount(tail, g_theta, N) + np.bincount(head, g_theta, N)) / (2.0 * vol)
            g_mid -= tau * (A.T @ g_r)
            gM[k + 1] += c * (g_r / dt[k] + 0.5 * g_mid)
            gM[k] += c * (-g_r / dt[k] + 0.5 * g_mid)
        gi = gM[1:-1]
        gs = Mi * (gi - np.sum(gi * Mi, axis=1, keepdims=True))
        return total, gs.ravel()

    x0 = np.log(np.maximum(masses0[1:-1], 1e-300)).ravel()
    history = []

    def record(xk):
        history.append(len(history) + 1)

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=record,
                   options={"maxiter": max_iter, "maxcor": 30, "ftol": rel_tol * 1e-2,
                            "gtol": 1e-12, "maxfun": 4 * max_iter})
    return unpack(res.x), res


def minimize_controlled_action(
    rho0: GridDensity,
    rho1: GridDensity,
    op: FPOperator,
    tau: float,
    K: int,
    method: str = "primal_dual",
    drift: bool = True,
    max_iter: int | None = None,
    rel_tol: float = defaults.PD_REL_TOL,
    check_every: int = defaults.PD_CHECK_EVERY,
    strict: bool = False,
) -> MinimizationResult:
    """Minimise the controlled action over discrete curves from rho0 to rho1.

    ``method`` is ``"primal_dual"`` (Chambolle-Pock on densities and
    momenta with perspective proximal steps) or ``"lbfgs"`` (quasi-Newton on
    softmax-parametrised interior masses).  With ``drift=False`` the drift
    term is dropped and ``value`` is the minimal kinetic action divided by
    ``4 tau``.

    The returned value is the action of the returned curve re-evaluated by
    ``controlled_action`` (or ``kinetic_action / (4 tau)``), so it is always
    an upper bound for the discrete minimum.  With ``strict`` a run that hits
    the iteration cap raises ``NonConvergence``.
    """
    rho0.grid.check_same(rho1.grid)
    op.grid.check_same(rho0.grid)
    if tau <= 0 or K < 1:
        raise ValueError("need tau > 0 and K >= 1")
    grid = rho0.grid
    if K == 1:
        curve = DiscreteCurve(np.array([0.0, 1.0]), np.stack([rho0.masses, rho1.masses]), grid)
        value = _curve_value(curve, op, tau, drift)
        return MinimizationResult(value, curve, MinimizerInfo(method, 0))
    prob = _ControlProblem(rho0, rho1, op, tau, K, drift)
    masses0 = _initial_curve(rho0, rho1, K)

    def evaluate(f_int):
        return _curve_value(prob.curve_from(f_int), op, tau, drift)

    if method == "primal_dual":
        max_iter = max_iter or defaults.PD_MAX_ITER
        E = grid.n_edges
        m0 = np.zeros(K * E)
        x0 = np.concatenate([(masses0[1:-1] / grid.vol).ravel(), m0])
        x, it, history, converged = _chambolle_pock(
            prob, op, tau, x0, max_iter, rel_tol, check_every, evaluate
        )
        f_int, m = prob.split(x)
        curve = prob.curve_from(f_int, m.reshape(K, E))
        residual = float(np.abs(prob.C @ x - prob.d).max())
        info = MinimizerInfo(method, it, history, converged, residual)
    elif method == "lbfgs":
        max_iter = max_iter or 5000
        Mi, res = _lbfgs(prob, op, tau, masses0, max_iter, rel_tol, drift)
        curve = DiscreteCurve(np.linspace(0, 1, K + 1), np.vstack([rho0.masses, Mi, rho1.masses]),
                              grid)
        info = MinimizerInfo(method, int(res.nit), [float(res.fun)], bool(res.success))
    else:
        raise ValueError(f"unknown method {method!r}")
    value = _curve_value(curve, op, tau, drift)
    if strict and not info.converged:
        raise NonConvergence(
            f"{method} stopped after {info.iterations} iterations",
            {"value": value, "history": info.history[-5:]},
        )
    return MinimizationResult(value, curve, info)


def _curve_value(curve, op, tau, drift):
    if drift:
        return controlled_action(curve, op, tau)
    kin = kinetic_action(curve)
    return kin if isinstance(kin, Infinite) else kin / (4.0 * tau)
