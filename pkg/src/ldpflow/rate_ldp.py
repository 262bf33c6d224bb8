"""Bounds on the small-time rate functional and the static (bridge) form.

The rate of observing rho1 at time tau from rho0 is bracketed by

* the floor  W2^2(rho0, rho1)/(4 tau) + (F(rho1) - F(rho0))/2, valid for every
  curve, and
* the controlled action of a recovery curve: heat rho0 for time eps, follow
  the eps-smoothed geodesic, then run the heat flow of rho1 backwards.

eps is chosen from a dyadic grid as the generalised inverse of
g(eps) = sqrt(eps / h(eps)), h(eps) the Fisher information of the smoothed
geodesic integrated over the geodesic parameter.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import defaults
from .dynamic_action import DiscreteCurve, concatenate_curves, controlled_action
from .errors import (
    InfeasibleTarget,
    Infinite,
    NonConvergence,
    ScheduleOutOfRange,
)
from .functionals import free_energy
from .grid import Grid, GridDensity
from .semigroup import (
    FPOperator,
    evolve_masses,
    evolve_path,
    fisher_information_metric,
)
from .static_ot import GeodesicCurve, displacement_interpolation, w2sq

SWEEP_COLUMNS = ("tau", "epsilon", "i_upper", "w2sq_over_4tau", "gap", "half_delta_f",
                 "err", "h_eps", "seconds")
KERNEL_ROW_TOL = 1e-8
BRIDGE_TOL = 1e-11


def _smoothing_steps(op: FPOperator, eps: float, K: int) -> int:
    """Implicit-Euler substeps per curve step so that eps / (K n) <= dt_max."""
    return max(1, math.ceil(op.step_count(eps) / K))


def _smoothed_samples(geodesic: GeodesicCurve, op: FPOperator, eps: float, n_steps: int):
    M = np.stack([d.masses for d in geodesic.densities], axis=1)
    return evolve_masses(M, op, eps, n_steps)


def h_of_epsilon(geodesic: GeodesicCurve, op: FPOperator, eps: float,
                 n_steps: int | None = None) -> float:
    """Trapezoid over geodesic samples of the metric Fisher information of P_eps rho_t."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    M = _smoothed_samples(geodesic, op, eps, n_steps)
    values = []
    for k in range(M.shape[1]):
        G = fisher_information_metric(GridDensity(M[:, k], op.grid), op)
        if isinstance(G, Infinite):
            raise ValueError(f"Fisher information unbounded at geodesic sample {k}")
        values.append(G)
    return float(np.trapezoid(values, geodesic.times))


@dataclass(frozen=True)
class ScheduleTable:
    eps: tuple[float, ...]
    h: tuple[float, ...]

    @property
    def g(self) -> tuple[float, ...]:
        return tuple(math.sqrt(e / h) if h > 0 else math.inf for e, h in zip(self.eps, self.h))

    def h_at(self, eps: float) -> float:
        return self.h[self.eps.index(eps)]

    def invert(self, tau: float) -> float:
        """Smallest grid eps with g(eps) > tau."""
        best = None
        for e, g in zip(self.eps, self.g):
            if g > tau and (best is None or e < best):
                best = e
        if best is None:
            raise ScheduleOutOfRange(
                f"tau={tau} exceeds g(eps) on the whole grid (max g={max(self.g):.4g})"
            )
        return best


def schedule_table(geodesic: GeodesicCurve, op: FPOperator,
                   eps_grid=defaults.EPS_GRID) -> ScheduleTable:
    eps = tuple(sorted(float(e) for e in eps_grid))
    return ScheduleTable(eps, tuple(h_of_epsilon(geodesic, op, e) for e in eps))


def _same(rho0: GridDensity, rho1: GridDensity) -> bool:
    return np.array_equal(rho0.masses, rho1.masses)


def epsilon_schedule(geodesic: GeodesicCurve, op: FPOperator, tau: float,
                     eps_grid=defaults.EPS_GRID, table: ScheduleTable | None = None) -> float:
    """eps(tau) = inf{eps in grid : g(eps) > tau}; 0 when the endpoints coincide."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = geodesic.densities
    if _same(d[0], d[-1]):
        return 0.0
    table = table or schedule_table(geodesic, op, eps_grid)
    return table.invert(tau)


@dataclass(frozen=True, eq=False)
class RecoveryCurve:
    epsilon: float
    segments: tuple[DiscreteCurve, ...]
    curve: DiscreteCurve
    breaks: tuple[float, ...]

    def junction_mismatch(self) -> float:
        """Max difference of the densities that meet at segment junctions."""
        gaps = [np.abs(a.masses[-1] - b.masses[0]).max()
                for a, b in zip(self.segments[:-1], self.segments[1:])]
        return float(max(gaps, default=0.0))


def build_recovery_curve(rho0: GridDensity, rho1: GridDensity, op: FPOperator, tau: float,
                         K_per_segment: int, eps: float | None = None,
                         table: ScheduleTable | None = None) -> RecoveryCurve:
    """Three-segment curve: heat-up of rho0, smoothed geodesic, reversed heat of rho1.

    The heat segments run ``K_per_segment * n_sub`` implicit-Euler steps and
    keep every ``n_sub``-th state; the geodesic samples are smoothed with the
    same number of steps, and the junction slices are the very same arrays.
    """
    rho0.grid.check_same(rho1.grid)
    K = int(K_per_segment)
    geo = displacement_interpolation(rho0, rho1, np.linspace(0.0, 1.0, K + 1))
    if eps is None:
        eps = epsilon_schedule(geo, op, tau, table=table)
    if eps == 0.0:
        mid = DiscreteCurve.uniform(geo.densities)
        return RecoveryCurve(0.0, (mid,), mid, (0.0, 1.0))
    if not 0 < eps < 0.25:
        raise ValueError("eps must lie in (0, 1/4)")
    n_sub = _smoothing_steps(op, eps, K)
    up = evolve_path(rho0, op, eps, K, n_sub)
    down = evolve_path(rho1, op, eps, K, n_sub)[::-1]
    inner = _smoothed_samples(GeodesicCurve(geo.times[1:-1], geo.densities[1:-1]),
                              op, eps, K * n_sub) if K > 1 else np.zeros((rho0.grid.size, 0))
    middle = [up[-1]] + [GridDensity(inner[:, k], rho0.grid) for k in range(inner.shape[1])]
    middle.append(down[0])
    segs = tuple(DiscreteCurve.uniform(s) for s in (up, middle, down))
    breaks = (0.0, eps, 1.0 - eps, 1.0)
    return RecoveryCurve(eps, segs, concatenate_curves(segs, breaks), breaks)


def rate_upper(rho0: GridDensity, rho1: GridDensity, op: FPOperator, tau: float,
               K_per_segment: int = 64, table: ScheduleTable | None = None):
    """Controlled action of the recovery curve (an upper bound for the discrete rate)."""
    rec = build_recovery_curve(rho0, rho1, op, tau, K_per_segment, table=table)
    return controlled_action(rec.curve, op, tau)


def rate_lower_reference(rho0: GridDensity, rho1: GridDensity, tau: float, pot) -> float:
    """W2^2/(4 tau) + (F(rho1) - F(rho0))/2."""
    return w2sq(rho0, rho1) / (4.0 * tau) + 0.5 * (free_energy(rho1, pot) - free_energy(rho0, pot))


def tol_chain(curve: DiscreteCurve | None, grid: Grid, dt: float | None = None,
              c: float = defaults.C_CHAIN) -> float:
    """Discretisation budget C (dt + h^2) with dt the largest curve step."""
    if dt is None:
        dt = float(curve.dt.max())
    return defaults.tol_chain(dt, grid.hmax, c)


# ---------------------------------------------------------------------------
# static formulation


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """p[i, j]: density of X_tau at target cell j given X_0 at cell centre i."""

    p: np.ndarray
    tau: float
    grid: Grid

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (self.grid.size, self.grid.size):
            raise ValueError("kernel must be (size, size)")
        if p.min() < 0:
            raise ValueError("kernel has negative entries")
        rows = p.sum(axis=1) * self.grid.vol
        if np.abs(rows - 1.0).max() > KERNEL_ROW_TOL:
            raise ValueError("kernel rows do not integrate to one")
        object.__setattr__(self, "p", p)

    def log_p(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.p)

    def push(self, rho: GridDensity) -> GridDensity:
        """Law of X_tau when X_0 ~ rho."""
        return GridDensity.from_values(self.grid, rho.masses @ self.p * self.grid.vol)


def ou_kernel(grid: Grid, tau: float, lam: float = 1.0) -> TransitionKernel:
    """Gaussian OU transition N(x e^{-lam tau}, (1 - e^{-2 lam tau})/lam) on the grid.

    Evaluated at target cell centres in log space and renormalised per row.
    """
    x = grid.cell_centers
    mean = x * math.exp(-lam * tau)
    var = -math.expm1(-2.0 * lam * tau) / lam
    d2 = np.sum((mean[:, None, :] - x[None, :, :]) ** 2, axis=2)
    logp = -d2 / (2.0 * var)
    logp -= logsumexp(logp, axis=1, keepdims=True) + math.log(grid.vol)
    return TransitionKernel(np.exp(logp), tau, grid)


def semigroup_kernel(op: FPOperator, tau: float) -> TransitionKernel:
    """Kernel from evolving every one-hot density through the discrete semigroup."""
    grid = op.grid
    M = evolve_masses(np.identity(grid.size), op, tau)
    return TransitionKernel(M.T / grid.vol, tau, grid)


@dataclass
class BridgeResult:
    value: float
    joint: np.ndarray
    iterations: int
    marginal_residual: float


def static_rate(rho0: GridDensity, rho1: GridDensity, kernel: TransitionKernel,
                tol: float = BRIDGE_TOL, max_iter: int = 200_000) -> BridgeResult:
    """min H(gamma | rho0 (x) p_tau) over couplings of rho0 and rho1.

    Log-domain Sinkhorn on the reference joint R = diag(a) p vol.  With
    gamma = R exp(phi_i + chi_j) the optimal value is <a, phi> + <b, chi>.
    """
    grid = kernel.grid
    grid.check_same(rho0.grid)
    grid.check_same(rho1.grid)
    a, b = rho0.masses, rho1.masses
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    logR = kernel.log_p()[np.ix_(rows, cols)] + math.log(grid.vol) + np.log(a[rows])[:, None]
    reach = logsumexp(logR, axis=0)
    if np.any(reach < -700):
        raise InfeasibleTarget("target has mass where the reference kernel vanishes")
    la, lb = np.log(a[rows]), np.log(b[cols])
    phi = np.zeros(rows.size)
    chi = np.zeros(cols.size)
    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        chi = lb - logsumexp(logR + phi[:, None], axis=0)
        phi = la - logsumexp(logR + chi[None, :], axis=1)
        if it % 10 == 0 or it == max_iter:
            logG = logR + phi[:, None] + chi[None, :]
            res = float(np.abs(np.exp(logsumexp(logG, axis=0)) - b[cols]).max())
            if res <= tol:
                break
    if res > tol:
        raise NonConvergence(f"bridge Sinkhorn residual {res:.2e}",
                             {"iterations": it, "residual": res})
    value = float(a[rows] @ phi + b[cols] @ chi)
    joint = np.zeros((grid.size, grid.size))
    joint[np.ix_(rows, cols)] = np.exp(logR + phi[:, None] + chi[None, :])
    return BridgeResult(value, joint, it, res)


def relative_entropy_of_joint(gamma: np.ndarray, ref: np.ndarray) -> float:
    pos = gamma > 0
    if np.any(ref[pos] <= 0):
        return math.inf
    return float(np.sum(gamma[pos] * np.log(gamma[pos] / ref[pos])))


# ---------------------------------------------------------------------------
# tau sweep


@dataclass
class GammaSweepRecord:
    tau: float
    epsilon: float | None = None
    i_upper: float | None = None
    w2sq_over_4tau: float | None = None
    gap: float | None = None
    half_delta_f: float | None = None
    err: float | None = None
    h_eps: float | None = None
    seconds: float | None = None
    i_lower_reference: float | None = None
    tol_chain: float | None = None
    error: str | None = None
    curve: DiscreteCurve | None = field(default=None, repr=False)

    @property
    def lower_bound_ok(self) -> bool:
        return self.error is None and self.gap >= self.half_delta_f - self.tol_chain


def gamma_sweep(rho0: GridDensity, rho1: GridDensity, op: FPOperator,
                taus=defaults.TAU_SWEEP, K_per_segment: int = 64,
                eps_grid=defaults.EPS_GRID, keep_curves: bool = False,
                c_chain: float = defaults.C_CHAIN) -> list[GammaSweepRecord]:
    """One record per tau; a failure at one tau is recorded, not raised."""
    pot = op.potential
    W = w2sq(rho0, rho1)
    half_df = 0.5 * (free_energy(rho1, pot) - free_energy(rho0, pot))
    same = _same(rho0, rho1)
    table = None
    if not same:
        geo = displacement_interpolation(rho0, rho1, np.linspace(0.0, 1.0, K_per_segment + 1))
        table = schedule_table(geo, op, eps_grid)
    records = []
    for tau in taus:
        rec = GammaSweepRecord(float(tau), half_delta_f=half_df, w2sq_over_4tau=W / (4.0 * tau))
        start = time.perf_counter()
        try:
            curve = build_recovery_curve(rho0, rho1, op, tau, K_per_segment, table=table)
            value = controlled_action(curve.curve, op, tau)
            if isinstance(value, Infinite):
                raise ValueError(f"recovery curve has infinite action: {value}")
            rec.epsilon = curve.epsilon
            rec.i_upper = value
            rec.gap = value - rec.w2sq_over_4tau
            rec.err = rec.gap - half_df
            rec.h_eps = table.h_at(curve.epsilon) if table is not None else 0.0
            rec.i_lower_reference = rec.w2sq_over_4tau + half_df
            rec.tol_chain = tol_chain(curve.curve, rho0.grid, c=c_chain)
            if keep_curves:
                rec.curve = curve.curve
        except Exception as exc:  # recorded per tau, the sweep goes on
            rec.error = f"{type(exc).__name__}: {exc}"
        rec.seconds = time.perf_counter() - start
        records.append(rec)
    return records


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_sweep_csv(path, records, record_seconds: bool = False) -> None:
    """CSV with the fixed sweep columns.  ``seconds`` is left blank unless asked
    for, so that reruns produce identical files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in records:
            row = [getattr(r, c) for c in SWEEP_COLUMNS]
            if not record_seconds:
                row[-1] = None
            w.writerow([_fmt(v) for v in row])
