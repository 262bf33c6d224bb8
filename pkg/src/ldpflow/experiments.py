"""Experiment runners behind the command-line subcommands.

Each runner takes an ``ExperimentConfig`` and returns a ``Report``: the CSV
header and rows, plus a list of failed invariants (empty when all hold).
Rows hold only deterministic quantities so reruns give identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import defaults
from .config import ExperimentConfig
from .dynamic_action import controlled_action
from .errors import Infinite
from .functionals import free_energy, hm1_norm, hm1_norm_flux_form
from .grid import Grid, GridDensity, gibbs_density
from .jko import jko_iterate
from .particles import empirical_convergence_report
from .rate_ldp import (
    SWEEP_COLUMNS,
    build_recovery_curve,
    gamma_sweep,
    ou_kernel,
    rate_lower_reference,
    semigroup_kernel,
    static_rate,
    tol_chain,
)
from .semigroup import (
    FPOperator,
    dissipation_defects,
    evolve,
    evolve_many,
    fisher_information_metric,
    ou_reference,
    uniform_entropy_gap,
)
from .static_ot import displacement_interpolation, w2_entropic, w2_exact, w2sq


@dataclass
class Report:
    name: str
    header: tuple[str, ...]
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def check(self, label: str, ok: bool, **detail) -> bool:
        if not ok:
            self.failures.append({"invariant": label, **{k: _plain(v) for k, v in detail.items()}})
        return ok


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Infinite):
        return "inf"
    return v


def _setup(cfg: ExperimentConfig):
    grid = cfg.grid()
    pot = cfg.potential(grid)
    op = FPOperator.build(pot, cfg["semigroup.dt_max"])
    return grid, pot, op


def _is_ou(cfg: ExperimentConfig, grid: Grid) -> bool:
    return (cfg["potential.kind"] == "quadratic" and grid.dim == 1
            and all(c == 0.0 for c in cfg["potential.center"]))


# ---------------------------------------------------------------------------


def run_gamma_sweep(cfg: ExperimentConfig) -> Report:
    grid, pot, op = _setup(cfg)
    rho0 = cfg.endpoint("rho0", grid, pot)
    rho1 = cfg.endpoint("rho1", grid, pot)
    records = gamma_sweep(rho0, rho1, op, cfg["sweep.taus"], cfg["sweep.k_per_segment"],
                          c_chain=cfg["tolerances.c_chain"])
    rep = Report("gamma_sweep", SWEEP_COLUMNS)
    for r in records:
        seconds = r.seconds if cfg["run.record_seconds"] else None
        rep.rows.append([r.tau, r.epsilon, r.i_upper, r.w2sq_over_4tau, r.gap,
                         r.half_delta_f, r.err, r.h_eps, seconds])
        rep.timings[f"tau={r.tau!r}"] = r.seconds
        if r.error is not None:
            rep.check("sweep entry computed", False, tau=r.tau, error=r.error)
            continue
        rep.check("lower bound gap >= half_delta_f - tol_chain", r.lower_bound_ok,
                  tau=r.tau, gap=r.gap, half_delta_f=r.half_delta_f, tol_chain=r.tol_chain)
    errs = [r.err for r in records if r.error is None]
    band = cfg["tolerances.err_noise_band"]
    for prev, nxt in zip(errs[:-1], errs[1:]):
        scale = max(abs(prev), 1e-12)
        rep.check("err nonincreasing along the sweep (noise band)",
                  abs(nxt) <= abs(prev) + band * scale, previous=prev, next=nxt)
    return rep


def run_rate(cfg: ExperimentConfig) -> Report:
    grid, pot, op = _setup(cfg)
    rho0 = cfg.endpoint("rho0", grid, pot)
    rho1 = cfg.endpoint("rho1", grid, pot)
    tau = cfg["rate.tau"]
    rep = Report("rate", ("tau", "epsilon", "i_lower", "i_upper", "midpoint", "static_rate",
                          "kernel", "tol_chain"))
    lower = rate_lower_reference(rho0, rho1, tau, pot)
    rec = build_recovery_curve(rho0, rho1, op, tau, cfg["sweep.k_per_segment"])
    upper = controlled_action(rec.curve, op, tau)
    if isinstance(upper, Infinite):
        rep.check("finite upper bound", False, tau=tau)
        return rep
    if _is_ou(cfg, grid) and cfg["potential.lam"] > 0:
        kernel, kind = ou_kernel(grid, tau, cfg["potential.lam"]), "ou"
    else:
        kernel, kind = semigroup_kernel(op, tau), "semigroup"
    static = static_rate(rho0, rho1, kernel).value
    tol = tol_chain(rec.curve, grid, c=cfg["tolerances.c_chain"])
    rep.rows.append([tau, rec.epsilon, lower, upper, 0.5 * (lower + upper), static, kind, tol])
    rep.check("lower <= upper + tol_chain", lower <= upper + tol, lower=lower, upper=upper)
    return rep


def run_w2(cfg: ExperimentConfig) -> Report:
    grid, pot, _ = _setup(cfg)
    rho0 = cfg.endpoint("rho0", grid, pot)
    rho1 = cfg.endpoint("rho1", grid, pot)
    rep = Report("w2", ("solver", "epsilon", "w2", "w2sq", "row_residual", "col_residual"))
    exact = w2_exact(rho0, rho1)
    rep.rows.append(["exact", None, exact.distance, exact.distance**2,
                     exact.coupling.row_residual, exact.coupling.col_residual])
    rep.check("exact coupling marginals", max(exact.coupling.row_residual,
                                              exact.coupling.col_residual) <= 1e-9)
    if grid.size <= 1024:
        for scale in (1.0, 0.1):
            eps = scale * grid.hmax**2 * 10
            ent = w2_entropic(rho0, rho1, eps, debias=True)
            rep.rows.append(["entropic_debiased", eps, ent.distance, ent.distance**2,
                             ent.coupling.row_residual, ent.coupling.col_residual])
    return rep


def run_semigroup(cfg: ExperimentConfig) -> Report:
    grid, pot, op = _setup(cfg)
    rho0 = cfg.endpoint("rho0", grid, pot)
    rho1 = cfg.endpoint("rho1", grid, pot)
    t = cfg["semigroup.t"]
    lam = pot.lam
    rep = Report("semigroup", ("property", "value", "threshold", "passed"))

    def row(name, value, threshold, ok):
        rep.rows.append([name, value, threshold, "true" if ok else "false"])
        rep.check(name, ok, value=value, threshold=threshold)

    pt0, pt1 = evolve_many([rho0, rho1], op, t)
    row("mass_defect", abs(pt0.masses.sum() - 1.0), 1e-12, abs(pt0.masses.sum() - 1.0) <= 1e-12)
    row("min_mass", float(pt0.masses.min()), 0.0, pt0.masses.min() >= 0.0)
    gibbs = gibbs_density(pot)
    drift = float(np.abs(evolve(gibbs, op, t).masses - gibbs.masses).max())
    row("gibbs_drift", drift, 1e-10, drift <= 1e-10)
    if _is_ou(cfg, grid) and lam == 1.0:
        m_ref, v_ref = ou_reference(float(rho0.mean()[0]), rho0.variance(), t)
        dm = abs(float(pt0.mean()[0]) - m_ref)
        dv = abs(pt0.variance() - v_ref)
        row("ou_mean_error", dm, 5e-3, dm <= 5e-3)
        row("ou_variance_error", dv, 5e-3, dv <= 5e-3)
    if grid.dim == 1 or grid.size <= 4096:
        w_before = math.sqrt(w2sq(rho0, rho1))
        w_after = math.sqrt(w2sq(pt0, pt1))
        bound = math.exp(-lam * t) * w_before * (1 + 1e-2)
        row("w2_contraction_ratio", w_after / max(w_before, 1e-300),
            bound / max(w_before, 1e-300), w_after <= bound)
    g_before = fisher_information_metric(rho0, op)
    g_after = fisher_information_metric(pt0, op)
    if not isinstance(g_before, Infinite) and not isinstance(g_after, Infinite):
        bound = math.exp(-2 * lam * t) * g_before * (1 + 2e-2)
        row("fisher_decay_ratio", g_after / max(g_before, 1e-300),
            bound / max(g_before, 1e-300), g_after <= bound + 1e-14)
    f_prev = free_energy(rho0, pot)
    worst = -math.inf
    for s in (0.01, 0.05, 0.1, 0.25, 0.5, 1.0):
        f = free_energy(evolve(rho0, op, s), pot)
        worst = max(worst, f - f_prev)
        f_prev = f
    row("entropy_increase", worst, 1e-10, worst <= 1e-10)
    # dissipation identity along a path with the default step
    dt = op.dt_max
    n = max(1, math.ceil(t / dt))
    defect = float(dissipation_defects(rho0, op, n * dt, n).max())
    tol = defaults.tol_chain(dt, grid.hmax, cfg["tolerances.c_chain"])
    row("dissipation_defect", defect, tol, defect <= tol)
    # entropy gap of smoothed geodesic samples shrinks with the smoothing time
    if grid.dim == 1 or grid.size <= 4096:
        geo = displacement_interpolation(rho0, rho1, np.linspace(0.0, 1.0, 11))
        gaps = [uniform_entropy_gap(geo.densities, op, e) for e in (0.1, 0.05, 0.025, 0.0125)]
        steps = max(b - a for a, b in zip(gaps[:-1], gaps[1:]))
        row("uniform_entropy_gap_step", steps, 0.0, steps < 0.0)
    return rep


def run_jko(cfg: ExperimentConfig) -> Report:
    grid0, pot0, _ = _setup(cfg)
    if grid0.dim != 1:
        rep = Report("jko", ("n", "l1_error", "ratio"))
        rep.check("jko order sweep needs a 1D grid", False)
        return rep
    lo, hi = grid0.bounds[0]
    grid = Grid.regular(lo, hi, cfg["jko.cells"])
    pot = cfg.potential(grid)
    op = FPOperator.build(pot, cfg["semigroup.dt_max"])
    rho0 = cfg.endpoint("rho0", grid, pot)
    t = cfg["jko.t"]
    ref = evolve(rho0, op, t)
    rep = Report("jko", ("n", "l1_error", "ratio"))
    prev = None
    for n in cfg["jko.ns"]:
        err = float(np.abs(jko_iterate(rho0, pot, t, n).masses - ref.masses).sum())
        ratio = None if prev is None else prev / err
        rep.rows.append([n, err, ratio])
        if ratio is not None:
            rep.check("l1 error ratio per doubling in [1.5, 3]", 1.5 <= ratio <= 3.0,
                      n=n, ratio=ratio)
        prev = err
    return rep


def run_particles(cfg: ExperimentConfig) -> Report:
    grid, pot, op = _setup(cfg)
    rho0 = cfg.endpoint("rho0", grid, pot)
    t = cfg["particles.t"]
    ref = evolve(rho0, op, t)
    rows = empirical_convergence_report(rho0, pot, ref, t, cfg["particles.dt"],
                                        cfg["particles.ns"], cfg["particles.n_seeds"],
                                        cfg["run.seed"])
    rep = Report("particles", ("n", "mean_w2", "std_w2", "n_seeds"))
    for r in rows:
        rep.rows.append([r.n, r.mean_w2, r.std_w2, len(r.distances)])
    for a, b in zip(rows[:-1], rows[1:]):
        rep.check("mean W2 decreases with n", b.mean_w2 < a.mean_w2, n=b.n,
                  previous=a.mean_w2, current=b.mean_w2)
    return rep


def run_norm_check(cfg: ExperimentConfig) -> Report:
    rng = np.random.default_rng(np.random.SeedSequence(cfg["run.seed"], spawn_key=(7,)))
    n_inst = cfg["norm_check.instances"]
    max_cells = cfg["norm_check.max_cells"]
    rel_tol = cfg["tolerances.duality_rel"]
    rep = Report("norm_check", ("instance", "cells", "dual", "flux", "rel_diff"))
    for i in range(n_inst):
        grid, rho, s = random_norm_instance(rng, max_cells)
        dual = hm1_norm(s, rho).norm_sq
        flux = hm1_norm_flux_form(s, rho)
        rel = abs(dual - flux) / max(abs(flux), 1e-300)
        rep.rows.append([i, grid.size, dual, flux, rel])
        rep.check("dual and flux H^-1 values agree", rel <= rel_tol, instance=i, rel=rel)
    return rep


def random_norm_instance(rng: np.random.Generator, max_cells: int = 64):
    """Random grid (1D or 2D), strictly positive density and zero-sum measure."""
    if rng.random() < 0.5:
        n = int(rng.integers(2, max_cells + 1))
        grid = Grid.regular(0.0, float(rng.uniform(0.5, 3.0)), n)
    else:
        side = int(rng.integers(2, int(math.isqrt(max_cells)) + 1))
        other = int(rng.integers(2, max_cells // side + 1))
        grid = Grid.regular([0.0, 0.0], [float(rng.uniform(0.5, 2)), float(rng.uniform(0.5, 2))],
                            [side, other])
    rho = GridDensity.from_values(grid, rng.uniform(0.05, 1.0, grid.size))
    s = rng.standard_normal(grid.size)
    s -= s.mean()
    return grid, rho, s


RUNNERS = {
    "gamma-sweep": run_gamma_sweep,
    "rate": run_rate,
    "w2": run_w2,
    "semigroup": run_semigroup,
    "jko": run_jko,
    "particles": run_particles,
    "norm-check": run_norm_check,
}
