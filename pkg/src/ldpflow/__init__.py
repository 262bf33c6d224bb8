"""Discrete Wasserstein gradient flows and small-time large-deviation rates.

Grids, densities and discrete calculus live in ``ldpflow.grid``; transport in
``ldpflow.static_ot``; the Fokker-Planck semigroup in ``ldpflow.semigroup``;
curve actions in ``ldpflow.dynamic_action``; rate bounds in
``ldpflow.rate_ldp``; JKO steps in ``ldpflow.jko``; particles in
``ldpflow.particles``.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    GridMismatch,
    InfeasibleSupport,
    InfeasibleTarget,
    Infinite,
    LinearSolveFailure,
    NonConvergence,
    ScheduleOutOfRange,
    SizeLimit,
    is_infinite,
)
from .grid import (
    EdgeField,
    Grid,
    GridDensity,
    GridSignedMeasure,
    Potential,
    divergence,
    double_well_potential,
    gaussian_density,
    gibbs_density,
    gradient,
    quadratic_potential,
    weighted_laplacian,
)

__all__ = [
    "__version__",
    "ConfigError",
    "GridMismatch",
    "InfeasibleSupport",
    "InfeasibleTarget",
    "Infinite",
    "LinearSolveFailure",
    "NonConvergence",
    "ScheduleOutOfRange",
    "SizeLimit",
    "is_infinite",
    "EdgeField",
    "Grid",
    "GridDensity",
    "GridSignedMeasure",
    "Potential",
    "divergence",
    "double_well_potential",
    "gaussian_density",
    "gibbs_density",
    "gradient",
    "quadratic_potential",
    "weighted_laplacian",
]
