"""Frozen numerical defaults shared by the solvers, the CLI and the tests."""

from __future__ import annotations

# implicit-Euler step cap for the Fokker-Planck semigroup
DT_MAX = 1e-3

# primal-dual solver for the controlled action
PD_MAX_ITER = 20_000
PD_REL_TOL = 1e-7
PD_CHECK_EVERY = 100

# epsilon grid for the smoothing scale of the recovery curve
EPS_GRID = tuple(0.2 * 2.0**-k for k in range(11))

# default tau sweep
TAU_SWEEP = (0.2, 0.1, 0.05, 0.025)

# discretisation budget tol_chain = C_CHAIN * (dt + h^2).  Measured once as
# the largest defect |dF/dt + G| / (dt + h^2) of the OU flow on the 256-cell
# grid over four Gaussian starts and three step sizes (max 1.435), rounded
# up; tests/test_calibration.py re-measures it.
C_CHAIN = 1.5

# JKO
JKO_ENTROPIC_EPS_START = 1e-1  # times h^2
JKO_ENTROPIC_EPS_END = 1e-3  # times h^2
JKO_TOL = 1e-10


def tol_chain(dt: float, h: float, c: float = C_CHAIN) -> float:
    return c * (dt + h * h)
