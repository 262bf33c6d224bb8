"""Shared fixtures: standard testcases, the curve log behind the lower-bound
check, and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import math

import numpy as np
import pytest

from ldpflow.dynamic_action import controlled_action
from ldpflow.errors import Infinite
from ldpflow.functionals import free_energy
from ldpflow.grid import Grid, gaussian_density, quadratic_potential
from ldpflow.rate_ldp import gamma_sweep, tol_chain
from ldpflow.semigroup import FPOperator
from ldpflow.static_ot import w2sq

# ---------------------------------------------------------------------------
# acceptance reporting

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_collection_modifyitems(session, config, items):
    # acceptance criteria run last so the lower-bound criterion sees every
    # curve logged by the module tests
    items.sort(key=lambda it: it.get_closest_marker("acceptance") is not None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (report.when == "call" or report.failed):
        return
    number, title = mark.args
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    detail = dict(item.user_properties).get("detail", "")
    if status == "FAIL" and not detail:
        detail = f"error in {report.when}"
    _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")


@pytest.fixture
def criterion(request, record_property):
    """Record the criterion number/title and a one-line detail for the summary."""
    number = request.node.get_closest_marker("acceptance").args[0]

    def detail(text: str) -> None:
        record_property("detail", text)
        print(f"criterion {number}: {text}")

    return detail


# ---------------------------------------------------------------------------
# curves evaluated across the suite


class CurveLog:
    """Every curve checked against action - W2^2/(4 tau) >= dF/2 - tol_chain."""

    def __init__(self):
        self.entries: list[tuple[str, float, float]] = []

    def margin(self, label: str, curve, op: FPOperator, tau: float) -> float:
        value = controlled_action(curve, op, tau)
        if isinstance(value, Infinite):
            margin = math.inf
        else:
            rho0, rho1 = curve.density(0), curve.density(curve.n_steps)
            pot = op.potential
            lhs = value - w2sq(rho0, rho1) / (4.0 * tau)
            rhs = 0.5 * (free_energy(rho1, pot) - free_energy(rho0, pot))
            margin = lhs - (rhs - tol_chain(curve, curve.grid))
        self.entries.append((label, float(tau), float(margin)))
        return margin


_CURVE_LOG = CurveLog()


@pytest.fixture(scope="session")
def curve_log() -> CurveLog:
    return _CURVE_LOG


# ---------------------------------------------------------------------------
# standard testcases


class Case:
    def __init__(self, cells: int, lower=-6.0, upper=6.0, m0=0.0, v0=0.5, m1=0.5, v1=0.3):
        self.grid = Grid.regular(lower, upper, cells)
        self.pot = quadratic_potential(self.grid)
        self.op = FPOperator.build(self.pot)
        self.rho0 = gaussian_density(self.grid, m0, v0)
        self.rho1 = gaussian_density(self.grid, m1, v1)


@pytest.fixture(scope="session")
def ou_case() -> Case:
    """OU testcase: N(0, 0.5) -> N(0.5, 0.3) on [-6, 6], 256 cells."""
    return Case(256)


@pytest.fixture(scope="session")
def small_case() -> Case:
    """Same endpoints on 48 cells, for the curve minimiser."""
    return Case(48)


@pytest.fixture(scope="session")
def ou_sweep(ou_case):
    return gamma_sweep(ou_case.rho0, ou_case.rho1, ou_case.op, keep_curves=True)


@pytest.fixture(scope="session")
def rng_factory():
    def make(key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(20240611, spawn_key=(key,)))

    return make
