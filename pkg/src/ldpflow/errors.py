"""Exceptions and the explicit infinite value used across the toolkit."""

from __future__ import annotations


class GridMismatch(ValueError):
    """Raised when fields living on different grids are combined."""


class InfeasibleSupport(ValueError):
    """A signed measure cannot be balanced through zero-density regions.

    Signals that the weighted H^-1 norm is infinite.  ``slices`` carries the
    offending time-slice indices when raised from a curve evaluation.
    """

    def __init__(self, message: str, slices: tuple[int, ...] = ()):
        super().__init__(message)
        self.slices = tuple(slices)


class SizeLimit(ValueError):
    """Instance too large for an exact solver."""


class NonConvergence(RuntimeError):
    """Iterative solver stopped without meeting its tolerance."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class LinearSolveFailure(RuntimeError):
    pass


class ScheduleOutOfRange(ValueError):
    """tau exceeds g(eps) at the largest admissible eps."""


class InfeasibleTarget(ValueError):
    """Target marginal puts mass where the reference kernel vanishes."""


class ConfigError(ValueError):
    pass


class Infinite:
    """Explicit +infinity for functionals that can blow up.

    Deliberately supports comparisons only; arithmetic with it is an error so
    that an infinite value never silently propagates through sums.
    """

    __slots__ = ("reason", "slices")

    def __init__(self, reason: str = "", slices: tuple[int, ...] = ()):
        self.reason = reason
        self.slices = tuple(slices)

    def __repr__(self) -> str:
        return f"Infinite({self.reason!r})" if self.reason else "Infinite()"

    def __eq__(self, other):
        return isinstance(other, Infinite)

    def __hash__(self):
        return hash(Infinite)

    def __lt__(self, other):
        return False

    def __le__(self, other):
        return isinstance(other, Infinite)

    def __gt__(self, other):
        return not isinstance(other, Infinite)

    def __ge__(self, other):
        return True


def is_infinite(value) -> bool:
    return isinstance(value, Infinite)
