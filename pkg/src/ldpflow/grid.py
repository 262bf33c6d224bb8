"""Regular-grid geometry, discrete calculus and the core field types.

Conventions
-----------
Cells are indexed in C order over the per-axis cell counts.  Scalar fields
come in two flavours:

* *densities / test functions* (per-volume values, one per cell), and
* *measures* (mass units, one per cell); ``GridDensity.masses`` and
  ``GridSignedMeasure.values`` are measures.

Edges join neighbouring cells ``i < j`` along one axis; there are no edges
across the box boundary (no-flux).  The discrete inner products are

    <s, f>      = sum_i s_i f_i                   (measure against function)
    <m, n>_E    = vol * sum_e m_e n_e             (edge fields)

and ``divergence`` is defined as the negative adjoint of ``gradient`` with
respect to these pairings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .errors import GridMismatch

MASS_TOL = 1e-12
SIGNED_SUM_TOL = 1e-10


@dataclass(frozen=True)
class Grid:
    """Regular box grid in one or two dimensions with no-flux boundary.

    Parameters
    ----------
    bounds : sequence of (a, b) pairs, one per axis.
    n : sequence of cell counts, one per axis.
    """

    bounds: tuple[tuple[float, float], ...]
    n: tuple[int, ...]

    def __post_init__(self):
        bounds = tuple((float(a), float(b)) for a, b in self.bounds)
        n = tuple(int(k) for k in self.n)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "n", n)
        if len(bounds) != len(n) or len(n) not in (1, 2):
            raise ValueError("grid must be 1D or 2D with one count per axis")
        if any(k < 2 for k in n):
            raise ValueError("need at least 2 cells per axis")
        if any(b <= a for a, b in bounds):
            raise ValueError("empty interval in grid bounds")

    @classmethod
    def regular(cls, lower, upper, cells) -> Grid:
        lower = np.atleast_1d(lower)
        upper = np.atleast_1d(upper)
        cells = np.atleast_1d(cells)
        if len(cells) == 1 and len(lower) > 1:
            cells = np.repeat(cells, len(lower))
        return cls(tuple(zip(lower, upper)), tuple(cells))

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @cached_property
    def h(self) -> np.ndarray:
        return np.array([(b - a) / k for (a, b), k in zip(self.bounds, self.n)])

    @property
    def hmax(self) -> float:
        return float(self.h.max())

    @property
    def vol(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def axis_centers(self) -> tuple[np.ndarray, ...]:
        return tuple(
            a + (np.arange(k) + 0.5) * hk
            for (a, _), k, hk in zip(self.bounds, self.n, self.h)
        )

    @cached_property
    def axis_edges(self) -> tuple[np.ndarray, ...]:
        return tuple(
            a + np.arange(k + 1) * hk
            for (a, _), k, hk in zip(self.bounds, self.n, self.h)
        )

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """(size, dim) array of cell-centre coordinates."""
        mesh = np.meshgrid(*self.axis_centers, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def _edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.arange(self.size).reshape(self.n)
        tails, heads, axes = [], [], []
        for k in range(self.dim):
            lo = [slice(None)] * self.dim
            hi = [slice(None)] * self.dim
            lo[k] = slice(0, -1)
            hi[k] = slice(1, None)
            t = idx[tuple(lo)].ravel()
            tails.append(t)
            heads.append(idx[tuple(hi)].ravel())
            axes.append(np.full(t.size, k))
        return np.concatenate(tails), np.concatenate(heads), np.concatenate(axes)

    @property
    def edge_tail(self) -> np.ndarray:
        return self._edges[0]

    @property
    def edge_head(self) -> np.ndarray:
        return self._edges[1]

    @property
    def edge_axis(self) -> np.ndarray:
        return self._edges[2]

    @property
    def n_edges(self) -> int:
        return self.edge_tail.size

    @cached_property
    def edge_h(self) -> np.ndarray:
        return self.h[self.edge_axis]

    @cached_property
    def gradient_matrix(self) -> sp.csr_matrix:
        """Sparse (n_edges, size) matrix D with (D f)_e = (f_head - f_tail)/h."""
        e = np.arange(self.n_edges)
        inv_h = 1.0 / self.edge_h
        rows = np.concatenate([e, e])
        cols = np.concatenate([self.edge_tail, self.edge_head])
        vals = np.concatenate([-inv_h, inv_h])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_edges, self.size))

    @cached_property
    def divergence_matrix(self) -> sp.csr_matrix:
        """Sparse (size, n_edges) matrix with div = -vol * D^T."""
        return (-self.vol * self.gradient_matrix.T).tocsr()

    def edge_average(self, cell_values: np.ndarray) -> np.ndarray:
        """Arithmetic mean of the two cell values adjacent to each edge."""
        cell_values = np.asarray(cell_values)
        return 0.5 * (cell_values[..., self.edge_tail] + cell_values[..., self.edge_head])

    def check_same(self, other: Grid) -> None:
        if other is not self and other != self:
            raise GridMismatch(f"grid mismatch: {self} vs {other}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Probability vector on the cells of a grid (masses sum to one)."""

    masses: np.ndarray
    grid: Grid

    def __post_init__(self):
        m = _readonly(self.masses).ravel()
        if m.size != self.grid.size:
            raise GridMismatch(f"expected {self.grid.size} masses, got {m.size}")
        if not np.all(np.isfinite(m)) or m.min() < 0.0:
            raise ValueError("masses must be finite and nonnegative")
        if abs(m.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"masses sum to {m.sum()!r}, not 1")
        object.__setattr__(self, "masses", m)

    @classmethod
    def from_values(cls, grid: Grid, values) -> GridDensity:
        """Normalise nonnegative cell weights into a probability vector."""
        v = np.clip(np.asarray(values, dtype=float).ravel(), 0.0, None)
        total = v.sum()
        if not total > 0:
            raise ValueError("weights have no mass")
        v = v / total
        # second pass absorbs the rounding of the first division
        return cls(v / v.sum(), grid)

    @property
    def density(self) -> np.ndarray:
        return self.masses / self.grid.vol

    def mean(self) -> np.ndarray:
        return self.masses @ self.grid.cell_centers

    def covariance(self) -> np.ndarray:
        x = self.grid.cell_centers - self.mean()
        cov = (x * self.masses[:, None]).T @ x
        # piecewise-constant (histogram) reading adds h^2/12 per axis
        return cov + np.diag(self.grid.h**2 / 12.0)

    def variance(self) -> float:
        return float(self.covariance()[0, 0])


@dataclass(frozen=True, eq=False)
class GridSignedMeasure:
    """Zero-sum signed measure on the cells (mass units)."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = _readonly(self.values).ravel()
        if v.size != self.grid.size:
            raise GridMismatch(f"expected {self.grid.size} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("signed measure has non-finite entries")
        scale = max(1.0, float(np.abs(v).sum()))
        if abs(v.sum()) > SIGNED_SUM_TOL * scale:
            raise ValueError(f"signed measure sums to {v.sum()!r}, not 0")
        object.__setattr__(self, "values", v)

    @classmethod
    def difference(cls, a: GridDensity, b: GridDensity) -> GridSignedMeasure:
        a.grid.check_same(b.grid)
        return cls(a.masses - b.masses, a.grid)


@dataclass(frozen=True, eq=False)
class EdgeField:
    """Per-edge values (momentum: density times velocity)."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = _readonly(self.values).ravel()
        if v.size != self.grid.n_edges:
            raise GridMismatch(f"expected {self.grid.n_edges} edge values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("edge field has non-finite entries")
        object.__setattr__(self, "values", v)

    def inner(self, other: EdgeField) -> float:
        self.grid.check_same(other.grid)
        return self.grid.vol * float(self.values @ other.values)


@dataclass(frozen=True, eq=False)
class Potential:
    """Potential sampled on the cells, with its declared convexity modulus.

    ``lam`` is trusted, not verified.  ``value_fn``/``grad_fn`` are optional
    analytic callables used off-grid (particle simulation).
    """

    psi: np.ndarray
    lam: float
    grid: Grid
    value_fn: Callable | None = field(default=None, repr=False)
    grad_fn: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        psi = _readonly(self.psi).ravel()
        if psi.size != self.grid.size:
            raise GridMismatch(f"expected {self.grid.size} values, got {psi.size}")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "lam", float(self.lam))

    @cached_property
    def gibbs(self) -> np.ndarray:
        return _readonly(np.exp(-self.psi))

    @property
    def gibbs_mass(self) -> float:
        return float(self.gibbs.sum() * self.grid.vol)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, lam: float, grad: Callable | None = None):
        return cls(fn(grid.cell_centers), lam, grid, value_fn=fn, grad_fn=grad)


def quadratic_potential(grid: Grid, lam: float = 1.0, center=0.0) -> Potential:
    """Psi(x) = lam |x - center|^2 / 2; lam-convex with equality."""
    c = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))

    def value(x):
        return 0.5 * lam * np.sum((np.atleast_2d(x) - c) ** 2, axis=1)

    def grad(x):
        return lam * (np.atleast_2d(x) - c)

    return Potential.from_function(grid, value, lam, grad)


def double_well_potential(grid: Grid, a: float = 0.25, b: float = 0.5) -> Potential:
    """Psi(x) = a|x|^4 - b|x|^2, declared lam = -2b."""

    def value(x):
        r2 = np.sum(np.atleast_2d(x) ** 2, axis=1)
        return a * r2**2 - b * r2

    def grad(x):
        x = np.atleast_2d(x)
        r2 = np.sum(x**2, axis=1, keepdims=True)
        return (4 * a * r2 - 2 * b) * x

    return Potential.from_function(grid, value, -2.0 * b, grad)


def zero_potential(grid: Grid) -> Potential:
    return Potential.from_function(
        grid, lambda x: np.zeros(len(np.atleast_2d(x))), 0.0,
        lambda x: np.zeros_like(np.atleast_2d(x), dtype=float),
    )


def gibbs_density(pot: Potential) -> GridDensity:
    return GridDensity.from_values(pot.grid, pot.gibbs)


def gaussian_density(grid: Grid, mean, var) -> GridDensity:
    """Cell-integrated isotropic Gaussian N(mean, var I), renormalised to the box."""
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (grid.dim,))
    sd = np.sqrt(float(var))
    weights = None
    for k in range(grid.dim):
        z = (grid.axis_edges[k] - mean[k]) / sd
        # difference the lower or upper tail, whichever avoids cancellation
        lower = np.diff(ndtr(z))
        upper = -np.diff(ndtr(-z))
        w = np.where(z[1:] <= 0, lower, upper)
        weights = w if weights is None else np.multiply.outer(weights, w)
    return GridDensity.from_values(grid, weights.ravel())


def one_hot_density(grid: Grid, index: int) -> GridDensity:
    m = np.zeros(grid.size)
    m[index] = 1.0
    return GridDensity(m, grid)


def _as_cell_array(f, grid: Grid) -> np.ndarray:
    f = np.asarray(f, dtype=float).ravel()
    if f.size != grid.size:
        raise GridMismatch(f"expected {grid.size} cell values, got {f.size}")
    if not np.all(np.isfinite(f)):
        raise ValueError("cell field has non-finite entries")
    return f


def gradient(f, grid: Grid) -> EdgeField:
    """Forward difference (f_head - f_tail)/h on every interior edge."""
    return EdgeField(grid.gradient_matrix @ _as_cell_array(f, grid), grid)


def divergence(m: EdgeField, grid: Grid) -> GridSignedMeasure:
    """Net outflow per cell in mass units, the negative adjoint of ``gradient``."""
    grid.check_same(m.grid)
    return GridSignedMeasure(grid.divergence_matrix @ m.values, grid)


def edge_weights(rho: GridDensity) -> np.ndarray:
    """Edge density theta_e: arithmetic mean of adjacent cell densities."""
    return rho.grid.edge_average(rho.density)


def laplacian_from_weights(grid: Grid, theta: np.ndarray) -> sp.csr_matrix:
    """-div(theta * grad .) as a sparse matrix mapping functions to measures."""
    D = grid.gradient_matrix
    return (grid.vol * (D.T @ sp.diags(theta) @ D)).tocsr()


def weighted_laplacian(rho: GridDensity, grid: Grid | None = None) -> sp.csr_matrix:
    """L_rho f = -divergence(theta(rho) * gradient(f)), symmetric PSD.

    ``f^T L_rho f = vol * sum_e theta_e (grad f)_e^2`` discretises
    ``int |grad f|^2 drho``.
    """
    if grid is not None:
        grid.check_same(rho.grid)
    return laplacian_from_weights(rho.grid, edge_weights(rho))


def write_density_csv(path, rho: GridDensity) -> None:
    """Write ``cell, x[, y], mass`` rows."""
    grid = rho.grid
    names = ["x", "y"][: grid.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *names, "mass"])
        for i, (xc, mass) in enumerate(zip(grid.cell_centers, rho.masses)):
            w.writerow([i, *(repr(float(v)) for v in xc), repr(float(mass))])


def read_density_csv(path, grid: Grid) -> GridDensity:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    masses = np.zeros(grid.size)
    for row in rows:
        masses[int(row["cell"])] = float(row["mass"])
    if masses.min() >= 0 and abs(masses.sum() - 1.0) <= MASS_TOL:
        return GridDensity(masses, grid)  # exact round trip
    return GridDensity.from_values(grid, masses)


def stack_masses(densities: Sequence[GridDensity]) -> np.ndarray:
    grid = densities[0].grid
    for d in densities[1:]:
        grid.check_same(d.grid)
    return np.stack([d.masses for d in densities])
