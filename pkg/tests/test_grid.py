from __future__ import annotations

import numpy as np
import pytest

from ldpflow.errors import GridMismatch
from ldpflow.grid import (
    EdgeField,
    Grid,
    GridDensity,
    GridSignedMeasure,
    divergence,
    gaussian_density,
    gradient,
    one_hot_density,
    read_density_csv,
    weighted_laplacian,
    write_density_csv,
)


def test_grid_geometry_1d_and_2d():
    g = Grid.regular(-1.0, 1.0, 4)
    assert g.dim == 1 and g.size == 4 and g.n_edges == 3
    assert np.allclose(g.h, [0.5]) and g.vol == pytest.approx(0.5)
    assert np.allclose(g.cell_centers[:, 0], [-0.75, -0.25, 0.25, 0.75])
    g2 = Grid.regular([0, 0], [3, 2], [3, 2])
    assert g2.size == 6 and g2.n_edges == 2 * 2 + 3 * 1
    assert g2.vol == pytest.approx(1.0)


def test_invalid_grids_rejected():
    with pytest.raises(ValueError):
        Grid.regular(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        Grid.regular([0, 0, 0], [1, 1, 1], [2, 2, 2])


def test_density_validation():
    g = Grid.regular(0, 1, 3)
    with pytest.raises(ValueError):
        GridDensity(np.array([0.5, 0.5, 0.5]), g)
    with pytest.raises(ValueError):
        GridDensity(np.array([1.5, -0.5, 0.0]), g)
    with pytest.raises(GridMismatch):
        GridDensity(np.array([0.5, 0.5]), g)
    with pytest.raises(ValueError):
        GridSignedMeasure(np.array([1.0, 0.0, 0.0]), g)
    rho = GridDensity.from_values(g, [1, 2, 1])
    assert rho.masses.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        rho.masses[0] = 0.3  # immutable


def test_grid_mismatch_detected():
    a = one_hot_density(Grid.regular(0, 1, 3), 0)
    with pytest.raises(GridMismatch):
        gradient(np.zeros(3), Grid.regular(0, 1, 4))
    with pytest.raises(GridMismatch):
        GridSignedMeasure.difference(a, one_hot_density(Grid.regular(0, 2, 3), 0))


def test_gradient_hand_values():
    g = Grid.regular(0.0, 2.0, 4)  # h = 0.5
    f = np.array([1.0, 3.0, 2.0, 2.5])
    assert np.allclose(gradient(f, g).values, [4.0, -2.0, 1.0], atol=1e-15)
    assert np.allclose(gradient(np.full(4, 7.0), g).values, 0.0)


def test_divergence_unit_edge_flow():
    g = Grid.regular(0.0, 3.0, 3)  # h = vol = 1
    div = divergence(EdgeField(np.array([1.0, 0.0]), g), g).values
    assert np.allclose(div, [1.0, -1.0, 0.0])
    g = Grid.regular(0.0, 1.5, 3)  # h = vol = 0.5: vol/h = 1
    div = divergence(EdgeField(np.array([1.0, 0.0]), g), g).values
    assert np.allclose(div, [1.0, -1.0, 0.0])
    assert np.allclose(divergence(EdgeField(np.zeros(2), g), g).values, 0.0)


@pytest.mark.parametrize("shape", [(7,), (64,), (5, 9), (64, 64)])
def test_gradient_divergence_adjoint(shape, rng_factory):
    rng = rng_factory(1)
    g = Grid.regular([0.0] * len(shape), [1.3] * len(shape), list(shape))
    f = rng.standard_normal(g.size)
    m = EdgeField(rng.standard_normal(g.n_edges), g)
    lhs = gradient(f, g).inner(m)
    rhs = -float(f @ divergence(m, g).values)
    assert abs(lhs - rhs) <= 1e-13 * max(1.0, abs(lhs)) * np.sqrt(g.size)
    assert abs(divergence(m, g).values.sum()) <= 1e-12


def test_weighted_laplacian_hand_assembly():
    g = Grid.regular(0.0, 3.0, 3)
    rho = GridDensity(np.array([0.5, 0.25, 0.25]), g)
    t1, t2 = 0.375, 0.25
    expected = np.array([[t1, -t1, 0.0], [-t1, t1 + t2, -t2], [0.0, -t2, t2]])
    L = weighted_laplacian(rho).toarray()
    assert np.allclose(L, expected, atol=1e-15)


def test_weighted_laplacian_uniform_and_kernel(rng_factory):
    rng = rng_factory(2)
    g = Grid.regular([0, 0], [1, 2], [6, 5])
    uniform = GridDensity(np.full(g.size, 1.0 / g.size), g)
    L = weighted_laplacian(uniform).toarray()
    D = g.gradient_matrix.toarray()
    assert np.allclose(L, g.vol * uniform.density[0] * D.T @ D)
    rho = GridDensity.from_values(g, rng.uniform(0.1, 1, g.size))
    L = weighted_laplacian(rho)
    assert np.abs(L @ np.ones(g.size)).max() <= 1e-13
    dense = L.toarray()
    assert np.allclose(dense, dense.T)
    eig = np.linalg.eigvalsh(dense)
    assert eig[0] > -1e-12 and eig[1] > 1e-8  # kernel is exactly the constants


def test_gaussian_density_moments():
    g = Grid.regular(-8.0, 8.0, 512)
    rho = gaussian_density(g, 0.7, 0.4)
    assert rho.mean()[0] == pytest.approx(0.7, abs=1e-6)
    # binning plus the histogram reading each add h^2/12 (Sheppard)
    assert rho.variance() == pytest.approx(0.4 + g.h[0] ** 2 / 6, abs=1e-7)
    assert rho.masses.min() >= 0.0


def test_density_csv_roundtrip(tmp_path):
    g = Grid.regular([0, 0], [1, 1], [4, 3])
    rho = GridDensity.from_values(g, np.arange(1, 13))
    path = tmp_path / "rho.csv"
    write_density_csv(path, rho)
    assert path.read_text().splitlines()[0] == "cell,x,y,mass"
    back = read_density_csv(path, g)
    assert np.array_equal(back.masses, rho.masses)
