import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polytherm.grid import (
    TWO_PI,
    Grid,
    TimeWindow,
    catalog_by_name,
    curl_constraint_residual,
    deformation_gradient,
    div,
    grad,
    integrate,
    lp_norm,
    mollify,
    pair,
    partial,
    read_snapshot,
    test_catalog,
    time_integrate,
    write_snapshot,
)


def smooth_scalar(grid):
    x1, x2, x3 = grid.coords()
    return np.sin(TWO_PI * x1) * np.cos(TWO_PI * 2 * x2) + 0.3 * np.cos(TWO_PI * x3)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid((3, 8, 8))
    with pytest.raises(ValueError):
        Grid((8, 8))
    assert Grid.line(8).mode == 1
    assert Grid.cube(8).mode == 3
    assert Grid((8, 4, 4)).cell_volume == pytest.approx(1 / 128)


@pytest.mark.parametrize("n", [8, 16, 32])
def test_centered_difference_symbol(n):
    # eigenvalue of the centered difference on e^{2 pi i k x}: i sin(2 pi k h) / h
    grid = Grid.line(n)
    x = grid.coords()[0]
    for k in (1, 2, 3):
        d = partial(np.sin(TWO_PI * k * x), 0, grid)
        expected = math.sin(TWO_PI * k / n) * n * np.cos(TWO_PI * k * x)
        np.testing.assert_allclose(d, expected, atol=1e-10)


def test_gradient_matches_fft_oracle():
    grid = Grid((16, 8, 12))
    f = smooth_scalar(grid)
    g = grad(f, grid)
    for axis, n in enumerate(grid.dims):
        k = np.fft.fftfreq(n, 1.0 / n)
        symbol = 1j * np.sin(TWO_PI * k / n) * n
        shape = [1, 1, 1]
        shape[axis] = n
        oracle = np.fft.ifft(np.fft.fft(f, axis=axis) * symbol.reshape(shape), axis=axis).real
        np.testing.assert_allclose(g[..., axis], oracle, atol=1e-10)


def test_line_grid_has_no_transverse_derivatives():
    grid = Grid.line(16)
    f = smooth_scalar(grid)
    g = grad(f, grid)
    assert np.all(g[..., 1:] == 0.0)


def test_divergence_is_negative_adjoint_of_gradient(rng):
    grid = Grid((8, 6, 4))
    f = rng.standard_normal(grid.dims)
    q = rng.standard_normal(grid.dims + (3,))
    lhs = integrate(np.sum(grad(f, grid) * q, axis=-1), grid)
    rhs = -integrate(f * div(q, grid), grid)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_discrete_gradient_is_curl_free(rng):
    grid = Grid.cube(8)
    u = rng.standard_normal(grid.dims + (3,))
    F = deformation_gradient(u, grid)
    assert curl_constraint_residual(F, grid) <= 1e-12


def test_mollifier_preserves_mean_and_commutes_with_gradient():
    grid = Grid.cube(16)
    f = smooth_scalar(grid) + np.where(grid.coords()[0] < 0.5, 1.0, 0.0)
    smooth = mollify(f, grid, 0.2)
    assert integrate(smooth, grid) == pytest.approx(integrate(f, grid), abs=1e-13)
    np.testing.assert_allclose(grad(smooth, grid), mollify(grad(f, grid), grid, 0.2), atol=1e-12)
    with pytest.raises(ValueError):
        mollify(f, grid, 0.05)


def test_lp_norm_ordering_on_unit_torus():
    grid = Grid.cube(8)
    f = smooth_scalar(grid)
    assert lp_norm(f, grid, 1) <= lp_norm(f, grid, 2) + 1e-14
    assert lp_norm(f, grid, 2) <= lp_norm(f, grid, math.inf) + 1e-14
    assert lp_norm(np.ones(grid.dims), grid, 4) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        lp_norm(f, grid, 0.5)


def test_catalog_has_twelve_functions_with_consistent_gradients():
    catalog = test_catalog()
    assert len(catalog) == 12
    assert len({t.name for t in catalog}) == 12
    grid = Grid.cube(32)
    for test in catalog:
        phi, dphi = test.sample(grid)
        fd = grad(phi, grid)
        # centered differences of a smooth profile: second-order agreement
        assert np.abs(fd - dphi).max() <= 0.05 * (1.0 + np.abs(dphi).max()), test.name


def test_constant_test_function_pairing_is_integral():
    grid = Grid.cube(8)
    f = smooth_scalar(grid) + 2.0
    assert pair(f, grid, catalog_by_name("one")) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(KeyError):
        catalog_by_name("missing")


def test_time_window_vanishes_at_ends():
    w = TimeWindow(0.0, 2.0)
    assert w.value(0.0) == 0.0
    assert w.value(2.0) == pytest.approx(0.0, abs=1e-30)
    assert w.derivative(0.0) == 0.0
    assert w.value(1.0) == pytest.approx(1.0)
    t = np.linspace(0, 2, 401)
    assert time_integrate(w.derivative(t), t) == pytest.approx(0.0, abs=1e-12)


@given(st.integers(4, 9), st.integers(1, 3), st.floats(-10, 10))
def test_trapezoid_exact_for_linear_functions(n, slope, t0):
    times = np.linspace(t0, t0 + 1.0, n)
    values = slope * times
    assert time_integrate(values, times) == pytest.approx(slope * (t0 + 0.5), abs=1e-10)


def test_snapshot_roundtrip_and_header(tmp_path):
    grid = Grid((4, 5, 6))
    values = np.random.default_rng(3).standard_normal(grid.dims + (7,))
    path = tmp_path / "s.ptf"
    write_snapshot(path, values, grid, 0.125)
    data = path.read_bytes()
    assert data[:6] == b"PTFLD1"
    back, g, t = read_snapshot(path)
    assert g == grid and t == 0.125
    np.testing.assert_array_equal(back, values)
    path.write_bytes(b"BADHDR" + data[6:])
    with pytest.raises(ValueError):
        read_snapshot(path)
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        read_snapshot(path)
