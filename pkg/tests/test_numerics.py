import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pekar.numerics import (ExtrapolationError, GridError, RadialFunction, cumulative_radial, integrate_radial,
                            interpolate, make_grid, radial_derivative, sample_isotropic, sample_radial)


def gauss(grid):
    return RadialFunction.from_callable(grid, lambda r: np.exp(-r**2))


def test_grid_layout():
    g = make_grid(10.0, 100)
    assert g.dr == pytest.approx(0.1)
    assert g.nodes[0] == pytest.approx(0.1) and g.nodes[-1] == 10.0
    assert len(g) == 100
    with pytest.raises(ValueError):
        g.nodes[0] = 1.0


@pytest.mark.parametrize("r_max,n", [(0.0, 100), (-1.0, 100), (np.inf, 100), (10.0, 8), (10.0, 20.5)])
def test_grid_rejects(r_max, n):
    with pytest.raises(GridError):
        make_grid(r_max, n)


def test_radial_function_validation():
    g = make_grid(5.0, 50)
    with pytest.raises(ValueError):
        RadialFunction(g, np.ones(49))
    with pytest.raises(ValueError):
        RadialFunction(g, np.full(50, np.nan))
    f = RadialFunction(g, np.ones(50))
    with pytest.raises(ValueError):
        f.values[0] = 2.0


@pytest.mark.parametrize("n", [2000, 2001])
def test_integrate_gaussian_moments(n):
    f = gauss(make_grid(20.0, n))
    assert integrate_radial(f, 0) == pytest.approx(np.sqrt(np.pi) / 2, abs=1e-8)
    assert integrate_radial(f, 1) == pytest.approx(0.5, abs=1e-8)
    assert integrate_radial(f, 2) == pytest.approx(np.sqrt(np.pi) / 4, abs=1e-8)
    assert f.mass() == pytest.approx(np.pi**1.5, rel=1e-8)


def test_integrate_rejects_power():
    with pytest.raises(ValueError):
        integrate_radial(gauss(make_grid(5.0, 50)), 3)


def test_cumulative_matches_closed_form():
    g = make_grid(10.0, 1000)
    f = gauss(g)
    exact = 0.25 * np.sqrt(np.pi) * __import__("scipy").special.erf(g.nodes) - 0.5 * g.nodes * np.exp(-g.nodes**2)
    assert np.max(np.abs(cumulative_radial(f, 2) - exact)) < 1e-8


def test_derivative_and_interpolation():
    g = make_grid(4.0, 400)
    f = RadialFunction.from_callable(g, np.sin)
    d = radial_derivative(f)
    assert np.max(np.abs(d.values - np.cos(g.nodes))) < 5e-5
    r = np.linspace(0.0, 4.0, 777)
    assert np.max(np.abs(interpolate(f, r) - np.sin(r))) < 1e-5
    assert f(0.0) == pytest.approx(0.0, abs=1e-6)


def test_interpolation_quadratic_exact_near_origin():
    g = make_grid(1.0, 100)
    f = RadialFunction.from_callable(g, lambda r: 1.0 + 2.0 * r - 3.0 * r**2)
    r = np.linspace(0.0, g.dr, 11)
    assert np.allclose(f(r), 1.0 + 2.0 * r - 3.0 * r**2, atol=1e-13)


def test_interpolation_rejects_outside():
    f = gauss(make_grid(5.0, 50))
    with pytest.raises(ExtrapolationError):
        f(-0.1)
    with pytest.raises(ExtrapolationError):
        f(5.5)


def test_csv_roundtrip(tmp_path):
    f = gauss(make_grid(5.0, 64))
    f.to_csv(tmp_path / "f.csv")
    back = RadialFunction.from_csv(tmp_path / "f.csv")
    assert np.array_equal(back.values, f.values)
    assert back.grid.r_max == f.grid.r_max and back.grid.n == f.grid.n


def test_sample_radial_matches_chi():
    # 4 pi r^2 exp(-r^2) is the radial law of a Gaussian with per-axis variance 1/2
    g = make_grid(10.0, 2000)
    pdf = RadialFunction.from_callable(g, lambda r: r**2 * np.exp(-r**2))
    r = sample_radial(pdf, 20_000, np.random.default_rng(1))
    assert stats.kstest(r, stats.chi(3, scale=np.sqrt(0.5)).cdf).pvalue > 1e-3
    x = sample_isotropic(pdf, 20_000, np.random.default_rng(2))
    assert stats.kstest(x[:, 0], stats.norm(scale=np.sqrt(0.5)).cdf).pvalue > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2))
def test_integration_is_linear(a, b, power):
    g = make_grid(8.0, 160)
    f = RadialFunction.from_callable(g, lambda r: np.exp(-r))
    h = RadialFunction.from_callable(g, lambda r: 1.0 / (1.0 + r**2))
    combo = RadialFunction(g, a * f.values + b * h.values)
    lhs = integrate_radial(combo, power)
    rhs = a * integrate_radial(f, power) + b * integrate_radial(h, power)
    assert lhs == pytest.approx(rhs, abs=1e-11 * (1 + abs(a) + abs(b)) * 64)
