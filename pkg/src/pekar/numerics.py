"""Radial grids, quadrature, differentiation and interpolation.

Everything lives on a uniform grid ``r_i = i * dr`` for ``i = 1..n`` with
``dr = r_max / n``.  The origin is never stored; integrands are extended to
``r = 0`` by quadratic extrapolation (or by zero, for functions of the form
``u = r * psi``) when a quadrature needs it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator


class GridError(ValueError):
    pass


class ExtrapolationError(ValueError):
    pass


@dataclass(frozen=True)
class RadialGrid:
    r_max: float
    n: int
    nodes: np.ndarray = field(repr=False, compare=False)

    @property
    def dr(self) -> float:
        return self.r_max / self.n

    def __len__(self) -> int:
        return self.n


def make_grid(r_max: float = 20.0, n: int = 2000) -> RadialGrid:
    if not np.isfinite(r_max) or r_max <= 0:
        raise GridError(f"r_max must be positive, got {r_max}")
    if int(n) != n or n < 16:
        raise GridError(f"need at least 16 nodes, got {n}")
    n = int(n)
    nodes = r_max * np.arange(1, n + 1, dtype=float) / n
    nodes.setflags(write=False)
    return RadialGrid(float(r_max), n, nodes)


@dataclass(frozen=True, eq=False)
class RadialFunction:
    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("radial function has non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, grid: RadialGrid, func) -> "RadialFunction":
        return cls(grid, func(grid.nodes))

    @property
    def r(self) -> np.ndarray:
        return self.grid.nodes

    def __call__(self, r):
        return interpolate(self, r)

    def _spline(self) -> PchipInterpolator:
        spline = self.__dict__.get("_pchip")
        if spline is None:
            spline = PchipInterpolator(self.r, self.values, extrapolate=False)
            object.__setattr__(self, "_pchip", spline)
        return spline

    def mass(self) -> float:
        """3D mass 4*pi*int r^2 f dr of a density."""
        return 4.0 * np.pi * integrate_radial(self, 2)

    def is_density(self, atol: float = 1e-8) -> bool:
        return bool(np.all(self.values >= 0) and abs(self.mass() - 1.0) <= atol)

    def to_csv(self, path, header: str = "value") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["r", header])
            for r, v in zip(self.r, self.values):
                writer.writerow([repr(float(r)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "RadialFunction":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        r, v = data[:, 0], data[:, 1]
        grid = make_grid(float(r[-1]), len(r))
        if not np.allclose(grid.nodes, r, rtol=1e-12, atol=0):
            raise GridError("CSV radii are not a uniform grid starting at dr")
        return cls(grid, v)


def _simpson_weights(n_intervals: int, dx: float) -> np.ndarray:
    # composite Simpson on an even count, 3/8 rule on the last three intervals otherwise
    w = np.zeros(n_intervals + 1)
    if n_intervals % 2 == 0:
        w[0:-1:2] += 1.0
        w[1::2] += 4.0
        w[2::2] += 1.0
        return w * dx / 3.0
    m = n_intervals - 3
    if m > 0:
        w[0:m:2] += 1.0
        w[1:m:2] += 4.0
        w[2:m + 1:2] += 1.0
        w[: m + 1] *= 1.0 / 3.0
    tail = np.array([1.0, 3.0, 3.0, 1.0]) * 3.0 / 8.0
    w[m:] += tail
    return w * dx


def _with_origin(f: RadialFunction) -> tuple[np.ndarray, np.ndarray]:
    v = f.values
    # quadratic extrapolation to r = 0 from the first three nodes
    v0 = 3.0 * v[0] - 3.0 * v[1] + v[2]
    return np.concatenate(([0.0], f.r)), np.concatenate(([v0], v))


def integrate_radial(f: RadialFunction, power: int = 0) -> float:
    """int_0^{r_max} r^power f(r) dr by composite Simpson."""
    if power not in (0, 1, 2):
        raise ValueError(f"power must be 0, 1 or 2, got {power}")
    r, v = _with_origin(f)
    w = _simpson_weights(len(r) - 1, f.grid.dr)
    return float(np.dot(w, r**power * v))


def cumulative_radial(f: RadialFunction, power: int = 0) -> np.ndarray:
    """Running integral int_0^{r_i} s^power f(s) ds at every node."""
    r, v = _with_origin(f)
    return cumulative_simpson(r**power * v, dx=f.grid.dr, initial=0.0)[1:]


def radial_derivative(f: RadialFunction) -> RadialFunction:
    return RadialFunction(f.grid, np.gradient(f.values, f.grid.dr, edge_order=2))


def interpolate(f: RadialFunction, r):
    """Monotone cubic (PCHIP) interpolation.

    Inside the first cell, where there is no node to the left, the quadratic
    through the first three nodes is used instead.
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ExtrapolationError("negative radius")
    if np.any(r_arr > f.grid.r_max * (1 + 1e-12)):
        raise ExtrapolationError(f"radius beyond r_max={f.grid.r_max}")
    out = f._spline()(np.minimum(r_arr, f.grid.r_max))
    inner = r_arr < f.r[0]
    if np.any(inner):
        # Lagrange quadratic on nodes dr, 2dr, 3dr in units of dr
        x = r_arr / f.grid.dr
        v1, v2, v3 = f.values[:3]
        quad = (0.5 * (x - 2) * (x - 3) * v1 - (x - 1) * (x - 3) * v2
                + 0.5 * (x - 1) * (x - 2) * v3)
        out = np.where(inner, quad, out)
    return out if out.ndim else float(out)


def sample_radial(radial_pdf: RadialFunction, size: int, rng: np.random.Generator) -> np.ndarray:
    """Radii drawn by inverse CDF from an (unnormalized) density in r on the grid."""
    pdf = np.maximum(radial_pdf.values, 0.0)
    cdf = np.concatenate(([0.0], cumulative_radial(RadialFunction(radial_pdf.grid, pdf), 0)))
    cdf = np.maximum.accumulate(cdf)
    cdf /= cdf[-1]
    r = np.concatenate(([0.0], radial_pdf.r))
    return np.interp(rng.random(size), cdf, r)


def random_directions(size: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((size, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_isotropic(radial_pdf: RadialFunction, size: int, rng: np.random.Generator) -> np.ndarray:
    """3D points with the given radial law and uniform direction."""
    r = sample_radial(radial_pdf, size, rng)
    return r[:, None] * random_directions(size, rng)
