"""Radial self-consistent solver for the Pekar variational problem.

The maximizer psi0 of ``H(psi^2) - 1/2 ||grad psi||^2`` over L2-normalized psi
solves ``(Delta + 4 Lambda psi0^2) psi0 = lambda psi0``.  In the l = 0 sector
with ``u = r psi`` this is the radial eigenproblem

    -u'' - 4 Lambda(r) u = -lambda u,   u(0) = u(r_max) = 0,

iterated to a fixed point with linear density mixing.  Radial integrals carry
the explicit ``4 pi r^2`` Jacobian so that all energies are the 3D ones.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal

from .numerics import RadialFunction, RadialGrid, cumulative_radial, make_grid

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
# psi_sigma ~ exp(-r^2 / (2 sigma^2)) has H = sqrt(2/pi)/sigma and I = 3/(4 sigma^2);
# the best member of that family sits at sigma = 1.5 sqrt(pi/2) with value 2/(3 pi)
GAUSSIAN_OPT_SIGMA = 1.5 * np.sqrt(np.pi / 2.0)
GAUSSIAN_TRIAL_BOUND = 2.0 / (3.0 * np.pi)


class EigenError(RuntimeError):
    pass


class ScfError(RuntimeError):
    def __init__(self, message, last_density=None, history=None):
        super().__init__(message)
        self.last_density = last_density
        self.history = history or []


@dataclass(frozen=True)
class ScfConfig:
    grid: RadialGrid = field(default_factory=make_grid)
    mixing: float = 0.5
    tol: float = 1e-10
    max_iter: int = 1000

    def __post_init__(self):
        if not 0.0 < self.mixing <= 1.0:
            raise ValueError(f"mixing must lie in (0, 1], got {self.mixing}")
        if not self.tol >= 1e-12:
            raise ValueError(f"tol must be at least 1e-12, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass(frozen=True, eq=False)
class PekarSolution:
    psi0: RadialFunction
    lam: float
    rho: float
    coulomb_energy: float
    dirichlet: float
    potential: RadialFunction
    drift: RadialFunction
    residual: float
    iterations: int = 0
    history: tuple = ()
    drift_cutoff: float = np.inf

    @property
    def grid(self) -> RadialGrid:
        return self.psi0.grid

    @property
    def virial_gap(self) -> float:
        return self.coulomb_energy - 2.0 * self.dirichlet

    @property
    def decay_rate(self) -> float:
        return float(np.sqrt(self.lam))

    def laplacian_ratio(self) -> RadialFunction:
        """Delta psi0 / psi0 through the Euler-Lagrange equation: lambda - 4 Lambda psi0^2."""
        return RadialFunction(self.grid, self.lam - 4.0 * self.potential.values)

    def summary(self) -> dict:
        return {
            "lambda": self.lam,
            "rho": self.rho,
            "H": self.coulomb_energy,
            "I": self.dirichlet,
            "residual": self.residual,
            "virial_gap": self.virial_gap,
            "lambda_over_rho": self.lam / self.rho,
            "iterations": self.iterations,
            "r_max": self.grid.r_max,
            "n": self.grid.n,
            "drift_cutoff": self.drift_cutoff,
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "solution.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        table = np.column_stack([self.grid.nodes, self.psi0.values, self.potential.values, self.drift.values])
        np.savetxt(out / "solution.csv", table, delimiter=",", header="r,psi0,potential,drift",
                   comments="", fmt="%.17g")

    @classmethod
    def load(cls, out_dir) -> "PekarSolution":
        out = Path(out_dir)
        meta = json.loads((out / "solution.json").read_text())
        table = np.loadtxt(out / "solution.csv", delimiter=",", skiprows=1)
        grid = make_grid(meta["r_max"], meta["n"])
        return cls(
            psi0=RadialFunction(grid, table[:, 1]),
            lam=meta["lambda"],
            rho=meta["rho"],
            coulomb_energy=meta["H"],
            dirichlet=meta["I"],
            potential=RadialFunction(grid, table[:, 2]),
            drift=RadialFunction(grid, table[:, 3]),
            residual=meta["residual"],
            iterations=meta.get("iterations", 0),
            drift_cutoff=meta.get("drift_cutoff", np.inf),
        )


def gaussian_psi(grid: RadialGrid, sigma: float) -> RadialFunction:
    """Normalized psi proportional to exp(-r^2 / (2 sigma^2))."""
    r = grid.nodes
    return RadialFunction(grid, (np.pi * sigma**2) ** -0.75 * np.exp(-0.5 * (r / sigma) ** 2))


def newton_potential(density: RadialFunction) -> RadialFunction:
    """Lambda rho(r) = (4 pi / r) int_0^r s^2 rho + 4 pi int_r^inf s rho for a radial density."""
    if np.any(density.values < 0):
        raise ValueError("density has negative values")
    inner = cumulative_radial(density, 2)
    outer_cum = cumulative_radial(density, 1)
    outer = outer_cum[-1] - outer_cum
    r = density.r
    return RadialFunction(density.grid, FOUR_PI * (inner / r + outer))


def _u(psi: RadialFunction) -> np.ndarray:
    return psi.r * psi.values


def ground_state(potential: RadialFunction) -> tuple[float, RadialFunction]:
    """Ground state of -Delta - W in the radial sector, W the attractive potential.

    Three-point finite differences for u = r psi with u(0) = 0 and u(r_max) = 0;
    the smallest eigenpair of the tridiagonal matrix is found by bisection
    followed by inverse iteration (LAPACK stebz/stein).  Returns the eigenvalue
    and psi normalized so that 4 pi int r^2 psi^2 dr = 1.
    """
    grid = potential.grid
    w = potential.values
    if np.any(w < 0):
        raise ValueError("potential must be nonnegative (attractive)")
    dr = grid.dr
    # unknowns: nodes 1..n-1; the node at r_max carries the Dirichlet condition
    diag = 2.0 / dr**2 - w[:-1]
    off = np.full(grid.n - 2, -1.0 / dr**2)
    try:
        vals, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(0, 0),
                                      lapack_driver="stebz")
    except LinAlgError as exc:
        raise EigenError(f"inverse iteration failed on n={grid.n}, dr={dr}: {exc}") from exc
    vec = vecs[:, 0]
    if not np.all(np.isfinite(vec)):
        raise EigenError(f"non-finite eigenvector (eigenvalue estimate {vals[0]})")
    vec = vec if vec.sum() > 0 else -vec
    u = np.concatenate((vec, [0.0]))
    u /= np.sqrt(FOUR_PI * dr * np.dot(u, u))
    # tiny negative tail values are round-off of an exponentially small eigenvector
    scale = np.abs(u).max()
    if np.any(u[:-1] < -1e-10 * scale):
        raise EigenError("ground state has a node; inverse iteration converged to an excited state")
    u[:-1] = np.maximum(u[:-1], 0.0)
    return float(vals[0]), RadialFunction(grid, u / grid.nodes)


def _dirichlet(u: np.ndarray, dr: float) -> float:
    du = np.diff(np.concatenate(([0.0], u)))
    return 0.5 * FOUR_PI * np.dot(du, du) / dr


def energy(psi: RadialFunction, potential: RadialFunction | None = None) -> tuple[float, float, float]:
    """(H, I, H - I) for normalized psi.

    Uses the same discrete Dirichlet form and node sums as ``ground_state`` so
    that the multiplier identity lambda = 4H - 2I holds to round-off.
    """
    dr = psi.grid.dr
    u = _u(psi)
    norm = FOUR_PI * dr * np.dot(u, u)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"psi is not normalized (4 pi int r^2 psi^2 = {norm})")
    if potential is None:
        potential = newton_potential(RadialFunction(psi.grid, psi.values**2))
    H = FOUR_PI * dr * np.dot(u * u, potential.values)
    I = _dirichlet(u, dr)
    return float(H), float(I), float(H - I)


def laplacian_ratio_direct(psi: RadialFunction) -> RadialFunction:
    """Delta psi / psi = u'' / u by the three-point stencil (u odd through the origin)."""
    u = _u(psi)
    dr = psi.grid.dr
    padded = np.concatenate(([0.0], u, [0.0]))
    d2 = (padded[:-2] - 2.0 * padded[1:-1] + padded[2:]) / dr**2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(u > 0, d2 / np.where(u > 0, u, 1.0), 0.0)
    return RadialFunction(psi.grid, ratio)


def el_residual(psi: RadialFunction, potential: RadialFunction, lam: float, rel_cut: float = 1e-6) -> float:
    """sup |Delta psi/psi + 4 Lambda psi^2 - lambda| where psi > rel_cut * psi(0)."""
    ratio = laplacian_ratio_direct(psi).values
    mask = psi.values > rel_cut * psi.values[0]
    return float(np.max(np.abs(ratio[mask] + 4.0 * potential.values[mask] - lam)))


def _drift(psi: RadialFunction, lam: float, rel_cut: float = 1e-10) -> tuple[RadialFunction, float]:
    """b = psi'/psi with a WKB tail -kappa + (2/kappa - 1)/r beyond the reliable region."""
    grid = psi.grid
    r = grid.nodes
    kappa = np.sqrt(lam)
    reliable = (psi.values > rel_cut * psi.values[0]) & (r < grid.r_max - 8.0 / kappa)
    cut = grid.n if reliable.all() else max(int(np.argmin(reliable)), 3)
    b = np.empty(grid.n)
    b[:cut] = np.gradient(np.log(psi.values[:cut]), grid.dr, edge_order=2)
    b[cut:] = -kappa + (2.0 / kappa - 1.0) / r[cut:]
    cutoff = float(r[cut - 1]) if cut < grid.n else np.inf
    return RadialFunction(grid, b), cutoff


def drift_profile(sol: PekarSolution) -> RadialFunction:
    return sol.drift


def scf_iterate(config: ScfConfig | None = None, init: RadialFunction | None = None) -> PekarSolution:
    """Fixed-point iteration rho <- (1 - a) rho + a psi_new^2 with psi_new the ground state of -Delta - 4 Lambda rho."""
    config = config or ScfConfig()
    grid = config.grid
    if init is None:
        init = gaussian_psi(grid, GAUSSIAN_OPT_SIGMA)
        density = init.values**2
    else:
        if init.grid.n != grid.n or init.grid.r_max != grid.r_max:
            raise ValueError("init lives on a different grid")
        density = np.array(init.values, dtype=float)
        if np.any(density < 0) or abs(RadialFunction(grid, density).mass() - 1.0) > 1e-6:
            raise ValueError("init must be a normalized density")
    density = density / (FOUR_PI * grid.dr * np.dot(grid.nodes**2, density))

    history = []
    for it in range(1, config.max_iter + 1):
        pot = newton_potential(RadialFunction(grid, density))
        e0, psi = ground_state(RadialFunction(grid, 4.0 * pot.values))
        new = psi.values**2
        change = float(np.max(np.abs(new - density)))
        H, I, value = energy(psi)
        history.append({"iter": it, "change": change, "lambda": -e0, "H": H, "I": I, "value": value})
        if change < config.tol:
            break
        density = (1.0 - config.mixing) * density + config.mixing * new
    else:
        raise ScfError(f"SCF did not converge in {config.max_iter} iterations (last change {change:.3e})",
                       last_density=RadialFunction(grid, density), history=history)

    lam = -e0
    potential = newton_potential(RadialFunction(grid, psi.values**2))
    H, I, value = energy(psi, potential)
    drift, cutoff = _drift(psi, lam)
    residual = el_residual(psi, potential, lam)
    log.info("SCF converged in %d iterations: lambda=%.10f rho=%.10f", it, lam, value)
    return PekarSolution(psi0=psi, lam=lam, rho=value, coulomb_energy=H, dirichlet=I,
                         potential=potential, drift=drift, residual=residual, iterations=it,
                         history=tuple(history), drift_cutoff=cutoff)


def solve(r_max: float = 20.0, n: int = 2000, tol: float = 1e-10, mixing: float = 0.5) -> PekarSolution:
    return scf_iterate(ScfConfig(grid=make_grid(r_max, n), mixing=mixing, tol=tol))
