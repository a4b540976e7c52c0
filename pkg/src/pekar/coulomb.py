"""Coulomb functionals of weighted point clouds.

The kernel is ``V_eta(x) = (|x|^2 + eta^2)^(-1/2)``.  With ``eta = 0`` it is the
bare ``1/|x|`` and self-pairs are excluded from double sums; with ``eta > 0``
every pair, the diagonal included, enters.  Pair sums use Neumaier-compensated
accumulation in a fixed row-major order, so results do not depend on how the
work is split.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .numerics import RadialFunction


class MeasureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OccupationMeasure:
    points: np.ndarray
    weights: np.ndarray
    softening: float = 0.0

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if len(pts) != len(w) or len(pts) == 0:
            raise MeasureError("points and weights must be non-empty and of equal length")
        if not np.all(np.isfinite(pts)):
            raise MeasureError("non-finite coordinates")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise MeasureError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if not 0.0 <= self.softening < 1.0:
            raise MeasureError(f"softening must lie in [0, 1), got {self.softening}")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points, softening: float = 0.0) -> "OccupationMeasure":
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(pts, np.full(len(pts), 1.0 / len(pts)), softening)

    def __len__(self) -> int:
        return len(self.points)

    def translated(self, v) -> "OccupationMeasure":
        return OccupationMeasure(self.points + np.asarray(v, dtype=float), self.weights, self.softening)

    def with_softening(self, eta: float) -> "OccupationMeasure":
        return OccupationMeasure(self.points, self.weights, eta)

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z", "w"])
            for (x, y, z), w in zip(self.points, self.weights):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(w))])
        path.with_suffix(".json").write_text(json.dumps({"softening": self.softening, "n": len(self)}))

    @classmethod
    def from_csv(cls, path) -> "OccupationMeasure":
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        sidecar = path.with_suffix(".json")
        eta = json.loads(sidecar.read_text())["softening"] if sidecar.exists() else 0.0
        w = data[:, 3] / data[:, 3].sum()
        return cls(data[:, :3], w, eta)


@dataclass(frozen=True)
class ShiftedDensity:
    """Radial density centred at ``center``, carried by its Newton potential."""

    potential: RadialFunction
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mass: float = 1.0

    def __call__(self, x) -> np.ndarray:
        return radial_potential_at(self.potential, np.asarray(x, dtype=float) - self.center, self.mass)


def radial_potential_at(potential: RadialFunction, x: np.ndarray, mass: float = 1.0) -> np.ndarray:
    """Evaluate a radial potential at 3D points, continuing as mass/r beyond the grid."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x.reshape(-1, 3), axis=1)
    out = np.empty_like(r)
    inside = r <= potential.grid.r_max
    out[inside] = potential(r[inside])
    out[~inside] = mass / r[~inside]
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else out[0]


# --- compiled kernels -------------------------------------------------------

@numba.njit(cache=True)
def _kernel(dx, dy, dz, eta2):
    return 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz + eta2)


@numba.njit(cache=True)
def _row_potentials(src, w, targets, eta, skip_self):
    """phi_i = sum_j w_j V(targets_i - src_j); compensated, fixed order."""
    n_t = targets.shape[0]
    n_s = src.shape[0]
    eta2 = eta * eta
    out = np.empty(n_t)
    for i in range(n_t):
        s = 0.0
        c = 0.0
        tx, ty, tz = targets[i, 0], targets[i, 1], targets[i, 2]
        for j in range(n_s):
            if skip_self and i == j:
                continue
            term = w[j] * _kernel(tx - src[j, 0], ty - src[j, 1], tz - src[j, 2], eta2)
            t = s + term
            if abs(s) >= abs(term):
                c += (s - t) + term
            else:
                c += (term - t) + s
            s = t
        out[i] = s + c
    return out


@numba.njit(cache=True)
def _compensated_dot(a, b):
    s = 0.0
    c = 0.0
    for i in range(a.shape[0]):
        term = a[i] * b[i]
        t = s + term
        if abs(s) >= abs(term):
            c += (s - t) + term
        else:
            c += (term - t) + s
        s = t
    return s + c


@numba.njit(cache=True)
def _orbit_sups(grid_pts, lam_mu, candidates, table, dr, r_max):
    """sup_x |Lambda mu(x) - P(|x - w|)| for each candidate w; P linear in ``table`` (node 0 at r=0)."""
    n_c = candidates.shape[0]
    out = np.empty(n_c)
    n_tab = table.shape[0]
    for c in range(n_c):
        wx, wy, wz = candidates[c, 0], candidates[c, 1], candidates[c, 2]
        best = 0.0
        for g in range(grid_pts.shape[0]):
            dx = grid_pts[g, 0] - wx
            dy = grid_pts[g, 1] - wy
            dz = grid_pts[g, 2] - wz
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            if r >= r_max:
                p = 1.0 / r
            else:
                f = r / dr
                k = int(f)
                if k >= n_tab - 1:
                    k = n_tab - 2
                a = f - k
                p = (1.0 - a) * table[k] + a * table[k + 1]
            d = abs(lam_mu[g] - p)
            if d > best:
                best = d
        out[c] = best
    return out


# --- functionals ------------------------------------------------------------

def lambda_at(mu: OccupationMeasure, x) -> np.ndarray | float:
    """Lambda mu(x) = sum_i w_i V_eta(x - p_i)."""
    x = np.asarray(x, dtype=float)
    targets = np.ascontiguousarray(x.reshape(-1, 3))
    with np.errstate(divide="ignore"):
        vals = _row_potentials(mu.points, mu.weights, targets, mu.softening, False)
    return vals.reshape(x.shape[:-1]) if x.ndim > 1 else float(vals[0])


def _check_collisions(points: np.ndarray) -> None:
    _, idx, counts = np.unique(points, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = points[idx[counts > 1][0]]
        where = np.flatnonzero(np.all(points == dup, axis=1))
        raise MeasureError(f"coincident points at indices {where.tolist()} with eta = 0")


def hamiltonian(mu: OccupationMeasure) -> float:
    """H(mu) = <mu, Lambda mu>; self-pairs dropped when eta = 0."""
    skip = mu.softening == 0.0
    if skip:
        _check_collisions(mu.points)
    phi = _row_potentials(mu.points, mu.weights, mu.points, mu.softening, skip)
    return float(_compensated_dot(mu.weights, phi))


def cross_energy(mu: OccupationMeasure, nu) -> float:
    """<mu, Lambda nu> for a second point cloud or a ShiftedDensity.

    Two point clouds are paired with the larger of their softenings, which
    keeps the value symmetric in the arguments.
    """
    if isinstance(nu, ShiftedDensity):
        return float(_compensated_dot(mu.weights, np.atleast_1d(nu(mu.points))))
    eta = max(mu.softening, nu.softening)
    phi = _row_potentials(nu.points, nu.weights, mu.points, eta, False)
    return float(_compensated_dot(mu.weights, phi))


def hamiltonian_oracle(mu: OccupationMeasure) -> float:
    """Plain double loop with exactly rounded accumulation; for cross-checking only."""
    import math

    pts = mu.points.tolist()
    w = mu.weights.tolist()
    eta2 = mu.softening**2
    terms = []
    for i, (pi, wi) in enumerate(zip(pts, w)):
        for j, (pj, wj) in enumerate(zip(pts, w)):
            if i == j and eta2 == 0.0:
                continue
            d2 = (pi[0] - pj[0]) ** 2 + (pi[1] - pj[1]) ** 2 + (pi[2] - pj[2]) ** 2
            terms.append(wi * wj / math.sqrt(d2 + eta2))
    return math.fsum(terms)


# --- shift search -----------------------------------------------------------

@dataclass(frozen=True)
class EvalGrid:
    center: np.ndarray
    half_extent: np.ndarray
    spacing: float

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "half_extent", np.broadcast_to(
            np.asarray(self.half_extent, dtype=float), (3,)).copy())

    @classmethod
    def covering(cls, mu: OccupationMeasure, center=None, margin: float = 3.0,
                 spacing: float = 0.5, budget: int = 27_000) -> "EvalGrid":
        center = _weighted_median(mu) if center is None else np.asarray(center, dtype=float)
        half = np.max(np.abs(mu.points - center), axis=0) + margin
        per_axis = lambda s: np.floor(half / s).astype(int) * 2 + 1  # noqa: E731
        while np.prod(per_axis(spacing)) > budget:
            spacing *= 1.1
        return cls(center, half, spacing)

    def axes(self) -> list[np.ndarray]:
        out = []
        for c, h in zip(self.center, self.half_extent):
            k = int(np.floor(h / self.spacing))
            out.append(c + self.spacing * np.arange(-k, k + 1))
        return out

    def points(self) -> np.ndarray:
        xs, ys, zs = np.meshgrid(*self.axes(), indexing="ij")
        return np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])

    def covers(self, mu: OccupationMeasure, margin: float) -> bool:
        lo = mu.points.min(axis=0) - margin
        hi = mu.points.max(axis=0) + margin
        span = self.half_extent + 1e-9
        return bool(np.all(self.center - span <= lo) and np.all(self.center + span >= hi))


@dataclass(frozen=True)
class ShiftResult:
    dist: float
    best_shift: np.ndarray
    candidates: np.ndarray = field(repr=False)
    sups: np.ndarray = field(repr=False)

    def near_minimal(self, rel: float = 1e-3) -> np.ndarray:
        keep = self.sups <= self.dist * (1.0 + rel)
        return self.candidates[keep]


def _weighted_median(mu: OccupationMeasure) -> np.ndarray:
    out = np.empty(3)
    for k in range(3):
        order = np.argsort(mu.points[:, k], kind="stable")
        cw = np.cumsum(mu.weights[order])
        out[k] = mu.points[order[np.searchsorted(cw, 0.5)], k]
    return out


def _table(potential: RadialFunction) -> np.ndarray:
    v = potential.values
    return np.concatenate(([3.0 * v[0] - 3.0 * v[1] + v[2]], v))


def _argmin_lex(sups: np.ndarray, candidates: np.ndarray) -> int:
    best = sups.min()
    tied = np.flatnonzero(sups == best)
    if len(tied) == 1:
        return int(tied[0])
    sub = candidates[tied]
    return int(tied[np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))[0]])


def shift_lattice(center, spacing: float, half_width: int) -> np.ndarray:
    k = np.arange(-half_width, half_width + 1) * spacing
    xs, ys, zs = np.meshgrid(k, k, k, indexing="ij")
    return np.asarray(center, dtype=float) + np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])


def orbit_sup_distance(mu: OccupationMeasure, sol, grid: EvalGrid, shift_candidates,
                       margin: float = 3.0, _lam_mu=None, _pts=None) -> ShiftResult:
    """min over candidate shifts w of max over the grid of |Lambda mu - Lambda psi_w^2|."""
    cands = np.ascontiguousarray(np.asarray(shift_candidates, dtype=float).reshape(-1, 3))
    if len(cands) == 0:
        raise ValueError("empty shift candidate set")
    if not grid.covers(mu, margin):
        raise ValueError(f"evaluation grid does not cover the measure support plus margin {margin}")
    pts = grid.points() if _pts is None else _pts
    lam_mu = lambda_at(mu, pts) if _lam_mu is None else _lam_mu
    pot = sol.potential
    sups = _orbit_sups(pts, lam_mu, cands, _table(pot), pot.grid.dr, pot.grid.r_max)
    i = _argmin_lex(sups, cands)
    return ShiftResult(float(sups[i]), cands[i].copy(), cands, sups)


def shift_search(mu: OccupationMeasure, sol, spacing: float = 0.5, coarse: float = 1.0,
                 half_width: int = 3, levels: int = 2, budget: int = 27_000) -> ShiftResult:
    """Coarse lattice of shifts around the weighted median, then ``levels`` 3x3x3 refinements.

    The evaluation grid and every lattice are laid out relative to the median,
    so translating ``mu`` translates the answer.
    """
    center = _weighted_median(mu)
    grid = EvalGrid.covering(mu, center=center, spacing=spacing, budget=budget)
    pts = grid.points()
    lam_mu = lambda_at(mu, pts)
    res = orbit_sup_distance(mu, sol, grid, shift_lattice(center, coarse, half_width), _lam_mu=lam_mu, _pts=pts)
    step = coarse
    for _ in range(levels):
        step /= 2.0
        res = orbit_sup_distance(mu, sol, grid, shift_lattice(res.best_shift, step, 1), _lam_mu=lam_mu, _pts=pts)
    return res


def best_shift(mu: OccupationMeasure, sol, **kwargs) -> np.ndarray:
    return shift_search(mu, sol, **kwargs).best_shift


def marginal_w1(mu: OccupationMeasure, reference_points: np.ndarray) -> np.ndarray:
    """Per-axis Wasserstein-1 distance between mu and an equally weighted reference sample."""
    from scipy.stats import wasserstein_distance

    return np.array([wasserstein_distance(mu.points[:, k], reference_points[:, k], u_weights=mu.weights)
                     for k in range(3)])


def split_blocks(mu: OccupationMeasure, t0: float, t: float) -> tuple[OccupationMeasure, OccupationMeasure]:
    """Split a time-ordered, equally weighted L_t into L_{t0} and L_{t0,t}."""
    n = len(mu)
    n0 = int(round(n * t0 / t))
    if not 0 < n0 < n or abs(n0 * t / n - t0) > 1e-9 * t:
        raise ValueError(f"t0={t0} does not fall on a segment boundary of {n} segments over t={t}")
    head = OccupationMeasure.uniform(mu.points[:n0], mu.softening)
    tail = OccupationMeasure.uniform(mu.points[n0:], mu.softening)
    return head, tail


def splitting_check(mu: OccupationMeasure, t0: float, t: float) -> float:
    """|t H(L_t) - [t0^2/t H(L_t0) + 2 t0(t-t0)/t <L_t0, Lambda_t0,t> + (t-t0)^2/t H(L_t0,t)]|."""
    if not 0 < t0 < t:
        raise ValueError(f"need 0 < t0 < t, got t0={t0}, t={t}")
    if mu.softening <= 0:
        raise ValueError("splitting check needs eta > 0 so that every term shares one kernel")
    head, tail = split_blocks(mu, t0, t)
    lhs = t * hamiltonian(mu)
    rhs = (t0**2 / t * hamiltonian(head) + 2.0 * t0 * (t - t0) / t * cross_energy(head, tail)
           + (t - t0) ** 2 / t * hamiltonian(tail))
    return abs(lhs - rhs)


def pair_energy_stderr(mu: OccupationMeasure) -> float:
    """Standard error of H(mu) read as a U-statistic of i.i.d. points (equal weights)."""
    n = len(mu)
    phi = _row_potentials(mu.points, np.full(n, 1.0 / (n - 1)), mu.points, mu.softening, mu.softening == 0.0)
    return float(2.0 * np.std(phi, ddof=1) / np.sqrt(n))
