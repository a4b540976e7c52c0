"""Pekar process dX = dW + (grad psi / psi)(X) dt and the identities around it.

The drift, log psi and Delta psi / psi are radial and are read from tables on
the solver grid by linear interpolation.  Beyond the table the Pekar tilt is
continued by its exponential tail: psi ~ r^(2/kappa - 1) exp(-kappa r), so
b(r) = -kappa + (2/kappa - 1)/r and Delta psi / psi = lambda - 4/r.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .coulomb import ShiftedDensity, cross_energy, radial_potential_at
from .numerics import RadialFunction, cumulative_radial, sample_isotropic
from .sampler import DiscretePath, midpoints, occupation_of
from .solver import PekarSolution, laplacian_ratio_direct

CHUNK = 65_536


class SdeBlowup(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Tilt:
    """Radial profile of a positive function psi: log psi, (log psi)' and Delta psi / psi.

    Tables start at r = 0 and are spaced by ``dr``; ``far`` holds (a0, a1, c0, c1)
    for b = a0 + a1/r and Delta psi / psi = c0 + c1/r beyond ``r_max``.
    """

    dr: float
    log_psi: np.ndarray
    drift: np.ndarray
    lap_ratio: np.ndarray
    far: tuple = (0.0, 0.0, 0.0, 0.0)
    lam: float = float("nan")
    potential: RadialFunction | None = field(default=None, repr=False)

    @property
    def r_max(self) -> float:
        return self.dr * (len(self.drift) - 1)

    @classmethod
    def from_solution(cls, sol: PekarSolution, lap_from_el: bool = True) -> "Tilt":
        grid = sol.grid
        r = grid.nodes
        kappa = sol.decay_rate
        a1 = 2.0 / kappa - 1.0
        log_psi = np.empty(grid.n)
        cut = sol.drift_cutoff
        inside = r <= cut
        log_psi[inside] = np.log(sol.psi0.values[inside])
        k = int(np.count_nonzero(inside)) - 1
        rc = r[k]
        log_psi[~inside] = log_psi[k] - kappa * (r[~inside] - rc) + a1 * np.log(r[~inside] / rc)
        lap = sol.laplacian_ratio() if lap_from_el else laplacian_ratio_direct(sol.psi0)
        return cls(
            dr=grid.dr,
            log_psi=_with_origin(log_psi),
            drift=np.concatenate(([0.0], sol.drift.values)),
            lap_ratio=_with_origin(lap.values),
            far=(-kappa, a1, sol.lam, -4.0),
            lam=sol.lam,
            potential=sol.potential,
        )

    @classmethod
    def gaussian(cls, sigma: float = 1.0, r_max: float = 20.0, n: int = 20000) -> "Tilt":
        """psi ~ exp(-r^2 / (2 sigma^2)): an Ornstein-Uhlenbeck drift -x / sigma^2."""
        r = np.linspace(0.0, r_max, n + 1)
        log_psi = -0.5 * (r / sigma) ** 2 - 0.75 * np.log(np.pi * sigma**2)
        return cls(dr=r_max / n, log_psi=log_psi, drift=-r / sigma**2,
                   lap_ratio=(r / sigma**2) ** 2 - 3.0 / sigma**2, far=(0.0, 0.0, 0.0, 0.0))

    @classmethod
    def flat(cls, r_max: float = 20.0, n: int = 2000) -> "Tilt":
        """psi constant: no drift, no tilt."""
        z = np.zeros(n + 1)
        return cls(dr=r_max / n, log_psi=z, drift=z.copy(), lap_ratio=z.copy())

    def radial_density(self, r: np.ndarray) -> np.ndarray:
        """Unnormalized 4 pi r^2 psi^2 at radii inside the table."""
        return 4.0 * np.pi * r**2 * np.exp(2.0 * _interp_vec(self.log_psi, self.dr, r))

    def stationary_bins(self, edges: np.ndarray) -> np.ndarray:
        """Mass of 4 pi r^2 psi^2 (normalized over the table) in each radial bin."""
        r = np.arange(len(self.log_psi)) * self.dr
        dens = 4.0 * np.pi * r**2 * np.exp(2.0 * (self.log_psi - self.log_psi.max()))
        cdf = np.concatenate(([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * self.dr)))
        cdf /= cdf[-1]
        return np.diff(np.interp(edges, r, cdf))

    def sample_stationary(self, size: int, rng) -> np.ndarray:
        r = np.arange(1, len(self.log_psi)) * self.dr
        from .numerics import make_grid

        grid = make_grid(self.r_max, len(r))
        pdf = RadialFunction(grid, r**2 * np.exp(2.0 * (self.log_psi[1:] - self.log_psi.max())))
        return sample_isotropic(pdf, size, rng)


def _with_origin(v: np.ndarray) -> np.ndarray:
    return np.concatenate(([3.0 * v[0] - 3.0 * v[1] + v[2]], v))


def _interp_vec(table: np.ndarray, dr: float, r: np.ndarray) -> np.ndarray:
    return np.interp(r, np.arange(len(table)) * dr, table)


# --- compiled kernels -------------------------------------------------------

@numba.njit(cache=True)
def _drift_at(table, dr, r, a0, a1):
    n = table.shape[0]
    if r < dr:
        return 0.0, False
    f = r / dr
    k = int(f)
    if k >= n - 1:
        return a0 + a1 / r, True
    a = f - k
    return (1.0 - a) * table[k] + a * table[k + 1], False


@numba.njit(cache=True)
def _em_chunk(x, noise, h, table, dr, a0, a1, counts, bin_w, stride, rec, rec_pos, step0, blow_r):
    """Advance x through len(noise) Euler-Maruyama steps, histogramming |x| before each step."""
    sq = np.sqrt(h)
    n_bins = counts.shape[0]
    far = 0
    for i in range(noise.shape[0]):
        r = np.sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])
        b = int(r / bin_w)
        if b < n_bins:
            counts[b] += 1
        else:
            counts[n_bins - 1] += 1
        if stride > 0 and (step0 + i) % stride == 0 and rec_pos < rec.shape[0]:
            rec[rec_pos, 0] = x[0]
            rec[rec_pos, 1] = x[1]
            rec[rec_pos, 2] = x[2]
            rec_pos += 1
        bv, is_far = _drift_at(table, dr, r, a0, a1)
        if is_far:
            far += 1
        if r > 0.0:
            s = bv * h / r
        else:
            s = 0.0
        x[0] = x[0] + s * x[0] + sq * noise[i, 0]
        x[1] = x[1] + s * x[1] + sq * noise[i, 1]
        x[2] = x[2] + s * x[2] + sq * noise[i, 2]
        if not (x[0] * x[0] + x[1] * x[1] + x[2] * x[2] <= blow_r * blow_r):
            return rec_pos, far, step0 + i + 1
    return rec_pos, far, -1


@numba.njit(cache=True)
def _em_paths(x0, noise, h, table, dr, a0, a1):
    """Many independent skeletons at once: noise has shape (paths, steps, 3)."""
    n_p, n_s = noise.shape[0], noise.shape[1]
    out = np.empty((n_p, n_s + 1, 3))
    sq = np.sqrt(h)
    for p in range(n_p):
        x0_, x1_, x2_ = x0[p, 0], x0[p, 1], x0[p, 2]
        out[p, 0, 0] = x0_
        out[p, 0, 1] = x1_
        out[p, 0, 2] = x2_
        for i in range(n_s):
            r = np.sqrt(x0_ * x0_ + x1_ * x1_ + x2_ * x2_)
            bv, _ = _drift_at(table, dr, r, a0, a1)
            s = bv * h / r if r > 0.0 else 0.0
            x0_ = x0_ + s * x0_ + sq * noise[p, i, 0]
            x1_ = x1_ + s * x1_ + sq * noise[p, i, 1]
            x2_ = x2_ + s * x2_ + sq * noise[p, i, 2]
            out[p, i + 1, 0] = x0_
            out[p, i + 1, 1] = x1_
            out[p, i + 1, 2] = x2_
    return out


# --- stepping and simulation ------------------------------------------------

def em_step(x, tilt: Tilt, h: float, rng=None, noise=None) -> tuple[np.ndarray, bool]:
    """x' = x + b(|x|) x/|x| h + sqrt(h) xi; returns (x', far-field flag)."""
    x = np.asarray(x, dtype=float)
    xi = rng.standard_normal(3) if noise is None else np.asarray(noise, dtype=float)
    r = float(np.linalg.norm(x))
    b, far = _drift_at(tilt.drift, tilt.dr, r, tilt.far[0], tilt.far[1])
    step = b * h / r * x if r > 0 else np.zeros(3)
    return x + step + np.sqrt(h) * xi, bool(far)


@dataclass(frozen=True)
class SdeConfig:
    T: float = 1e4
    h: float = 1e-3
    x0: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    n_bins: int = 40
    record_stride: int = 1000
    start: str = "point"

    def steps(self) -> int:
        n = int(round(self.T / self.h))
        if n < 0 or abs(n * self.h - self.T) > 1e-9 * max(self.T, 1.0):
            raise ValueError(f"T/h must be an integer, got T={self.T}, h={self.h}")
        return n

    def check_step(self, tilt: Tilt) -> None:
        if np.isfinite(tilt.lam) and self.h > 1e-2 / tilt.lam:
            raise ValueError(f"h={self.h} exceeds 1e-2 * (decay length)^2 = {1e-2 / tilt.lam:.3g}")


@dataclass(eq=False)
class Trajectory:
    positions: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    final: np.ndarray
    far_steps: int
    config: SdeConfig

    @property
    def samples(self) -> int:
        return int(self.counts.sum())

    def density(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def merged(self, other: "Trajectory") -> "Trajectory":
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("histograms use different bins")
        return Trajectory(np.concatenate([self.positions, other.positions]), self.counts + other.counts,
                          self.edges, other.final, self.far_steps + other.far_steps, self.config)

    def l1_error(self, tilt: Tilt) -> float:
        return float(np.abs(self.density() - tilt.stationary_bins(self.edges)).sum())

    def save(self, out_dir, tilt: Tilt | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        centers = 0.5 * (self.edges[1:] + self.edges[:-1])
        ref = tilt.stationary_bins(self.edges) if tilt is not None else np.full(len(centers), np.nan)
        np.savetxt(out / "sde_histogram.csv", np.column_stack([centers, self.counts, ref]), delimiter=",",
                   header="r_bin_center,count,reference_density", comments="", fmt="%.17g")
        summary = {"samples": self.samples, "far_steps": self.far_steps, "T": self.config.T,
                   "h": self.config.h, "seed": self.config.seed}
        if tilt is not None:
            summary.update(l1_error=self.l1_error(tilt), **({"lambda": tilt.lam} if np.isfinite(tilt.lam) else {}))
        (out / "sde_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def simulate(config: SdeConfig, tilt: Tilt) -> Trajectory:
    config.check_step(tilt)
    n = config.steps()
    rng = np.random.default_rng(config.seed)
    if config.start == "stationary":
        x = tilt.sample_stationary(1, rng)[0].copy()
    else:
        x = np.array(config.x0, dtype=float)
    edges = np.linspace(0.0, tilt.r_max, config.n_bins + 1)
    counts = np.zeros(config.n_bins, dtype=np.int64)
    stride = config.record_stride
    rec = np.empty((n // stride + 1 if stride > 0 else 0, 3))
    rec_pos, far, done = 0, 0, 0
    while done < n:
        k = min(CHUNK, n - done)
        noise = rng.standard_normal((k, 3))
        rec_pos, f, blow = _em_chunk(x, noise, config.h, tilt.drift, tilt.dr, tilt.far[0], tilt.far[1],
                                     counts, edges[1], stride, rec, rec_pos, done, 10.0 * tilt.r_max)
        far += f
        if blow >= 0:
            raise SdeBlowup(f"|X| exceeded {10 * tilt.r_max} at step {blow}")
        done += k
    r = np.linalg.norm(x)
    counts[min(int(r / edges[1]), config.n_bins - 1)] += 1
    if stride > 0 and n % stride == 0 and rec_pos < len(rec):
        rec[rec_pos] = x
        rec_pos += 1
    return Trajectory(rec[:rec_pos], counts, edges, x.copy(), far, config)


def simulate_paths(tilt: Tilt, t: float, h: float, n_paths: int, rng, x0=None) -> np.ndarray:
    """Independent Euler-Maruyama skeletons, shape (n_paths, t/h + 1, 3)."""
    steps = int(round(t / h))
    start = np.zeros((n_paths, 3)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (n_paths, 3)).copy()
    noise = rng.standard_normal((n_paths, steps, 3))
    return _em_paths(start, noise, h, tilt.drift, tilt.dr, tilt.far[0], tilt.far[1])


# --- weights and identities -------------------------------------------------

def _radii(path: DiscretePath, center, r_max: float) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(center, dtype=float)
    r_nodes = np.linalg.norm(path.positions - c, axis=1)
    r_mid = np.linalg.norm(midpoints(path.positions) - c, axis=1)
    worst = max(r_nodes.max(), r_mid.max())
    if worst > r_max:
        raise ValueError(f"path reaches radius {worst:.3f} from the centre, beyond the table (r_max={r_max})")
    return r_nodes, r_mid


def log_girsanov_weight(path: DiscretePath, tilt: Tilt, center=(0.0, 0.0, 0.0)) -> float:
    """log dP/dP^psi on the skeleton: log psi(W_0) - log psi(W_t) + 1/2 int Delta psi/psi (W_s) ds."""
    r_nodes, r_mid = _radii(path, center, tilt.r_max)
    lp = _interp_vec(tilt.log_psi, tilt.dr, r_nodes[[0, -1]])
    integral = path.h * np.sum(_interp_vec(tilt.lap_ratio, tilt.dr, r_mid))
    return float(lp[0] - lp[1] + 0.5 * integral)


def girsanov_weight(path: DiscretePath, tilt: Tilt, center=(0.0, 0.0, 0.0), reverse: bool = False) -> float:
    """dP/dP^psi for the psi-tilt centred at ``center``; ``reverse`` gives dP^psi/dP."""
    lw = log_girsanov_weight(path, tilt, center)
    w = np.exp(-lw if reverse else lw)
    if not (np.isfinite(w) and w > 0):
        raise ValueError(f"weight under/overflowed (log weight {lw})")
    return float(w)


def log_feynman_kac_weight(path: DiscretePath, sol: PekarSolution, center=(0.0, 0.0, 0.0)) -> float:
    """int_0^t (Lambda psi0^2)(W_s - center) ds by the midpoint-position rule."""
    q = midpoints(path.positions) - np.asarray(center, dtype=float)
    return float(path.h * np.sum(radial_potential_at(sol.potential, q)))


def feynman_kac_weight(path: DiscretePath, sol: PekarSolution, center=(0.0, 0.0, 0.0)) -> float:
    return float(np.exp(log_feynman_kac_weight(path, sol, center)))


def pathwise_el_check(path: DiscretePath, sol: PekarSolution, center=(0.0, 0.0, 0.0)) -> float:
    """|2 t0 <L_t0, Lambda psi_x^2> + 1/2 int Delta psi_x/psi_x (W_s) ds - lambda t0 / 2| / t0.

    The cross energy uses the occupation measure (segment midpoints); the
    Laplacian term uses psi0''s direct second difference, integrated by the
    trapezoid rule over the path nodes.  The two quadratures differ at O(h).
    """
    t0 = path.t
    c = np.asarray(center, dtype=float)
    r_nodes, _ = _radii(path, c, sol.grid.r_max)
    cross = cross_energy(occupation_of(path, 0.0), ShiftedDensity(sol.potential, c))
    direct = laplacian_ratio_direct(sol.psi0)
    vals = direct(r_nodes)
    lap_int = path.h * (np.sum(vals) - 0.5 * (vals[0] + vals[-1]))
    lhs = 2.0 * t0 * cross + 0.5 * lap_int
    return float(abs(lhs - 0.5 * sol.lam * t0) / t0)


def importance_check(sol_or_tilt, t: float, h: float, n_paths: int, seed: int = 0,
                     bump_center=(1.0, 0.0, 0.0), batch: int = 500) -> dict:
    """E_P[f(W_t)] two ways: Wiener endpoints directly, and Pekar paths reweighted by dP/dP^psi."""
    tilt = sol_or_tilt if isinstance(sol_or_tilt, Tilt) else Tilt.from_solution(sol_or_tilt)
    a = np.asarray(bump_center, dtype=float)

    def f(x):
        return np.exp(-0.5 * np.sum((x - a) ** 2, axis=-1))

    ss_w, ss_p = np.random.SeedSequence(seed).spawn(2)
    rng_w, rng_p = np.random.default_rng(ss_w), np.random.default_rng(ss_p)
    steps = int(round(t / h))
    wiener_end = np.sqrt(h) * rng_w.standard_normal((n_paths, steps, 3)).sum(axis=1) if n_paths * steps <= 4_000_000 \
        else np.concatenate([np.sqrt(h) * rng_w.standard_normal((min(batch, n_paths - k), steps, 3)).sum(axis=1)
                             for k in range(0, n_paths, batch)])
    fw = f(wiener_end)
    weighted = []
    for k in range(0, n_paths, batch):
        paths = simulate_paths(tilt, t, h, min(batch, n_paths - k), rng_p)
        for p in paths:
            path = DiscretePath(h, p)
            weighted.append(girsanov_weight(path, tilt) * f(p[-1]))
    weighted = np.asarray(weighted)
    diff = weighted.mean() - fw.mean()
    se = np.sqrt(weighted.var(ddof=1) / n_paths + fw.var(ddof=1) / n_paths)
    return {"wiener_mean": float(fw.mean()), "wiener_se": float(fw.std(ddof=1) / np.sqrt(n_paths)),
            "weighted_mean": float(weighted.mean()), "weighted_se": float(weighted.std(ddof=1) / np.sqrt(n_paths)),
            "z": float(diff / se), "n_paths": n_paths, "t": t, "h": h}


def stationarity_check(tilt: Tilt, T: float, h: float, n_paths: int, seed: int = 0, n_bins: int = 40) -> float:
    """Start n_paths from psi^2, run to T, return the L1 gap of the endpoint radial law to psi^2."""
    rng = np.random.default_rng(seed)
    start = tilt.sample_stationary(n_paths, rng)
    steps = int(round(T / h))
    ends = np.empty((n_paths, 3))
    for k in range(0, n_paths, 1000):
        sub = start[k:k + 1000]
        noise = rng.standard_normal((len(sub), steps, 3))
        ends[k:k + len(sub)] = _em_paths(sub, noise, h, tilt.drift, tilt.dr, tilt.far[0], tilt.far[1])[:, -1]
    edges = np.linspace(0.0, tilt.r_max, n_bins + 1)
    counts, _ = np.histogram(np.linalg.norm(ends, axis=1), bins=edges)
    return float(np.abs(counts / n_paths - tilt.stationary_bins(edges)).sum())


def endpoint_cdf_reference(tilt: Tilt) -> RadialFunction:
    """Cumulative radial mass of psi^2 on the table grid (for KS-type comparisons)."""
    from .numerics import make_grid

    n = len(tilt.log_psi) - 1
    grid = make_grid(tilt.r_max, n)
    dens = RadialFunction(grid, grid.nodes**2 * np.exp(2 * (tilt.log_psi[1:] - tilt.log_psi.max())))
    cdf = cumulative_radial(dens, 0)
    return RadialFunction(grid, cdf / cdf[-1])
