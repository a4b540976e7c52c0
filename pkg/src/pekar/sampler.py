"""Metropolis sampler for the mean-field path measure exp{beta t H(L_t)} dP.

Paths are skeletons ``W_0, W_h, ..., W_{mh}``; the occupation measure puts
weight ``1/m`` on each segment midpoint and the Coulomb kernel is softened
with ``eta = eta_scale * sqrt(h)`` (diagonal kept).  All proposals are
reversible with respect to the discrete Wiener measure, so the acceptance
probability is ``min(1, exp(beta t (H' - H)))``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .coulomb import OccupationMeasure, hamiltonian, shift_search

log = logging.getLogger(__name__)

MOVES = ("bridge", "end", "start", "shift")


class CacheError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DiscretePath:
    h: float
    positions: np.ndarray
    origin_start: bool = True

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        if len(pos) < 2:
            raise ValueError("a path needs at least one step")
        if not self.h > 0:
            raise ValueError("time step must be positive")
        if self.origin_start and np.any(pos[0] != 0.0):
            raise ValueError("origin-start path must begin at the origin")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def m(self) -> int:
        return len(self.positions) - 1

    @property
    def t(self) -> float:
        return self.m * self.h

    @property
    def endpoint(self) -> np.ndarray:
        return self.positions[-1]

    def translated(self, v) -> "DiscretePath":
        return DiscretePath(self.h, self.positions + np.asarray(v, dtype=float), origin_start=False)

    def head(self, k: int) -> "DiscretePath":
        return DiscretePath(self.h, self.positions[: k + 1], self.origin_start)


def default_softening(h: float, scale: float = 0.1) -> float:
    return scale * np.sqrt(h)


def steps_for(t: float, h: float) -> int:
    m = int(round(t / h))
    if m < 1 or abs(m * h - t) > 1e-9 * max(t, 1.0):
        raise ValueError(f"t/h must be a positive integer, got t={t}, h={h}")
    return m


def sample_wiener(t: float, h: float, seed=None, start=None) -> DiscretePath:
    m = steps_for(t, h)
    rng = np.random.default_rng(seed)
    pos = np.zeros((m + 1, 3))
    pos[1:] = np.cumsum(np.sqrt(h) * rng.standard_normal((m, 3)), axis=0)
    if start is not None:
        pos += np.asarray(start, dtype=float)
        return DiscretePath(h, pos, origin_start=False)
    return DiscretePath(h, pos)


def midpoints(positions: np.ndarray) -> np.ndarray:
    return 0.5 * (positions[1:] + positions[:-1])


def occupation_of(path: DiscretePath, softening: float | None = None) -> OccupationMeasure:
    eta = default_softening(path.h) if softening is None else softening
    return OccupationMeasure.uniform(midpoints(path.positions), eta)


def riemann_hamiltonian(path: DiscretePath, softening: float | None = None) -> float:
    """(1/t^2) sum_{k,l} h^2 V_eta(Q_k - Q_l) over segment midpoints, written as a plain double loop."""
    eta = default_softening(path.h) if softening is None else softening
    q = midpoints(path.positions)
    total = 0.0
    for k in range(len(q)):
        d = q[k] - q
        total += np.sum(path.h**2 / np.sqrt(np.einsum("ij,ij->i", d, d) + eta**2))
    return total / path.t**2


# --- proposals --------------------------------------------------------------

@numba.njit(cache=True)
def _bridge_fill(pos, i, j, noise, h):
    """Sequential Brownian-bridge redraw of pos[i+1..j-1] given pos[i], pos[j]."""
    out = np.empty((j - i - 1, 3))
    prev0, prev1, prev2 = pos[i, 0], pos[i, 1], pos[i, 2]
    for s in range(i + 1, j):
        left = j - s + 1
        frac = 1.0 / left
        sd = np.sqrt(h * (left - 1) / left)
        k = s - i - 1
        prev0 = prev0 + (pos[j, 0] - prev0) * frac + sd * noise[k, 0]
        prev1 = prev1 + (pos[j, 1] - prev1) * frac + sd * noise[k, 1]
        prev2 = prev2 + (pos[j, 2] - prev2) * frac + sd * noise[k, 2]
        out[k, 0] = prev0
        out[k, 1] = prev1
        out[k, 2] = prev2
    return out


def propose_bridge(path: DiscretePath, i: int, j: int, rng=None, noise=None) -> DiscretePath:
    """Redraw positions i+1..j-1 from the Brownian bridge between positions i and j."""
    m = path.m
    if not (0 <= i < j <= m):
        raise ValueError(f"need 0 <= i < j <= m={m}, got i={i}, j={j}")
    if j - i < 2:
        return path
    if noise is None:
        noise = rng.standard_normal((j - i - 1, 3))
    pos = np.array(path.positions)
    pos[i + 1:j] = _bridge_fill(pos, i, j, np.asarray(noise, dtype=float), path.h)
    return DiscretePath(path.h, pos, path.origin_start)


def propose_end_block(path: DiscretePath, i: int, rng=None, noise=None) -> DiscretePath:
    """Redraw positions i+1..m as free Brownian increments from position i."""
    m = path.m
    if not 0 <= i < m:
        raise ValueError(f"need 0 <= i < m={m}, got {i}")
    if noise is None:
        noise = rng.standard_normal((m - i, 3))
    pos = np.array(path.positions)
    pos[i + 1:] = pos[i] + np.cumsum(np.sqrt(path.h) * np.asarray(noise), axis=0)
    return DiscretePath(path.h, pos, path.origin_start)


def propose_start_block(path: DiscretePath, i: int, rng=None, noise=None) -> DiscretePath:
    """Redraw positions 0..i-1 backwards from position i (free starting point only)."""
    if path.origin_start:
        raise ValueError("start-block moves need a free starting point")
    if not 0 < i <= path.m:
        raise ValueError(f"need 0 < i <= m, got {i}")
    if noise is None:
        noise = rng.standard_normal((i, 3))
    pos = np.array(path.positions)
    pos[:i] = pos[i] + np.cumsum(np.sqrt(path.h) * np.asarray(noise), axis=0)[::-1]
    return DiscretePath(path.h, pos, path.origin_start)


def log_wiener_density(path: DiscretePath) -> float:
    """Log density of the increments under the discrete Wiener measure."""
    inc = np.diff(path.positions, axis=0)
    return float(-0.5 * np.sum(inc**2) / path.h - 1.5 * path.m * np.log(2 * np.pi * path.h))


def _log_gauss(d2: float, var: float) -> float:
    return -0.5 * d2 / var - 1.5 * np.log(2 * np.pi * var)


def log_proposal_density(old: DiscretePath, new: DiscretePath, move: str, i: int, j: int | None = None) -> float:
    """Log density of proposing ``new`` from ``old``, written from transition densities."""
    pos, h = new.positions, new.h
    if move == "bridge":
        inc = np.diff(pos[i:j + 1], axis=0)
        chain = sum(_log_gauss(float(np.dot(d, d)), h) for d in inc)
        span = pos[j] - pos[i]
        return chain - _log_gauss(float(np.dot(span, span)), h * (j - i))
    if move == "end":
        inc = np.diff(pos[i:], axis=0)
        return sum(_log_gauss(float(np.dot(d, d)), h) for d in inc)
    if move == "start":
        inc = np.diff(pos[: i + 1], axis=0)
        return sum(_log_gauss(float(np.dot(d, d)), h) for d in inc)
    raise ValueError(f"unknown move {move!r}")


# --- chain ------------------------------------------------------------------

@numba.njit(cache=True)
def _full_phi(q, eta):
    m = q.shape[0]
    eta2 = eta * eta
    phi = np.empty(m)
    for a in range(m):
        s = 0.0
        c = 0.0
        for b in range(m):
            dx = q[a, 0] - q[b, 0]
            dy = q[a, 1] - q[b, 1]
            dz = q[a, 2] - q[b, 2]
            term = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz + eta2)
            t = s + term
            if abs(s) >= abs(term):
                c += (s - t) + term
            else:
                c += (term - t) + s
            s = t
        phi[a] = s + c
    return phi


@numba.njit(cache=True, error_model="numpy")
def _updated_phi(qt, phi, lo, hi, qnew, eta):
    """Row sums after midpoints lo..hi-1 move to qnew; O((hi-lo) m).

    ``qt`` holds the current midpoints as three contiguous coordinate rows.
    """
    x, y, z = qt[0], qt[1], qt[2]
    m = x.shape[0]
    k_len = hi - lo
    eta2 = eta * eta
    out = phi.copy()
    fresh = np.empty(k_len)
    for k in range(k_len):
        a = lo + k
        ax, ay, az = x[a], y[a], z[a]
        nx, ny, nz = qnew[k, 0], qnew[k, 1], qnew[k, 2]
        row = 0.0
        for b in range(m):
            dx = nx - x[b]
            dy = ny - y[b]
            dz = nz - z[b]
            v_new = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz + eta2)
            dx = ax - x[b]
            dy = ay - y[b]
            dz = az - z[b]
            out[b] += v_new - 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz + eta2)
            row += v_new
        fresh[k] = row
    # rows inside the block: swap the old block partners for the new ones
    for k in range(k_len):
        nx, ny, nz = qnew[k, 0], qnew[k, 1], qnew[k, 2]
        corr = 0.0
        for l in range(k_len):
            b = lo + l
            dx = nx - qnew[l, 0]
            dy = ny - qnew[l, 1]
            dz = nz - qnew[l, 2]
            corr += 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz + eta2)
            dx = nx - x[b]
            dy = ny - y[b]
            dz = nz - z[b]
            corr -= 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz + eta2)
        out[lo + k] = fresh[k] + corr
    return out


@numba.njit(cache=True)
def _neumaier_sum(x):
    s = 0.0
    c = 0.0
    for i in range(x.shape[0]):
        t = s + x[i]
        if abs(s) >= abs(x[i]):
            c += (s - t) + x[i]
        else:
            c += (x[i] - t) + s
        s = t
    return s + c


@dataclass
class ChainState:
    positions: np.ndarray
    h: float
    beta: float
    eta: float
    origin_start: bool = True
    phi: np.ndarray = field(default=None, repr=False)
    H: float = np.nan
    steps: int = 0
    proposed: dict = field(default_factory=lambda: dict.fromkeys(MOVES, 0))
    accepted: dict = field(default_factory=lambda: dict.fromkeys(MOVES, 0))
    max_cache_error: float = 0.0

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float)
        if self.phi is None:
            self.refresh()

    @classmethod
    def from_path(cls, path: DiscretePath, beta: float, eta: float | None = None) -> "ChainState":
        eta = default_softening(path.h) if eta is None else eta
        return cls(path.positions, path.h, beta, eta, path.origin_start)

    @property
    def m(self) -> int:
        return len(self.positions) - 1

    @property
    def t(self) -> float:
        return self.m * self.h

    @property
    def path(self) -> DiscretePath:
        return DiscretePath(self.h, self.positions.copy(), self.origin_start)

    def occupation(self) -> OccupationMeasure:
        return OccupationMeasure.uniform(midpoints(self.positions), self.eta)

    def refresh(self) -> None:
        q = midpoints(self.positions)
        self.phi = _full_phi(q, self.eta)
        self.H = _neumaier_sum(self.phi) / self.m**2

    def check_cache(self, tol: float = 1e-6) -> float:
        cached = self.H
        self.refresh()
        err = abs(cached - self.H)
        self.max_cache_error = max(self.max_cache_error, err)
        if err > tol:
            raise CacheError(f"incremental H drifted by {err:.3e} after {self.steps} steps")
        return err

    def acceptance_rates(self) -> dict:
        return {k: (self.accepted[k] / self.proposed[k] if self.proposed[k] else None) for k in MOVES}


@dataclass(frozen=True)
class MoveMix:
    bridge: float = 0.7
    block: float = 0.2
    shift: float = 0.1
    mean_length_frac: float = 1.0 / 8.0
    shift_scale: float = 0.5

    def probabilities(self, origin_start: bool) -> dict:
        if origin_start:
            tot = self.bridge + self.block
            return {"bridge": self.bridge / tot, "end": self.block / tot, "start": 0.0, "shift": 0.0}
        tot = self.bridge + self.block + self.shift
        return {"bridge": self.bridge / tot, "end": 0.5 * self.block / tot,
                "start": 0.5 * self.block / tot, "shift": self.shift / tot}


def _segment_length(rng, m: int, mean: float, lo: int) -> int:
    return int(min(max(rng.geometric(1.0 / max(mean, 1.0)), lo), m))


def draw_proposal(state: ChainState, rng, mix: MoveMix = MoveMix()):
    """Pick a move and build the proposed positions.

    Returns (move, first moved position index, last moved position index + 1, new positions).
    """
    m = state.m
    probs = mix.probabilities(state.origin_start)
    u = rng.random()
    mean = max(m * mix.mean_length_frac, 1.0)
    if u < probs["bridge"]:
        length = _segment_length(rng, m, mean, 2)
        i = int(rng.integers(0, m - length + 1))
        j = i + length
        noise = rng.standard_normal((j - i - 1, 3))
        new = _bridge_fill(state.positions, i, j, noise, state.h)
        return "bridge", i + 1, j, new
    u -= probs["bridge"]
    if u < probs["end"]:
        k = _segment_length(rng, m, mean, 1)
        i = m - k
        noise = rng.standard_normal((k, 3))
        new = state.positions[i] + np.cumsum(np.sqrt(state.h) * noise, axis=0)
        return "end", i + 1, m + 1, new
    u -= probs["end"]
    if u < probs["start"]:
        k = _segment_length(rng, m, mean, 1)
        noise = rng.standard_normal((k, 3))
        new = state.positions[k] + np.cumsum(np.sqrt(state.h) * noise, axis=0)[::-1]
        return "start", 0, k, new
    v = mix.shift_scale * rng.standard_normal(3)
    return "shift", 0, m + 1, state.positions + v


def mh_step(state: ChainState, rng, mix: MoveMix = MoveMix()) -> ChainState:
    """One Metropolis-Hastings update, in place; returns the state."""
    move, lo, hi, new = draw_proposal(state, rng, mix)
    state.proposed[move] += 1
    state.steps += 1
    if move == "shift":
        # H is translation invariant, so the move is always accepted
        state.positions = new
        state.accepted[move] += 1
        return state
    # positions lo..hi-1 change; midpoints max(lo-1,0)..min(hi, m)-1 follow
    m = state.m
    q_lo = max(lo - 1, 0)
    q_hi = min(hi, m)
    pos_seg = np.empty((q_hi - q_lo + 1, 3))
    pos_seg[:] = state.positions[q_lo:q_hi + 1]
    pos_seg[lo - q_lo:hi - q_lo] = new
    qnew = 0.5 * (pos_seg[1:] + pos_seg[:-1])
    qt = np.ascontiguousarray(midpoints(state.positions).T)
    phi_new = _updated_phi(qt, state.phi, q_lo, q_hi, qnew, state.eta)
    H_new = _neumaier_sum(phi_new) / m**2
    log_alpha = state.beta * state.t * (H_new - state.H)
    if log_alpha >= 0 or np.log(rng.random()) < log_alpha:
        state.positions[lo:hi] = new
        state.phi = phi_new
        state.H = H_new
        state.accepted[move] += 1
    return state


def detailed_balance_gap(old: DiscretePath, new: DiscretePath, move: str, i: int, j: int | None,
                         beta: float, eta: float | None = None) -> float:
    """|1 - flow(old->new) / flow(new->old)| with flow = pi q alpha, all from closed forms."""
    eta = default_softening(old.h) if eta is None else eta
    t = old.t
    h_old = hamiltonian(occupation_of(old, eta))
    h_new = hamiltonian(occupation_of(new, eta))
    log_pi_old = log_wiener_density(old) + beta * t * h_old
    log_pi_new = log_wiener_density(new) + beta * t * h_new
    log_q_fwd = log_proposal_density(old, new, move, i, j)
    log_q_bwd = log_proposal_density(new, old, move, i, j)
    log_a_fwd = min(0.0, log_pi_new - log_pi_old + log_q_bwd - log_q_fwd)
    log_a_bwd = min(0.0, log_pi_old - log_pi_new + log_q_fwd - log_q_bwd)
    fwd = log_pi_old + log_q_fwd + log_a_fwd
    bwd = log_pi_new + log_q_bwd + log_a_bwd
    return float(abs(np.expm1(fwd - bwd)))


def metropolis_ratio(old: DiscretePath, new: DiscretePath, move: str, i: int, j: int | None,
                     beta: float, eta: float | None = None) -> float:
    """pi(new) q(new->old) / (pi(old) q(old->new)); equals exp(beta t (H'-H)) for Wiener-reversible moves."""
    eta = default_softening(old.h) if eta is None else eta
    t = old.t
    d = (log_wiener_density(new) - log_wiener_density(old)
         + beta * t * (hamiltonian(occupation_of(new, eta)) - hamiltonian(occupation_of(old, eta)))
         + log_proposal_density(new, old, move, i, j) - log_proposal_density(old, new, move, i, j))
    return float(np.exp(d))


# --- runs -------------------------------------------------------------------

@dataclass(frozen=True)
class ChainConfig:
    t: float = 8.0
    h: float = 1.0 / 64.0
    beta: float = 1.0
    burn_in: int = 100_000
    draws: int = 1000
    thinning: int = 100
    origin_start: bool = True
    eta_scale: float = 0.1
    checkpoint: int = 1000
    shift_stats: bool = True
    shift_spacing: float = 0.75
    shift_budget: int = 8000
    mix: MoveMix = field(default_factory=MoveMix)

    def __post_init__(self):
        steps_for(self.t, self.h)
        if self.burn_in < 0 or self.draws <= 0 or self.thinning <= 0:
            raise ValueError("burn_in must be >= 0, draws and thinning > 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def m(self) -> int:
        return steps_for(self.t, self.h)

    @property
    def eta(self) -> float:
        return default_softening(self.h, self.eta_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        d = dict(d)
        if "mix" in d and isinstance(d["mix"], dict):
            d["mix"] = MoveMix(**d["mix"])
        return cls(**d)


@dataclass(eq=False)
class ChainOutput:
    H: np.ndarray
    shifts: np.ndarray
    endpoints: np.ndarray
    orbit_dist: np.ndarray
    steps: np.ndarray
    acceptance: dict
    seed: int
    config: dict
    max_cache_error: float = 0.0

    def __len__(self) -> int:
        return len(self.H)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "draws": len(self),
            "mean_H": float(np.mean(self.H)),
            "stderr_H": batch_stderr(self.H),
            "acceptance": self.acceptance,
            "max_cache_error": self.max_cache_error,
        }

    def save(self, out_dir, stem: str = "chain") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        table = np.column_stack([self.steps, self.H, self.shifts, self.endpoints, self.orbit_dist])
        np.savetxt(out / f"{stem}.csv", table, delimiter=",", comments="", fmt="%.17g",
                   header="step,H,Yx,Yy,Yz,Wx,Wy,Wz,orbit_dist")

    @classmethod
    def load(cls, out_dir, stem: str = "chain") -> "ChainOutput":
        out = Path(out_dir)
        meta = json.loads((out / f"{stem}.json").read_text())
        table = np.loadtxt(out / f"{stem}.csv", delimiter=",", skiprows=1, ndmin=2)
        return cls(H=table[:, 1], shifts=table[:, 2:5], endpoints=table[:, 5:8], orbit_dist=table[:, 8],
                   steps=table[:, 0].astype(int), acceptance=meta["acceptance"], seed=meta["seed"],
                   config=meta["config"], max_cache_error=meta.get("max_cache_error", 0.0))

    @staticmethod
    def concat(outputs: list["ChainOutput"]) -> "ChainOutput":
        first = outputs[0]
        return ChainOutput(
            H=np.concatenate([o.H for o in outputs]),
            shifts=np.concatenate([o.shifts for o in outputs]),
            endpoints=np.concatenate([o.endpoints for o in outputs]),
            orbit_dist=np.concatenate([o.orbit_dist for o in outputs]),
            steps=np.concatenate([o.steps for o in outputs]),
            acceptance=first.acceptance, seed=first.seed, config=first.config,
            max_cache_error=max(o.max_cache_error for o in outputs),
        )


def batch_stderr(x: np.ndarray, n_batches: int = 20) -> float:
    """Standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    n_batches = min(n_batches, len(x))
    if n_batches < 2:
        return float("nan")
    size = len(x) // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def run_chain(config: ChainConfig, sol=None, seed: int = 0, init: DiscretePath | None = None) -> ChainOutput:
    if config.shift_stats and sol is None:
        raise ValueError("shift statistics requested but no Pekar solution supplied")
    rng = np.random.default_rng(seed)
    if init is None:
        init = sample_wiener(config.t, config.h, rng)
        if not config.origin_start:
            init = DiscretePath(init.h, init.positions, origin_start=False)
    elif init.m != config.m:
        raise ValueError("initial path does not match the configured t/h")
    state = ChainState.from_path(init, config.beta, config.eta)

    def advance(n):
        for _ in range(n):
            mh_step(state, rng, config.mix)
            if state.steps % config.checkpoint == 0:
                state.check_cache()

    advance(config.burn_in)
    H = np.empty(config.draws)
    shifts = np.full((config.draws, 3), np.nan)
    ends = np.empty((config.draws, 3))
    dists = np.full(config.draws, np.nan)
    steps = np.empty(config.draws, dtype=int)
    for k in range(config.draws):
        advance(config.thinning)
        H[k] = state.H
        ends[k] = state.positions[-1]
        steps[k] = state.steps
        if config.shift_stats:
            res = shift_search(state.occupation(), sol, spacing=config.shift_spacing, budget=config.shift_budget)
            shifts[k] = res.best_shift
            dists[k] = res.dist
    state.check_cache()
    return ChainOutput(H=H, shifts=shifts, endpoints=ends, orbit_dist=dists, steps=steps,
                       acceptance=state.acceptance_rates(), seed=seed, config=config.to_dict(),
                       max_cache_error=state.max_cache_error)


def wiener_mean_H(t: float, h: float, n_paths: int, seed: int = 0, eta_scale: float = 0.1) -> tuple[float, float]:
    """Direct Monte Carlo of E[H(L_t)] over independent Wiener paths: (mean, standard error)."""
    rng = np.random.default_rng(seed)
    eta = default_softening(h, eta_scale)
    vals = np.array([hamiltonian(occupation_of(sample_wiener(t, h, rng), eta)) for _ in range(n_paths)])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths))


# --- thermodynamic integration ---------------------------------------------

@dataclass(frozen=True)
class TIConfig:
    t: float = 8.0
    h: float = 1.0 / 64.0
    betas: tuple = (0.0, 0.2, 0.4, 0.55, 0.7, 0.8, 0.87, 0.92, 0.96, 0.985, 1.0)
    burn_in: int = 20_000
    draws: int = 500
    thinning: int = 40
    eta_scale: float = 0.1
    swap_threshold: float = 0.05

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if len(b) == 0 or b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise ValueError("beta grid must start at 0 and increase strictly")
        if len(b) > 1 and b[-1] != 1.0:
            raise ValueError("beta grid must end at 1")


@dataclass(eq=False)
class TIResult:
    t: float
    betas: np.ndarray
    mean_H: np.ndarray
    stderr_H: np.ndarray
    estimate: float
    stderr: float
    swap_acceptance: np.ndarray
    flagged: list
    seed: int
    outputs: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"t": self.t, "betas": self.betas.tolist(), "mean_H": self.mean_H.tolist(),
                "stderr_H": self.stderr_H.tolist(), "estimate": self.estimate, "stderr": self.stderr,
                "swap_acceptance": self.swap_acceptance.tolist(), "flagged": self.flagged, "seed": self.seed}


def swap_acceptance(t: float, beta_a: float, h_a: np.ndarray, beta_b: float, h_b: np.ndarray) -> float:
    """Mean replica-exchange acceptance estimated from independent samples at two couplings."""
    d = (beta_b - beta_a) * t * (h_a[:, None] - h_b[None, :])
    return float(np.mean(np.minimum(1.0, np.exp(np.minimum(d, 0.0)))))


def free_energy_ti(config: TIConfig, seed: int = 0) -> TIResult:
    """(1/t) log Z_t = int_0^1 E_beta[H(L_t)] d beta, trapezoid over the beta grid."""
    betas = np.asarray(config.betas, dtype=float)
    seeds = np.random.SeedSequence(seed).spawn(len(betas))
    means, errs, outs = [], [], []
    for b, ss in zip(betas, seeds):
        cfg = ChainConfig(t=config.t, h=config.h, beta=float(b), burn_in=config.burn_in, draws=config.draws,
                          thinning=config.thinning, eta_scale=config.eta_scale, shift_stats=False)
        out = run_chain(cfg, None, seed=int(ss.generate_state(1)[0]))
        outs.append(out)
        means.append(out.H.mean())
        errs.append(batch_stderr(out.H))
    means, errs = np.array(means), np.array(errs)
    if len(betas) == 1:
        est, err = float(means[0]), float(errs[0])
    else:
        w = np.zeros(len(betas))
        db = np.diff(betas)
        w[:-1] += 0.5 * db
        w[1:] += 0.5 * db
        est, err = float(np.dot(w, means)), float(np.sqrt(np.dot(w**2, errs**2)))
    swaps = np.array([swap_acceptance(config.t, betas[k], outs[k].H, betas[k + 1], outs[k + 1].H)
                      for k in range(len(betas) - 1)])
    flagged = [(float(betas[k]), float(betas[k + 1])) for k in range(len(swaps)) if swaps[k] < config.swap_threshold]
    if flagged:
        log.warning("poor overlap between adjacent couplings: %s", flagged)
    return TIResult(t=config.t, betas=betas, mean_H=means, stderr_H=errs, estimate=est, stderr=err,
                    swap_acceptance=swaps, flagged=flagged, seed=seed, outputs=outs)
