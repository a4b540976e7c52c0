"""Command line entry point: ``pekar <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("pekar")


def _load_config(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _pick(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise SystemExit(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _dump(obj, path: Path | None = None) -> None:
    from .experiments import _jsonable

    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    print(text)


def _solution(cfg: dict):
    from .solver import PekarSolution, solve

    if "solution" in cfg:
        return PekarSolution.load(cfg.pop("solution"))
    return solve()


def cmd_solve(args) -> int:
    from .solver import solve

    cfg = _load_config(args.config)
    r_max = args.rmax if args.rmax is not None else cfg.get("r_max", 20.0)
    n = args.n if args.n is not None else cfg.get("n", 2000)
    tol = args.tol if args.tol is not None else cfg.get("tol", 1e-10)
    mixing = args.mixing if args.mixing is not None else cfg.get("mixing", 0.5)
    sol = solve(r_max, n, tol, mixing)
    sol.save(Path(args.out))
    _dump(sol.summary())
    return 0


def cmd_coulomb(args) -> int:
    from .coulomb import OccupationMeasure, hamiltonian, pair_energy_stderr
    from .experiments import check_coulomb

    cfg = _load_config(args.config)
    out = Path(args.out)
    if "measure" in cfg:
        mu = OccupationMeasure.from_csv(cfg["measure"])
        if "softening" in cfg:
            mu = mu.with_softening(cfg["softening"])
        _dump({"H": hamiltonian(mu), "n": len(mu), "softening": mu.softening,
               "stderr_iid": pair_energy_stderr(mu)}, out / "coulomb.json")
        return 0
    sec = check_coulomb(args.seed)
    _dump(sec.to_dict(), out / "coulomb.json")
    return 0 if sec.passed else 1


def cmd_sample(args) -> int:
    from .sampler import ChainConfig, run_chain

    cfg = _load_config(args.config)
    sol = _solution(cfg) if cfg.get("shift_stats", True) else None
    cfg.pop("solution", None)
    config = ChainConfig.from_dict(_pick(ChainConfig, cfg))
    out = run_chain(config, sol, seed=args.seed)
    out.save(Path(args.out))
    _dump(out.summary())
    return 0


def cmd_sde(args) -> int:
    from .sde import SdeConfig, Tilt, simulate

    cfg = _load_config(args.config)
    kind = cfg.pop("tilt", "pekar")
    if kind == "pekar":
        tilt = Tilt.from_solution(_solution(cfg))
    elif kind == "gaussian":
        tilt = Tilt.gaussian(cfg.pop("sigma", 1.0))
    else:
        raise SystemExit(f"unknown tilt {kind!r} (expected 'pekar' or 'gaussian')")
    cfg.pop("solution", None)
    cfg["seed"] = args.seed
    config = SdeConfig(**_pick(SdeConfig, cfg))
    traj = simulate(config, tilt)
    traj.save(Path(args.out), tilt)
    _dump({"samples": traj.samples, "l1_error": traj.l1_error(tilt), "far_field_steps": traj.far_steps,
           "config": asdict(config)})
    return 0


def cmd_free_energy(args) -> int:
    from .sampler import TIConfig, free_energy_ti
    from .solver import solve

    cfg = _load_config(args.config)
    config = TIConfig(**_pick(TIConfig, cfg))
    res = free_energy_ti(config, seed=args.seed)
    rho = solve().rho
    summary = res.summary() | {"rho": rho, "gap": res.estimate - rho}
    _dump(summary, Path(args.out) / "free_energy.json")
    return 0


def cmd_verify(args) -> int:
    """Verification sections for chain artifacts already on disk (chains/chain_t*_beta*.csv)."""
    from .experiments import (MasterConfig, Section, verify_corollary, verify_endpoint, verify_theorem1,
                              verify_tube)
    from .sampler import ChainOutput

    config = MasterConfig(**_pick(MasterConfig, _load_config(args.config)))
    out = Path(args.out)
    sol = _solution({"solution": out / "solver"} if (out / "solver" / "solution.json").exists() else {})
    chains = {}
    for f in sorted((out / "chains").glob("chain_t*_beta*.json")):
        o = ChainOutput.load(f.parent, f.stem)
        chains[(float(o.config["t"]), float(o.config["beta"]))] = o
    if not chains:
        raise SystemExit(f"no chain artifacts under {out / 'chains'}")
    kw = dict(bin_width=config.bin_width, n_boot=config.n_boot, ess_min=config.ess_min, seed=args.seed)
    sections: list[Section] = []
    for beta in sorted({b for _, b in chains}):
        sub = {t: o for (t, b), o in chains.items() if b == beta}
        if len(sub) > 1:
            sections.append(verify_theorem1(sub, sol, name=f"theorem1_beta{beta:g}", **kw))
            sections.append(verify_endpoint(sub, sol, name=f"endpoint_beta{beta:g}", **kw))
    sections.append(verify_tube(chains, config.eps))
    if any(b == 1.0 for _, b in chains):
        sections.append(verify_corollary(chains, sol))
    _dump({s.name: s.to_dict() for s in sections}, out / "verify.json")
    return 0 if all(s.status == "pass" for s in sections) else 1


def cmd_run_all(args) -> int:
    from .experiments import MasterConfig, run_all

    cfg = _load_config(args.config)
    cfg["seed"] = args.seed
    config = MasterConfig(**_pick(MasterConfig, cfg))
    report = run_all(config, args.out, threads=args.threads)
    for k, ok in report.criteria().items():
        print(f"{'PASS' if ok else 'FAIL'}  {k}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pekar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("solve", help="solve the Pekar problem by self-consistent field iteration")
    common(sp, "out/solver")
    sp.add_argument("--rmax", type=float)
    sp.add_argument("--n", type=int)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--mixing", type=float)
    sp.set_defaults(func=cmd_solve)
    for name, func, default, text in (
        ("coulomb", cmd_coulomb, "out/coulomb", "Coulomb energy of a point cloud, or the engine self-checks"),
        ("sample", cmd_sample, "out/chain", "Metropolis-Hastings sampler for the mean-field path measure"),
        ("sde", cmd_sde, "out/sde", "Euler-Maruyama simulation of the Pekar process"),
        ("free-energy", cmd_free_energy, "out/free_energy", "thermodynamic integration of (1/t) log Z_t"),
        ("verify", cmd_verify, "out", "verification sections for existing chain artifacts"),
        ("run-all", cmd_run_all, "out", "every experiment plus the report"),
    ):
        sp = sub.add_parser(name, help=text)
        common(sp, default)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        raise SystemExit("--threads must be at least 1")
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
