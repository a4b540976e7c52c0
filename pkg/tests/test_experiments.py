import json

import numpy as np
import pytest

from pekar.cli import main
from pekar.experiments import (ExperimentReport, MasterConfig, Section, bootstrap_l1, effective_sample_size,
                               endpoint_reference, l1_distance, nonincreasing_within, null_l1_quantile,
                               radial_reference_bins, run_all, sample_reference, self_convolution, shift_reference,
                               theorem1_self_test, tube_self_test, verify_corollary, verify_free_energy,
                               verify_theorem1, verify_tube)
from pekar.numerics import RadialFunction, make_grid
from pekar.sampler import ChainOutput, TIResult


def fake_chain(shifts, endpoints=None, H=None, orbit=None):
    n = len(shifts)
    return ChainOutput(H=np.zeros(n) if H is None else H, shifts=shifts,
                       endpoints=shifts if endpoints is None else endpoints,
                       orbit_dist=np.zeros(n) if orbit is None else orbit, steps=np.arange(n),
                       acceptance={}, seed=0, config={})


def test_ess_iid_and_ar1():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20_000)
    assert effective_sample_size(x) == pytest.approx(20_000, rel=0.1)
    phi, y = 0.8, np.empty(20_000)
    y[0] = 0.0
    for k in range(1, len(y)):
        y[k] = phi * y[k - 1] + x[k]
    assert effective_sample_size(y) == pytest.approx(20_000 * (1 - phi) / (1 + phi), rel=0.25)


def test_self_convolution_gaussian_and_fubini(sol):
    g = make_grid(20.0, 1000)
    f = RadialFunction(g, np.exp(-g.nodes**2 / 2))
    c = self_convolution(f)
    assert np.max(np.abs(c.values - np.pi**1.5 * np.exp(-c.r**2 / 4))) < 1e-6
    conv = self_convolution(sol.psi0)
    assert conv.mass() == pytest.approx(sol.psi0.mass() ** 2, rel=1e-6)
    assert endpoint_reference(sol).mass() == pytest.approx(1.0, abs=1e-12)


def test_reference_bins_are_probabilities(sol):
    edges = np.arange(0, 20.25, 0.5)
    for dens in (shift_reference(sol), endpoint_reference(sol)):
        p = radial_reference_bins(dens, edges)
        assert p.sum() == pytest.approx(1.0, abs=1e-12) and np.all(p >= 0)


def test_self_tests_pass(sol):
    res = theorem1_self_test(sol)
    assert res["shift"] <= 0.05 and res["endpoint"] <= 0.05
    assert tube_self_test(sol) <= 0.1


def test_null_quantile_and_bootstrap(sol):
    rng = np.random.default_rng(0)
    edges = np.arange(0, 20.25, 0.5)
    ref = radial_reference_bins(shift_reference(sol), edges)
    q = null_l1_quantile(ref, 1000, rng)
    r = np.linalg.norm(sample_reference(shift_reference(sol), 1000, rng), axis=1)
    assert l1_distance(r, ref, edges) <= q * 1.5
    boot = bootstrap_l1(r, ref, edges, 200, rng, block=5)
    assert boot.std() > 0 and len(boot) == 200


def test_nonincreasing_within():
    assert nonincreasing_within([1.0, 0.5, 0.52], [0.01, 0.01, 0.01])
    assert not nonincreasing_within([1.0, 0.5, 0.7], [0.01, 0.01, 0.01])


def test_theorem1_verifier_discriminates(sol):
    rng = np.random.default_rng(1)
    exact = {t: fake_chain(sample_reference(shift_reference(sol), 4000, rng)) for t in (4.0, 8.0)}
    good = verify_theorem1(exact, sol, n_boot=100)
    assert good.status == "pass"
    # Wiener-like negative control: Gaussian shifts spreading with t
    wide = {t: fake_chain(np.sqrt(t / 3) * rng.standard_normal((4000, 3))) for t in (4.0, 8.0, 16.0)}
    assert verify_theorem1(wide, sol, n_boot=100).status == "fail"
    few = {t: fake_chain(sample_reference(shift_reference(sol), 100, rng)) for t in (4.0, 8.0)}
    assert verify_theorem1(few, sol, n_boot=50).status == "inconclusive"
    with pytest.raises(ValueError):
        verify_theorem1({4.0: exact[4.0]}, sol)


def test_tube_and_corollary_verifiers(sol):
    rng = np.random.default_rng(2)
    H0 = sol.coulomb_energy
    chains = {}
    for t, (d1, d0) in zip((4.0, 8.0, 16.0), ((0.4, 0.5), (0.2, 0.5), (0.1, 0.5))):
        chains[(t, 1.0)] = fake_chain(np.zeros((50, 3)), H=np.full(50, H0 * (1 + d1)), orbit=d1 + 0.01 * rng.random(50))
        chains[(t, 0.0)] = fake_chain(np.zeros((50, 3)), H=np.full(50, H0 * (1 + d0)), orbit=d0 + 0.01 * rng.random(50))
    tube = verify_tube(chains)
    assert tube.status == "pass" and tube.metrics["control_discriminates"]
    cor = verify_corollary(chains, sol)
    assert cor.status == "pass"
    chains[(16.0, 1.0)] = fake_chain(np.zeros((50, 3)), H=np.full(50, H0 * 1.3))
    assert verify_corollary(chains, sol).status == "fail"


def _ti(t, est, se):
    return TIResult(t=t, betas=np.array([0.0, 1.0]), mean_H=np.array([est, est]), stderr_H=np.array([se, se]),
                    estimate=est, stderr=se, swap_acceptance=np.array([0.5]), flagged=[], seed=0)


def test_free_energy_verifier(sol):
    rho = sol.rho
    ok = verify_free_energy({4.0: _ti(4.0, 0.8 * rho, 0.01), 8.0: _ti(8.0, 0.9 * rho, 0.01)}, sol)
    assert ok.status == "pass"
    high = verify_free_energy({4.0: _ti(4.0, 3 * rho, 0.01), 8.0: _ti(8.0, 2 * rho, 0.01)}, sol)
    assert high.status == "fail"
    noisy = verify_free_energy({8.0: _ti(8.0, rho, rho)}, sol)
    assert noisy.status == "inconclusive"


def test_master_config_validation(tmp_path):
    with pytest.raises(ValueError, match="1.0"):
        MasterConfig(betas=(0.0, 0.5))
    with pytest.raises(ValueError):
        MasterConfig(t_grid=(8.0,))
    with pytest.raises(ValueError):
        MasterConfig(schema_version=99)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"t_grid": [2, 4], "seed": 3}))
    cfg = MasterConfig.from_json(path)
    assert cfg.t_grid == (2, 4) and cfg.seed == 3


def test_report_criteria():
    rep = ExperimentReport({"solver": Section("solver", "pass"), "sde": Section("sde", "fail")}, {})
    assert rep.criteria() == {"1_solver": True, "6_sde": False}
    assert not rep.passed


TINY = dict(t_grid=(2.0, 4.0), segments=64, burn_in=300, draws=60, thinning=5, sde_T=5.0, ti_t_grid=(2.0,),
            ti_burn_in=100, ti_draws=30, ti_thinning=5, n_boot=20, ess_min=10)


def test_run_all_is_deterministic(tmp_path):
    cfg = MasterConfig(**TINY)
    a = run_all(cfg, tmp_path / "a")
    run_all(cfg, tmp_path / "b")
    body_a = (tmp_path / "a" / "report.json").read_bytes()
    assert body_a == (tmp_path / "b" / "report.json").read_bytes()
    report = json.loads(body_a)
    assert report["version"] and report["schema_version"] == 1
    assert set(report["criteria"]) == set(a.criteria())
    for sec in report["sections"].values():
        for art in sec["artifacts"]:
            assert (tmp_path / "a" / art).exists()


def test_cli_commands(tmp_path, capsys):
    assert main(["solve", "--rmax", "15", "--n", "1500", "--out", str(tmp_path / "s")]) == 0
    assert json.loads((tmp_path / "s" / "solution.json").read_text())["n"] == 1500
    cfg = tmp_path / "sde.json"
    cfg.write_text(json.dumps({"T": 2.0, "h": 1e-3, "tilt": "gaussian"}))
    assert main(["sde", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "sde")]) == 0
    cfg = tmp_path / "chain.json"
    cfg.write_text(json.dumps({"t": 1.0, "h": 1 / 16, "burn_in": 50, "draws": 5, "thinning": 5,
                               "solution": str(tmp_path / "s")}))
    assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "chain")]) == 0
    assert (tmp_path / "chain" / "chain.csv").exists()
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"betas": [0.0, 0.5]}))
    with pytest.raises(ValueError):
        main(["run-all", "--config", str(cfg), "--out", str(tmp_path / "r")])
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        main(["free-energy", "--config", str(cfg), "--out", str(tmp_path / "fe")])
