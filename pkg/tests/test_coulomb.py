import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pekar.coulomb import (EvalGrid, MeasureError, OccupationMeasure, ShiftedDensity, cross_energy, hamiltonian,
                           hamiltonian_oracle, lambda_at, orbit_sup_distance, pair_energy_stderr,
                           radial_potential_at, shift_lattice, shift_search, split_blocks, splitting_check)
from pekar.numerics import random_directions, sample_isotropic, RadialFunction
from pekar.sampler import occupation_of, sample_wiener


def test_measure_validation():
    with pytest.raises(MeasureError):
        OccupationMeasure(np.zeros((2, 3)), [0.5, 0.6])
    with pytest.raises(MeasureError):
        OccupationMeasure(np.zeros((2, 3)), [1.0])
    with pytest.raises(MeasureError):
        OccupationMeasure(np.array([[np.nan, 0, 0]]), [1.0])
    with pytest.raises(MeasureError):
        OccupationMeasure(np.zeros((1, 3)), [1.0], softening=1.0)


def test_two_point_energy():
    mu = OccupationMeasure.uniform([[0, 0, 0], [0, 0, 2.0]])
    # self-pairs dropped: 2 * (1/4) * (1/2)
    assert hamiltonian(mu) == pytest.approx(0.25)
    soft = mu.with_softening(0.5)
    expected = 0.25 * (2 / 0.5 + 2 / np.sqrt(4.25))
    assert hamiltonian(soft) == pytest.approx(expected, rel=1e-14)


def test_collisions_rejected_without_softening():
    mu = OccupationMeasure.uniform([[0, 0, 0], [1, 0, 0], [0, 0, 0]])
    with pytest.raises(MeasureError, match=r"\[0, 2\]"):
        hamiltonian(mu)
    assert np.isfinite(hamiltonian(mu.with_softening(0.1)))


def test_shell_theorem():
    rng = np.random.default_rng(0)
    shell = OccupationMeasure.uniform(2.0 * random_directions(10_000, rng))
    inside = lambda_at(shell, np.array([[0.2, -0.5, 0.3], [0.0, 0.9, 0.0]]))
    assert np.allclose(inside, 0.5, rtol=0.01)
    assert lambda_at(shell, np.array([0.0, 0.0, 5.0])) == pytest.approx(0.2, rel=0.01)


def test_gaussian_pair_energy():
    rng = np.random.default_rng(3)
    mu = OccupationMeasure.uniform(rng.standard_normal((4096, 3)))
    se = pair_energy_stderr(mu)
    assert abs(hamiltonian(mu) - 1 / np.sqrt(np.pi)) <= 3 * se


@pytest.mark.parametrize("eta", [0.0, 0.05])
def test_oracle_agreement(eta):
    rng = np.random.default_rng(7)
    mu = OccupationMeasure(rng.standard_normal((256, 3)), rng.dirichlet(np.ones(256)), eta)
    assert hamiltonian(mu) == pytest.approx(hamiltonian_oracle(mu), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_energy_translation_invariant(seed, a, b, c):
    rng = np.random.default_rng(seed)
    mu = OccupationMeasure.uniform(rng.standard_normal((64, 3)), 0.01)
    assert hamiltonian(mu.translated((a, b, c))) == pytest.approx(hamiltonian(mu), rel=1e-12)


def test_cross_energy_symmetric_and_consistent():
    rng = np.random.default_rng(1)
    mu = OccupationMeasure.uniform(rng.standard_normal((100, 3)), 0.02)
    nu = OccupationMeasure.uniform(rng.standard_normal((80, 3)) + 1.0, 0.05)
    assert cross_energy(mu, nu) == pytest.approx(cross_energy(nu, mu), rel=1e-13)
    assert cross_energy(mu, mu) == pytest.approx(hamiltonian(mu), rel=1e-13)


def test_shifted_density_far_field(sol):
    far = radial_potential_at(sol.potential, np.array([[0.0, 0.0, 50.0]]))
    assert far[0] == pytest.approx(1 / 50)
    sd = ShiftedDensity(sol.potential, np.array([1.0, 0, 0]))
    assert sd(np.array([1.0, 0, 0])) == pytest.approx(sol.potential(0.0))


def test_splitting_identity():
    path = sample_wiener(8.0, 1 / 64, seed=4)
    mu = occupation_of(path)
    for t0 in (1.0, 2.5, 6.0):
        assert splitting_check(mu, t0, 8.0) <= 1e-10 * 8.0 * hamiltonian(mu)
    head, tail = split_blocks(mu, 2.0, 8.0)
    assert len(head) == 128 and len(tail) == 384
    with pytest.raises(ValueError):
        splitting_check(mu, 8.0, 8.0)
    with pytest.raises(ValueError):
        splitting_check(mu.with_softening(0.0), 2.0, 8.0)
    with pytest.raises(ValueError):
        split_blocks(mu, 1.001, 8.0)


def test_measure_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    mu = OccupationMeasure.uniform(rng.standard_normal((20, 3)), 0.03)
    mu.to_csv(tmp_path / "mu.csv")
    back = OccupationMeasure.from_csv(tmp_path / "mu.csv")
    assert np.array_equal(back.points, mu.points) and back.softening == mu.softening
    assert hamiltonian(back) == pytest.approx(hamiltonian(mu), rel=1e-14)


def psi0_cloud(sol, n, seed):
    dens = RadialFunction(sol.grid, sol.grid.nodes**2 * sol.psi0.values**2)
    return sample_isotropic(dens, n, np.random.default_rng(seed))


def test_shift_search_recovers_offset(sol):
    offset = np.array([1.3, -0.4, 2.2])
    mu = OccupationMeasure.uniform(psi0_cloud(sol, 2000, 5) + offset)
    res = shift_search(mu, sol)
    assert np.linalg.norm(res.best_shift - offset) < 0.4
    assert res.dist < 0.1 * sol.potential(0.0)


def test_shift_search_equivariant(sol):
    mu = OccupationMeasure.uniform(psi0_cloud(sol, 500, 6))
    v = np.array([5.0, -2.0, 0.5])
    a, b = shift_search(mu, sol), shift_search(mu.translated(v), sol)
    assert np.allclose(b.best_shift, a.best_shift + v, atol=1e-9)
    assert b.dist == pytest.approx(a.dist, rel=1e-9)


def test_orbit_distance_errors(sol):
    mu = OccupationMeasure.uniform(psi0_cloud(sol, 100, 7))
    grid = EvalGrid.covering(mu)
    with pytest.raises(ValueError):
        orbit_sup_distance(mu, sol, grid, np.empty((0, 3)))
    small = EvalGrid(np.zeros(3), 0.5, 0.25)
    with pytest.raises(ValueError):
        orbit_sup_distance(mu, sol, small, shift_lattice(np.zeros(3), 1.0, 1))
    with pytest.raises(ValueError):
        EvalGrid(np.zeros(3), 1.0, 0.0)


def test_eval_grid_budget():
    rng = np.random.default_rng(0)
    mu = OccupationMeasure.uniform(10 * rng.standard_normal((50, 3)))
    grid = EvalGrid.covering(mu, budget=5000)
    assert len(grid.points()) <= 5000 and grid.covers(mu, 3.0)
