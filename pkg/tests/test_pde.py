import numpy as np
import pytest
from scipy.spatial import cKDTree
from hypothesis import given
from hypothesis import strategies as st

import oracles
from meanfield.geometry import Domain, build_mesh
from meanfield.pde import (SolverError, _mf_residual, _system, bubble_diagnose, expansion_check,
                           linearized_spectrum_gelfand, linearized_spectrum_meanfield, mean_field_jacobian_solve,
                           solve_gelfand, solve_mean_field)
from meanfield.weight import WeightSpec

J01_SQ = 2.404825557695773**2


@pytest.fixture(scope="module")
def mesh02(disk_meshes):
    return disk_meshes[0.02]


@pytest.fixture(scope="module")
def mesh04(disk_meshes):
    return disk_meshes[0.04]


def test_lambda_zero_gives_zero(mesh04):
    r = solve_mean_field(mesh04, 0.0)
    assert r.converged and np.abs(r.u.values).max() == 0.0


def test_disk_mean_field_at_4pi(mesh02):
    r = solve_mean_field(mesh02, 4 * np.pi)
    assert r.converged and r.residual_norm <= 1e-10
    i0 = np.argmin(np.hypot(*mesh02.nodes.T))
    assert r.u.values[i0] == pytest.approx(2 * np.log(2), abs=5e-3)
    assert np.sum(mesh02.lumped_mass * np.exp(r.u.values)) == pytest.approx(2 * np.pi, rel=1e-2)
    assert r.mass_check == pytest.approx(1.0, abs=1e-10)


def test_radial_symmetry_is_preserved(mesh04):
    r = solve_mean_field(mesh04, 6 * np.pi)
    rad = np.hypot(*mesh04.nodes.T)
    exact = oracles.family_u(oracles.family_delta_from_lambda(6 * np.pi), rad)
    # angular variation within discretization error of the radial profile
    dev = r.u.values - exact
    rings = np.round(rad, 6)
    spread = max(np.ptp(dev[rings == v]) for v in np.unique(rings) if np.sum(rings == v) > 1)
    assert spread < 5e-3


def test_gelfand_lower_branch(mesh02):
    delta = 0.5
    eps = np.sqrt(oracles.family_eps2(delta))
    r = solve_gelfand(mesh02, eps)
    assert r.converged
    i0 = np.argmin(np.hypot(*mesh02.nodes.T))
    assert r.u.values[i0] == pytest.approx(oracles.family_u(delta, 0.0), abs=5e-3)
    assert r.lam == pytest.approx(oracles.family_lambda(delta), rel=2e-3)


def test_gelfand_no_solution_beyond_fold(mesh04):
    r = solve_gelfand(mesh04, np.sqrt(2.2))
    assert not r.converged
    with pytest.raises(SolverError):
        solve_gelfand(mesh04, 0.0)


def test_gelfand_small_eps_is_linear(mesh04):
    r = solve_gelfand(mesh04, 1e-3)
    assert np.abs(r.u.values).max() < 1e-6
    assert r.lam == pytest.approx(1e-6 * mesh04.area, rel=1e-5)


@given(st.floats(-20.0, 24.0), st.integers(0, 10**6))
def test_mass_identity_and_jacobian(mesh04, lam, seed):
    r = solve_mean_field(mesh04, lam)
    assert r.converged
    assert r.mass_check == pytest.approx(1.0, abs=1e-10)
    S = _system(mesh04)
    hw = np.ones(mesh04.n_nodes)
    solve = mean_field_jacobian_solve(S, r.u.values, lam, hw)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        d = np.zeros(mesh04.n_nodes)
        d[S.I] = rng.standard_normal(len(S.I))
        t = 1e-5
        Fp = _mf_residual(S, r.u.values + t * d, lam, hw)[0]
        Fm = _mf_residual(S, r.u.values - t * d, lam, hw)[0]
        back = solve((Fp - Fm) / (2 * t))
        assert np.linalg.norm(back - d[S.I]) / np.linalg.norm(d) <= 1e-5


def test_weighted_mean_field_mass(mesh04, coarse_disk_oracle):
    w = WeightSpec("exp(x)")
    r = solve_mean_field(mesh04, 10.0, w=w, oracle=coarse_disk_oracle)
    assert r.converged and r.mass_check == pytest.approx(1.0, abs=1e-10)
    # the density leans toward positive x
    assert np.sum(mesh04.lumped_mass * r.density * mesh04.nodes[:, 0]) > 0.01


def test_mean_field_spectrum_at_zero(mesh02):
    r = solve_mean_field(mesh02, 0.0)
    s = linearized_spectrum_meanfield(r)
    assert s.smallest == pytest.approx(J01_SQ, rel=1e-2)
    assert s.converged


def test_mean_field_spectrum_positive_below_8pi(mesh04):
    guess = None
    for lam in np.linspace(2.0, 24.0, 6):
        r = solve_mean_field(mesh04, lam, guess=guess)
        guess = r.u
        assert linearized_spectrum_meanfield(r, k=3).smallest > 0


def test_constructed_mean_field_kernel(mesh04):
    r = solve_mean_field(mesh04, 0.0)
    g = linearized_spectrum_gelfand(solve_gelfand(mesh04, 1e-8), k=3)
    mu2 = g.eigenvalues[1]
    # uniform density with lam / |Omega| at the second Dirichlet eigenvalue: mean-zero kernel
    area = mesh04.area
    s = linearized_spectrum_meanfield(r, k=4, lam=area * mu2, density=np.full(mesh04.n_nodes, 1 / area))
    assert s.min_abs_eigenvalue < 1e-6 * mu2


def test_gelfand_spectrum_signs(mesh04):
    low = solve_gelfand(mesh04, 0.3)
    assert linearized_spectrum_gelfand(low, k=3).smallest > 0
    r2 = np.hypot(*mesh04.nodes.T) ** 2
    delta = 20.0
    eps = np.sqrt(oracles.family_eps2(delta))
    up = solve_gelfand(mesh04, eps, guess=oracles.family_u(delta, np.sqrt(r2)))
    assert up.converged and up.u.max() > 5
    assert linearized_spectrum_gelfand(up, k=3).smallest < -1.0


def test_bubble_diagnose(mesh02):
    r = solve_mean_field(mesh02, 1.0)
    assert "no bubble" in bubble_diagnose(r).flags
    delta = 20.0
    eps = np.sqrt(oracles.family_eps2(delta))
    up = solve_gelfand(mesh02, eps, guess=oracles.family_u(delta, np.hypot(*mesh02.nodes.T)))
    rep = bubble_diagnose(up, 1, r0=1.0)
    assert len(rep.peaks) == 1 and np.hypot(*rep.peaks[0]) < 1e-3
    assert rep.local_masses[0] == pytest.approx(up.lam, rel=1e-3)
    assert rep.flags == []


def test_expansion_check_closed_family():
    deltas = np.array([5, 10, 20, 40, 80, 160.0])
    lam = oracles.family_lambda(deltas)
    rho_max = 8 * deltas / lam  # (1 + delta)^2 eps^2 / lam on the closed family
    rep = expansion_check(lam, rho_max, d_omega_sign=-1)
    assert rep.limiting_sign == -1 and rep.consistent
    assert rep.s_values[-1] == pytest.approx(-8.0, rel=1e-2)
    with pytest.raises(SolverError):
        expansion_check(lam[:3], rho_max[:3])


def test_guess_shape_checked(mesh04):
    with pytest.raises(SolverError):
        solve_mean_field(mesh04, 1.0, guess=np.zeros(3))


def test_square_mesh_mean_field_symmetry():
    mesh = build_mesh(Domain.rectangle(1.0, 1.0), 0.05)
    r = solve_mean_field(mesh, 15.0)
    u = r.u.values
    d, j = cKDTree(mesh.nodes).query(mesh.nodes * np.array([-1.0, 1.0]))
    mirrored = d < 1e-12
    if mirrored.mean() < 0.5:
        pytest.skip("mesh is not mirror symmetric")
    assert np.abs(u[j[mirrored]] - u[mirrored]).max() < 1e-8


def test_local_mass_default_radius(mesh02):
    delta = 20.0
    eps = np.sqrt(oracles.family_eps2(delta))
    up = solve_gelfand(mesh02, eps, guess=oracles.family_u(delta, np.hypot(*mesh02.nodes.T)))
    rep = bubble_diagnose(up)
    r0 = rep.r0
    assert r0 == pytest.approx(0.25, abs=0.02)
    # mass of the radial family inside the ball of radius r0
    assert rep.local_masses[0] == pytest.approx(8 * np.pi * delta * r0**2 / (1 + delta * r0**2), rel=2e-2)
