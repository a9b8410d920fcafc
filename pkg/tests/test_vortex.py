import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from meanfield.geometry import Domain, build_mesh
from meanfield.green import GreenOracle
from meanfield.vortex import (VortexError, big_d_eval, classify_domain, config_distance, d_omega_eval, ell_eval,
                              f_m_eval, f_m_grad, f_m_hess, f_qj_eval, find_critical_points, g_star_eval,
                              seed_grid)
from meanfield.weight import WeightSpec

ONE = WeightSpec()


def f2_disk(t):
    """Closed form of f_2 at (t, 0), (-t, 0) on the unit disk."""
    return 4 * np.log(1 - t * t) + 4 * np.log((1 + t * t) / (2 * t))


def test_f1_at_disk_center(disk_oracle):
    assert f_m_eval(disk_oracle, ONE, [(0, 0)]) == pytest.approx(0.0, abs=1e-2)


def test_f1_gradient_is_scaled_robin_gradient(disk_oracle):
    x = (0.3, -0.2)
    assert np.allclose(f_m_grad(disk_oracle, ONE, [x]), 4 * np.pi * disk_oracle.robin_grad(x), atol=1e-8)


def test_f2_matches_closed_form_and_rotates(disk_oracle):
    for t in (0.2, 0.4, 0.6):
        assert f_m_eval(disk_oracle, ONE, [(t, 0), (-t, 0)]) == pytest.approx(f2_disk(t), abs=1e-2)
    c, s = np.cos(1.1), np.sin(1.1)
    q = [(0.4 * c, 0.4 * s), (-0.4 * c, -0.4 * s)]
    assert f_m_eval(disk_oracle, ONE, q) == pytest.approx(f_m_eval(disk_oracle, ONE, [(0.4, 0), (-0.4, 0)]),
                                                          abs=1e-3)


def test_f2_on_the_disk_has_no_interior_critical_point(coarse_disk_oracle):
    t = np.linspace(0.05, 0.95, 200)
    assert np.all(np.diff(f2_disk(t)) < 0)
    seeds = seed_grid(Domain.disk(), 2, 3)
    reps, failed = find_critical_points(coarse_disk_oracle, ONE, 2, seeds[:6], with_big_d=False, max_iter=15)
    assert reps == [] and len(failed) == 6


@given(st.permutations([0, 1, 2]))
def test_fm_permutation_invariance(coarse_disk_oracle, perm):
    q = np.array([(0.3, 0.1), (-0.2, 0.25), (0.05, -0.35)])
    f = f_m_eval(coarse_disk_oracle, ONE, q)
    assert f_m_eval(coarse_disk_oracle, ONE, q[list(perm)]) == pytest.approx(f, abs=1e-12)
    g = f_m_grad(coarse_disk_oracle, ONE, q).reshape(3, 2)
    gp = f_m_grad(coarse_disk_oracle, ONE, q[list(perm)]).reshape(3, 2)
    assert np.allclose(gp, g[list(perm)], atol=1e-8)


def test_critical_point_disk_m1(disk_oracle):
    reps, _ = find_critical_points(disk_oracle, ONE, 1, [[(0.2, 0.1)]])
    assert len(reps) == 1
    r = reps[0]
    assert np.hypot(*r.q[0]) < 1e-4
    assert r.hessian_det == pytest.approx(16.0, rel=2e-2)
    assert not r.degenerate and r.ell == 0.0
    assert r.big_d.value < 0


def test_critical_point_rectangle_center(rect_oracle):
    reps, _ = find_critical_points(rect_oracle, ONE, 1, [[(0.05, 0.4)]], with_big_d=False)
    assert abs(reps[0].q[0][0]) < 1e-3 and abs(reps[0].q[0][1]) < 5e-2


def test_argmax_f1_is_robin_argmax(square_oracle):
    reps, _ = find_critical_points(square_oracle, ONE, 1, [[(0.1, -0.1)]], with_big_d=False)
    rob = square_oracle.robin_max([(0.1, -0.1)])
    assert config_distance(reps[0].q, [rob.argmax]) < 1e-5


def test_g_star_and_f_qj(disk_oracle):
    assert g_star_eval(disk_oracle, [(0, 0)], 0, (0, 0)) == pytest.approx(0.0, abs=1e-2)
    q = [(0.4, 0.0), (-0.4, 0.0)]
    expected = 8 * np.pi * (oracles.disk_robin(np.array([0.4, 0])) + oracles.disk_green((0.4, 0), (-0.4, 0)))
    assert g_star_eval(disk_oracle, q, 0, q[0]) == pytest.approx(expected, abs=1e-3 * 8 * np.pi)
    assert f_qj_eval(disk_oracle, ONE, q, 1, q[1]) == 0.0
    with pytest.raises(VortexError):
        g_star_eval(disk_oracle, q, 0, q[1])


def test_ell(disk_oracle):
    assert ell_eval(disk_oracle, ONE, [(0.1, 0.2)]) == 0.0
    assert ell_eval(disk_oracle, WeightSpec("exp(x)"), [(0.1, 0.2)]) == pytest.approx(0.0, abs=1e-12)
    assert ell_eval(disk_oracle, WeightSpec("exp(x**2 + y**2)"), [(0.0, 0.0)]) == pytest.approx(4.0, rel=5e-2)


def test_d_omega_disk_exact(disk_oracle):
    v = d_omega_eval(disk_oracle, (0, 0))
    assert v.value == pytest.approx(-np.pi, abs=1e-2)
    assert v.converged
    # Richardson differences shrink along the radius sequence
    d = np.abs(np.diff(v.iterates))
    assert d[-1] <= d[0] + 1e-12


def test_d_omega_square_against_series(square_oracle):
    v = d_omega_eval(square_oracle, (0, 0))
    assert v.value == pytest.approx(oracles.SQUARE_D_OMEGA, rel=1e-2)


def test_d_omega_rectangle_against_series(rect_oracle):
    q = rect_oracle.robin_max([(0.0, 0.0)]).argmax
    v = d_omega_eval(rect_oracle, q)
    assert v.value > v.error
    assert v.value == pytest.approx(oracles.RECT_1x10_D_OMEGA, rel=2e-2)


def test_d_omega_requires_critical_point(disk_oracle):
    with pytest.raises(VortexError):
        d_omega_eval(disk_oracle, (0.3, 0.0))


def test_series_oracle_reproduces_frozen_values():
    d, g = oracles.rect_d_omega(1.0, 1.0)
    assert d == pytest.approx(oracles.SQUARE_D_OMEGA, rel=1e-9)
    assert g == pytest.approx(oracles.SQUARE_GAMMA_CENTER, rel=1e-9)


def test_big_d_disk_proportional_to_d_omega(disk_oracle):
    # with gamma(0) = 0 the proportionality constant exp(8 pi gamma) is one
    b = big_d_eval(disk_oracle, ONE, [(0, 0)])
    assert b.value == pytest.approx(-np.pi, abs=2e-2)


def test_big_d_sign_matches_d_omega_on_rectangle(rect_oracle):
    q = rect_oracle.robin_max([(0.0, 0.0)]).argmax
    b = big_d_eval(rect_oracle, ONE, [q])
    d = d_omega_eval(rect_oracle, q)
    assert np.sign(b.value) == np.sign(d.value) == 1
    gam = rect_oracle.robin_eval(q)
    assert b.value == pytest.approx(np.exp(8 * np.pi * gam) * d.value, rel=1e-2)


def test_big_d_sign_stable_under_refinement(disk_oracles):
    signs = {np.sign(big_d_eval(o, ONE, [(0, 0)]).value) for o in disk_oracles.values()}
    assert signs == {-1.0}


def test_classifier_verdicts():
    assert classify_domain(Domain.disk(), 0.05).kind == "first"
    assert classify_domain(Domain.rectangle(1.0, 1.0), 0.05).kind == "first"


def test_classifier_invariant_under_motion_and_scaling():
    base = classify_domain(Domain.rectangle(1.0, 10.0), 0.05)
    moved = classify_domain(Domain.rectangle(1.0, 10.0, center=(2.0, -3.0)), 0.05)
    scaled = classify_domain(Domain.rectangle(0.5, 5.0), 0.025)
    assert base.kind == moved.kind == scaled.kind == "second"
    assert moved.d_omega == pytest.approx(base.d_omega, rel=1e-6)
    # D_Omega scales like length^-2 under dilation
    assert scaled.d_omega == pytest.approx(4 * base.d_omega, rel=2e-2)
    disk = classify_domain(Domain.disk(2.0, center=(1.0, 1.0)), 0.1)
    assert disk.kind == "first" and disk.d_omega == pytest.approx(-np.pi / 4, abs=1e-2)


def test_hessian_is_symmetric(coarse_disk_oracle):
    H = f_m_hess(coarse_disk_oracle, ONE, [(0.2, 0.1), (-0.3, -0.1)])
    assert np.allclose(H, H.T)
