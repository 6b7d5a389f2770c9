import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polytherm import constitutive as cm
from polytherm.constitutive import EnergyModel, GrowthRegion, TemperatureFloorError
from polytherm.minors import minors_vector

MODEL = EnergyModel()

# 6 + 36 + 9 + sqrt(5) + 0.1 * 2 * 2 - 2**2, at F = diag(1, 1, 2), theta = 2 (30-digit mpmath)
HAND_PSI = 49.63606797749979


def random_states(rng, n=200, spread=0.4):
    F = np.eye(3) + spread * rng.standard_normal((n, 3, 3))
    return minors_vector(F), 0.2 + 2.0 * rng.random(n)


def test_free_energy_hand_value():
    xi = minors_vector(np.diag([1.0, 1.0, 2.0]))
    assert cm.free_energy(MODEL, xi, 2.0) == pytest.approx(HAND_PSI, rel=1e-15)


def test_entropy_and_internal_energy_identities(rng):
    xi, theta = random_states(rng)
    ev = cm.evaluate(MODEL, xi, theta)
    np.testing.assert_allclose(ev.eta, -ev.dpsi_dtheta, rtol=0, atol=0)
    np.testing.assert_allclose(ev.e, ev.psi + theta * ev.eta, rtol=1e-14)
    np.testing.assert_allclose(cm.internal_energy(MODEL, xi, theta), ev.e, rtol=1e-13)


def _fd_order(func, analytic, x, direction, steps=(1e-2, 5e-3)):
    errors = []
    for h in steps:
        fd = (func(x + h * direction) - func(x - h * direction)) / (2 * h)
        errors.append(np.max(np.abs(fd - analytic)))
    return errors


def test_first_derivatives_match_finite_differences_at_second_order(rng):
    xi, theta = random_states(rng, n=20)
    g = cm.dpsi_dxi(MODEL, xi, theta)
    for b in (0, 4, 9, 13, 18):
        e_b = np.zeros(19)
        e_b[b] = 1.0
        coarse, fine = _fd_order(lambda x: cm.free_energy(MODEL, x, theta), g[:, b], xi, e_b)
        assert coarse < 1e-6 or math.log2(coarse / fine) >= 1.9
    coarse, fine = _fd_order(lambda t: cm.free_energy(MODEL, xi, t), -cm.entropy(MODEL, xi, theta), theta, 1.0)
    # psi is quadratic in theta, so central differences are exact
    assert max(coarse, fine) <= 1e-10


def test_second_derivatives_match_finite_differences(rng):
    xi, theta = random_states(rng, n=5)
    hess = cm.d2psi_dxi2(MODEL, xi)
    h = 1e-5
    for b in range(19):
        e_b = np.zeros(19)
        e_b[b] = h
        fd = (cm.dpsi_dxi(MODEL, xi + e_b, theta) - cm.dpsi_dxi(MODEL, xi - e_b, theta)) / (2 * h)
        np.testing.assert_allclose(hess[:, :, b], fd, atol=1e-6 * (1 + np.abs(hess).max()))
    mixed = (cm.dpsi_dxi(MODEL, xi, theta + h) - cm.dpsi_dxi(MODEL, xi, theta - h)) / (2 * h)
    np.testing.assert_allclose(cm.d2psi_dxidtheta(MODEL, xi), mixed, atol=1e-9)


@pytest.mark.parametrize("region", [GrowthRegion(f_max=2.0, theta_lo=0.5, theta_hi=2.0),
                                    GrowthRegion(f_max=4.0, theta_lo=0.1, theta_hi=4.0)])
def test_thermal_signs_on_demo_regions(region):
    rng = np.random.default_rng(region.seed)
    theta = region.theta_lo + (region.theta_hi - region.theta_lo) * rng.random(1000)
    xi, _ = random_states(rng, n=1000, spread=region.f_max / 3)
    assert np.all(cm.d2psi_dtheta2(MODEL, theta) < 0)
    h = 1e-4
    eta_theta = (cm.entropy(MODEL, xi, theta + h) - cm.entropy(MODEL, xi, theta - h)) / (2 * h)
    assert np.all(eta_theta > 0)
    assert np.all(cm.heat_capacity(MODEL, theta) > 0)


def test_mechanical_hessian_is_positive_semidefinite(rng):
    xi, _ = random_states(rng, n=100, spread=1.0)
    eig = np.linalg.eigvalsh(cm.d2psi_dxi2(MODEL, xi))
    assert eig.min() > 0


@given(st.floats(0.0, 1.0), st.floats(-3, 3), st.floats(-3, 3))
def test_mechanical_energy_is_convex_in_minors(s, a, b):
    rng = np.random.default_rng(int(1000 * (a + 3)) + int(1000 * (b + 3)))
    x0, x1 = rng.standard_normal((2, 19)) * 2.0
    mid = cm.mechanical_energy(MODEL, (1 - s) * x0 + s * x1)
    chord = (1 - s) * cm.mechanical_energy(MODEL, x0) + s * cm.mechanical_energy(MODEL, x1)
    assert mid <= chord + 1e-9 * (1 + abs(chord))


def test_stress_is_derivative_of_free_energy_in_F(rng):
    F = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    theta = 1.3
    sigma = cm.stress(MODEL, F, theta)
    h = 1e-6
    for i in range(3):
        for a in range(3):
            dF = np.zeros((3, 3))
            dF[i, a] = h
            fd = (cm.free_energy(MODEL, minors_vector(F + dF), theta)
                  - cm.free_energy(MODEL, minors_vector(F - dF), theta)) / (2 * h)
            assert sigma[i, a] == pytest.approx(fd, rel=1e-7, abs=1e-7)
    np.testing.assert_allclose(cm.thermal_stress(MODEL, F), MODEL.kappa * np.linalg.det(F) * np.linalg.inv(F).T,
                               atol=1e-13)


def test_temperature_floor_raises():
    xi = minors_vector(np.eye(3))
    with pytest.raises(TemperatureFloorError):
        cm.evaluate(MODEL, xi, 0.0)


def test_model_validation():
    with pytest.raises(ValueError):
        EnergyModel(alpha2=-1.0)
    with pytest.raises(ValueError):
        EnergyModel(kappa=math.nan)
    assert MODEL.hypothesis_violations() == []
    assert "p >= 4" in EnergyModel(alpha4=0.0, p=2.0).hypothesis_violations()


def test_growth_bounds_hold_on_default_region():
    report = cm.check_growth(MODEL)
    assert all(report.flags.values()), report.flags


def test_free_energy_lower_growth_fails_at_high_temperature():
    # -c theta^2 dominates at large theta, so psi / (|F|^4 + theta^2) turns negative
    report = cm.check_growth(MODEL, GrowthRegion(theta_hi=1000.0))
    assert report.ratios["psi_over_W"][0] < 0
    assert not report.flags["psi_over_W"]
    assert report.flags["e_over_W"]
