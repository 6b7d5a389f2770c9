import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polytherm import relent
from polytherm.constitutive import EnergyModel
from polytherm.grid import Grid
from polytherm.minors import minors_vector
from polytherm.relent import (
    DegenerateSampling,
    RegionGamma,
    SmoothnessLoss,
    WeakStrongConfig,
    gronwall_fit,
    integrated_I,
    lemma1_check,
    lemma2_check,
    lemma3_check,
    perturbed_initial,
    rel_entropy_I,
    rel_eta,
    rel_psi,
    rel_psi_xi,
    weak_strong_experiment,
)
from polytherm.solver import InitialData, Mode

MODEL = EnergyModel()

LINE_REFERENCE = InitialData(
    displacement=(Mode(0, 0.02, (1, 0, 0)), Mode(1, 0.02, (1, 0, 0), "cos")),
    velocity=(Mode(2, 0.05, (1, 0, 0)),),
    theta_mean=1.0,
    theta_modes=(Mode(0, 0.1, (1, 0, 0), "cos"),),
)
LINE_PERTURBATION = InitialData(
    displacement=(Mode(0, 1.0, (2, 0, 0)),),
    velocity=(Mode(1, 1.0, (1, 0, 0), "cos"),),
    theta_mean=0.0,
    theta_modes=(Mode(0, 1.0, (1, 0, 0)),),
)


def sample_states(rng, n):
    F = np.eye(3) + 0.4 * rng.standard_normal((n, 3, 3))
    return F, rng.standard_normal((n, 3)), 0.3 + 2.0 * rng.random(n)


def test_relative_entropy_vanishes_on_the_diagonal():
    F, v, th = sample_states(np.random.default_rng(0), 10_000)
    assert np.all(rel_entropy_I(F, v, th, F, v, th, MODEL) == 0.0)


def test_velocity_only_difference_is_half_squared_distance():
    rng = np.random.default_rng(1)
    F, v, th = sample_states(rng, 10_000)
    v_bar = rng.standard_normal((10_000, 3))
    np.testing.assert_array_equal(rel_entropy_I(F, v, th, F, v_bar, th, MODEL), 0.5 * np.sum((v - v_bar) ** 2, axis=-1))


def test_relative_entropy_positive_off_diagonal():
    rng = np.random.default_rng(2)
    F, v, th = sample_states(rng, 100_000)
    Fb, vb, thb = sample_states(rng, 100_000)
    assert rel_entropy_I(F, v, th, Fb, vb, thb, MODEL).min() > 0


def test_quadratic_scaling_exponent():
    rng = np.random.default_rng(3)
    Fb, vb, thb = sample_states(rng, 50)
    dF, dv, dth = rng.standard_normal((50, 3, 3)), rng.standard_normal((50, 3)), rng.standard_normal(50)
    amplitudes = np.array([1e-1, 3e-2, 1e-2, 3e-3, 1e-3])
    values = np.array([rel_entropy_I(Fb + s * dF, vb + s * dv, thb + 0.1 * s * dth, Fb, vb, thb, MODEL)
                       for s in amplitudes])
    slopes = np.polyfit(np.log(amplitudes), np.log(values), 1)[0]
    np.testing.assert_allclose(slopes, 2.0, atol=0.05)


def test_relative_entropy_of_linear_entropy_vanishes():
    rng = np.random.default_rng(4)
    F, _, th = sample_states(rng, 100)
    Fb, _, thb = sample_states(rng, 100)
    # eta is affine in (w, theta), so its Taylor remainder is zero
    np.testing.assert_allclose(rel_eta(minors_vector(F), th, minors_vector(Fb), thb, MODEL), 0.0, atol=1e-12)


def test_relative_free_energy_is_second_order_small():
    rng = np.random.default_rng(5)
    Fb, _, thb = sample_states(rng, 20)
    dF = rng.standard_normal((20, 3, 3))
    xb = minors_vector(Fb)
    small = [np.abs(rel_psi(minors_vector(Fb + s * dF), thb, xb, thb, MODEL)).max() for s in (1e-2, 5e-3)]
    assert math.log2(small[0] / small[1]) == pytest.approx(2.0, abs=0.05)
    gap = [np.abs(rel_psi_xi(minors_vector(Fb + s * dF), thb, xb, thb, MODEL)).max() for s in (1e-2, 5e-3)]
    assert math.log2(gap[0] / gap[1]) == pytest.approx(2.0, abs=0.1)


@given(st.floats(-0.3, 0.3), st.floats(-2, 2), st.floats(0.2, 3.0), st.floats(0.2, 3.0))
def test_relative_entropy_nonnegative_property(stretch, velocity, theta, theta_bar):
    F = np.eye(3) + stretch * np.array([[1.0, 0.2, 0.0], [0.0, 0.5, 0.1], [0.3, 0.0, -0.4]])
    value = rel_entropy_I(F, np.array([velocity, 0, 0]), theta, np.eye(3), np.zeros(3), theta_bar, MODEL)
    assert value >= -1e-12


def test_integrated_I_rejects_mismatched_fields():
    grid = Grid.line(8)
    a = InitialData().build(grid, MODEL)
    b = InitialData().build(Grid.line(16), MODEL)
    assert integrated_I((a.u, a.v, a.theta), (a.u, a.v, a.theta), MODEL, grid) == 0.0
    with pytest.raises(ValueError):
        integrated_I((a.u, a.v, a.theta), (b.u, b.v, b.theta), MODEL, grid)


def test_region_validation_and_degenerate_sampling():
    with pytest.raises(ValueError):
        RegionGamma(1.0, 2.0)
    with pytest.raises(ValueError):
        RegionGamma(1.0, 0.0)
    with pytest.raises(DegenerateSampling):
        lemma1_check(MODEL, RegionGamma(1.0, 0.5), samples=0)
    with pytest.raises(ValueError):
        lemma3_check(MODEL, RegionGamma(1.0, 0.5), theta_support=0.0, samples=100)


@pytest.mark.parametrize("check", [lemma1_check, lemma2_check, lemma3_check])
def test_lemma_checks_pass_on_small_samples(check):
    report = check(MODEL, RegionGamma(1.0, 0.5), samples=2000, seed=7)
    assert report.passed, report.constants
    assert all(math.isfinite(v) and v >= 0 for v in report.constants.values())
    assert report.R >= RegionGamma(1.0, 0.5).minimal_R(MODEL)
    rows = list(report.rows())
    assert {r["constant"] for r in rows} == set(report.constants)


def test_lemma_checks_are_seed_deterministic():
    a = lemma1_check(MODEL, RegionGamma(1.0, 0.5), samples=1000, seed=3)
    b = lemma1_check(MODEL, RegionGamma(1.0, 0.5), samples=1000, seed=3)
    assert a.constants == b.constants


def test_support_constant_grows_as_temperature_floor_shrinks():
    values = [lemma3_check(MODEL, RegionGamma(2.0, 0.5), theta_support=s, samples=2000, seed=1).constants["C5"]
              for s in (0.4, 0.2, 0.1)]
    assert values[0] < values[1] < values[2]


def test_gronwall_fit_recovers_exact_exponential():
    t = np.linspace(0, 1, 11)
    values = 3e-4 * np.exp(0.7 * t)
    fit = gronwall_fit(t, values, floor=1e-14)
    # the fit is relative to the initial value, so an exact exponential has C1 = 1
    assert fit.C1 == pytest.approx(1.0, rel=1e-12)
    assert fit.C2 == pytest.approx(0.7, rel=1e-12)
    assert fit.slack == pytest.approx(0.0, abs=1e-12)
    bumped = values.copy()
    bumped[5] *= 1.1
    assert gronwall_fit(t, bumped, floor=1e-14).slack > 0.05
    trivial = gronwall_fit(t, np.zeros_like(t), floor=1e-14)
    assert (trivial.C1, trivial.C2, trivial.slack) == (1.0, 0.0, 0.0)


def test_perturbed_initial_scales_only_the_shape():
    data = perturbed_initial(LINE_REFERENCE, LINE_PERTURBATION, 1e-3)
    assert data.theta_mean == LINE_REFERENCE.theta_mean
    assert data.displacement[-1].amplitude == pytest.approx(1e-3)
    assert len(data.velocity) == len(LINE_REFERENCE.velocity) + 1


def test_weak_strong_experiment_in_line_mode():
    cfg = WeakStrongConfig(MODEL, Grid.line(64), 0.5, LINE_REFERENCE, LINE_PERTURBATION)
    report = weak_strong_experiment(cfg)
    assert report.passed, report.criteria
    for label, fit in report.fits.items():
        values = report.series[label]
        envelope = values[0] * fit.C1 * np.exp(fit.C2 * report.times)
        assert np.all(values <= (1 + cfg.slack_tolerance) * envelope)
    ladder = [report.ladder_final[m] for m in sorted(report.ladder_final, reverse=True)]
    assert ladder[0] > ladder[1] > ladder[2]


def test_identical_candidate_has_zero_relative_entropy():
    cfg = WeakStrongConfig(MODEL, Grid.line(32), 0.2, LINE_REFERENCE, LINE_PERTURBATION, amplitudes=(0.0,),
                           mu_ladder=())
    report = weak_strong_experiment(cfg)
    assert np.all(report.series["perturbed_0"] == 0.0)


def test_smoothness_loss_stops_a_long_horizon():
    reference = InitialData(displacement=(Mode(0, 0.15, (1, 0, 0)),), velocity=(Mode(0, 0.3, (1, 0, 0), "cos"),))
    cfg = WeakStrongConfig(MODEL, Grid.line(256), 2.0, reference, InitialData(velocity=(Mode(0, 1.0, (2, 0, 0)),)),
                           snapshots=40)
    with pytest.raises(SmoothnessLoss) as info:
        weak_strong_experiment(cfg)
    assert info.value.invariant == "lipschitz"
