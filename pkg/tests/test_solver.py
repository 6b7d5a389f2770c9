import math

import numpy as np
import pytest

from polytherm import constitutive as cm
from polytherm.constitutive import EnergyModel
from polytherm.grid import TWO_PI, Grid, curl_constraint_residual, deformation_gradient, div, test_catalog
from polytherm.minors import contract_jacobian, minors_jacobian, minors_vector
from polytherm.solver import (
    CFLViolation,
    Coefficient,
    CoefficientBoundBreach,
    DIAGNOSTIC_COLUMNS,
    EnergyBoundBreach,
    InitialData,
    Mode,
    SimState,
    SolverConfig,
    TemperatureFloorBreach,
    derive,
    diffusion_pairings,
    energy_equation_residual,
    lipschitz_norm,
    rhs,
    run,
    stable_step,
    step,
)

MODEL = EnergyModel()
LINE_DATA = InitialData(
    displacement=(Mode(0, 0.02, (1, 0, 0)), Mode(1, 0.02, (1, 0, 0), "cos")),
    velocity=(Mode(2, 0.05, (1, 0, 0)),),
    theta_modes=(Mode(0, 0.1, (1, 0, 0), "cos"),),
)
CUBE_DATA = InitialData(
    displacement=(Mode(0, 0.02, (0, 1, 0)), Mode(1, 0.02, (0, 0, 1)), Mode(2, 0.02, (1, 0, 0))),
    velocity=(Mode(0, 0.05, (0, 0, 1), "cos"), Mode(1, 0.05, (1, 0, 0), "cos")),
    theta_modes=(Mode(0, 0.05, (1, 1, 1), "cos"),),
)


def equilibrium(grid, theta=1.3):
    return SimState(0.0, np.zeros(grid.dims + (3,)), np.zeros(grid.dims + (3,)), np.full(grid.dims, theta))


def spectral_derivative(f, n):
    k = np.fft.fftfreq(n, 1.0 / n)
    k[n // 2] = 0.0
    shape = (n,) + (1,) * (f.ndim - 1)
    return np.fft.ifft(1j * TWO_PI * k.reshape(shape) * np.fft.fft(f, axis=0), axis=0).real


def spectral_rhs(state, cfg):
    """Independent right-hand side for a plane wave, with spectral x1-derivatives."""
    n = cfg.grid.dims[0]
    F = np.broadcast_to(np.eye(3), cfg.grid.dims + (3, 3)).copy()
    F[..., :, 0] += spectral_derivative(state.u, n)
    xi = minors_vector(F)
    jac = minors_jacobian(F)
    sigma = contract_jacobian(jac, cm.dpsi_dxi(MODEL, xi, state.theta))
    grad_v = np.zeros(cfg.grid.dims + (3, 3))
    grad_v[..., :, 0] = spectral_derivative(state.v, n)
    grad_theta = spectral_derivative(state.theta, n)
    e = cm.internal_energy(MODEL, xi, state.theta)
    mu = cfg.mu.viscosity(e, state.theta)
    k = cfg.k.conductivity(e, state.theta)
    dv = spectral_derivative(sigma[..., 0] + mu[..., None] * grad_v[..., 0], n)
    thermal = contract_jacobian(jac, cm.d2psi_dxidtheta(MODEL, xi))
    heat = (state.theta * np.einsum("...ia,...ia->...", thermal, grad_v) + spectral_derivative(k * grad_theta, n)
            + mu * np.einsum("...ia,...ia->...", grad_v, grad_v))
    return dv, heat / cm.heat_capacity(MODEL, state.theta)


def test_equilibrium_is_a_fixed_point():
    grid = Grid.cube(8)
    cfg = SolverConfig(MODEL, grid, 0.1, mu=Coefficient(0.01), k=Coefficient(0.01))
    du, dv, dth = rhs(equilibrium(grid), cfg)
    assert np.abs(du).max() == 0.0
    assert np.abs(dv).max() <= 1e-14
    assert np.abs(dth).max() <= 1e-14
    after = step(equilibrium(grid), cfg, 1e-3)
    np.testing.assert_allclose(after.theta, 1.3, atol=1e-14)
    np.testing.assert_allclose(after.u, 0.0, atol=1e-14)


def test_decoupled_temperature_rate_is_supply_over_heat_capacity():
    grid = Grid.line(16)
    cfg = SolverConfig(EnergyModel(kappa=0.0), grid, 1.0, heat_supply=0.7)
    state = LINE_DATA.build(grid, MODEL)
    _, _, dth = rhs(state, cfg)
    np.testing.assert_allclose(dth, 0.7 / (2.0 * MODEL.c_th * state.theta), rtol=1e-14)


@pytest.mark.parametrize("form", ["constant", "state"])
def test_rhs_converges_to_spectral_oracle_at_second_order(form):
    errors = []
    for n in (32, 64, 128):
        grid = Grid.line(n)
        cfg = SolverConfig(MODEL, grid, 1.0, mu=Coefficient(1e-2, form), k=Coefficient(1e-2, form))
        state = LINE_DATA.build(grid, MODEL)
        _, dv, dth = rhs(state, cfg)
        sv, sth = spectral_rhs(state, cfg)
        errors.append((np.abs(dv - sv).max(), np.abs(dth - sth).max()))
    for coarse, fine in zip(errors[-2], errors[-1]):
        assert math.log2(coarse / fine) >= 1.9


def test_linear_wave_follows_discrete_dispersion():
    model = EnergyModel(kappa=0.0)
    # longitudinal stiffness d^2 psi / d F11^2 at F = I for unit coefficients
    c2 = 2.0 + 20.0 + 4.0 + 2.0**-1.5
    amplitude, t_end = 1e-7, 0.3
    for n in (16, 32):
        grid = Grid.line(n)
        traj = run(SolverConfig(model, grid, t_end, cfl=0.25, snapshots=1),
                   InitialData(displacement=(Mode(0, amplitude, (1, 0, 0)),)))
        omega = math.sqrt(c2) * math.sin(TWO_PI / n) * n
        x = grid.coords()[0]
        exact = amplitude * math.cos(omega * t_end) * np.sin(TWO_PI * x)
        # the continuum frequency misses by about 3% at n = 16; the discrete symbol to round-off plus O(amplitude)
        assert np.abs(traj.snapshots[-1].u[..., 0] - exact).max() <= 1e-5 * amplitude


def test_rk4_global_error_is_fourth_order():
    grid = Grid.line(32)
    finals = [run(SolverConfig(MODEL, grid, 0.2, dt=dt, snapshots=1), LINE_DATA).snapshots[-1].u
              for dt in (1.6e-3, 8e-4, 4e-4)]
    e1 = np.abs(finals[0] - finals[1]).max()
    e2 = np.abs(finals[1] - finals[2]).max()
    assert math.log2(e1 / e2) == pytest.approx(4.0, abs=0.15)


def test_uniform_heating_matches_closed_form():
    # 2 c theta theta' = r  =>  theta(t)^2 = theta0^2 + r t / c
    model = EnergyModel(kappa=0.0)
    traj = run(SolverConfig(model, Grid.line(8), 1.0, heat_supply=0.5, snapshots=4), InitialData(theta_mean=1.0))
    for s in traj.snapshots:
        assert s.theta.mean() == pytest.approx(math.sqrt(1.0 + 0.5 * s.t / model.c_th), abs=1e-12)
    heat = traj.diagnostics.column("heat_supplied")
    np.testing.assert_allclose(heat, 0.5 * traj.times, atol=1e-12)


def test_inviscid_energy_conservation_in_three_dimensions():
    traj = run(SolverConfig(MODEL, Grid.cube(16), 0.5, snapshots=10), CUBE_DATA)
    energy = traj.diagnostics.column("energy")
    assert np.abs(energy / energy[0] - 1.0).max() <= 1e-6
    assert np.all(traj.diagnostics.column("dissipation_mu") == 0.0)
    assert np.all(traj.diagnostics.column("dissipation_k") == 0.0)


def test_involution_holds_along_the_run():
    traj = run(SolverConfig(MODEL, Grid.cube(8), 0.1, snapshots=2), CUBE_DATA)
    for s in traj.snapshots:
        assert curl_constraint_residual(deformation_gradient(s.u, Grid.cube(8)), Grid.cube(8)) <= 1e-12


@pytest.mark.parametrize("form", ["constant", "state"])
def test_viscous_entropy_nondecreasing_and_energy_bounded(form):
    cfg = SolverConfig(MODEL, Grid.line(64), 0.5, mu=Coefficient(1e-2, form), k=Coefficient(1e-2, form),
                       snapshots=20)
    traj = run(cfg, LINE_DATA)
    entropy = traj.diagnostics.column("entropy")
    energy = traj.diagnostics.column("energy")
    assert np.diff(entropy).min() >= -1e-8 * abs(entropy[0])
    assert entropy[-1] > entropy[0]
    assert np.all(energy <= energy[0] * (1 + 1e-8))


def test_energy_bound_with_heat_supply():
    cfg = SolverConfig(MODEL, Grid.line(32), 0.3, mu=Coefficient(1e-2), k=Coefficient(1e-2), heat_supply=0.2,
                       snapshots=6)
    d = run(cfg, LINE_DATA).diagnostics
    energy, heat = d.column("energy"), d.column("heat_supplied")
    assert np.all(energy <= energy[0] + heat + 1e-8 * energy[0])
    # with r > 0 the supply enters the energy one-to-one
    assert energy[-1] - energy[0] == pytest.approx(heat[-1], rel=1e-6)


def test_energy_residual_second_order_and_fault_injection():
    init = InitialData(displacement=(Mode(0, 0.02, (1, 0, 0)),), velocity=(Mode(2, 0.4, (1, 0, 0)),),
                       theta_modes=(Mode(0, 0.1, (1, 0, 0), "cos"),))
    clean, injected = [], []
    for n in (128, 256):
        cfg = SolverConfig(MODEL, Grid.line(n), 0.01, mu=Coefficient(0.05), k=Coefficient(0.05), snapshots=40)
        traj = run(cfg, init)
        clean.append(energy_equation_residual(traj).max())
        injected.append(energy_equation_residual(traj, mu_scale=1.01).max())
        s = traj.snapshots[0]
        d = derive(s, cfg)
        plateau = 0.01 * np.abs(div(d.mu[..., None] * np.einsum("...i,...ia->...a", s.v, d.grad_v), cfg.grid)).max()
    assert math.log2(clean[0] / clean[1]) >= 1.9
    assert injected[1] >= 0.9 * plateau
    assert injected[0] / injected[1] < 2.0


def test_energy_residual_vanishes_at_equilibrium():
    grid = Grid.cube(4)
    traj = run(SolverConfig(MODEL, grid, 0.1, mu=Coefficient(0.01), k=Coefficient(0.01), snapshots=3),
               equilibrium(grid))
    assert energy_equation_residual(traj).max() <= 1e-12
    with pytest.raises(ValueError):
        energy_equation_residual(run(SolverConfig(MODEL, grid, 0.1, snapshots=1), equilibrium(grid)))


def test_diffusion_pairings_obey_holder_bound_and_vanish_along_ladder():
    grid = Grid.line(64)
    previous = None
    for mu0 in (1e-2, 1e-3, 1e-4):
        traj = run(SolverConfig(MODEL, grid, 0.5, mu=Coefficient(mu0), k=Coefficient(mu0), snapshots=10), LINE_DATA)
        pairs = diffusion_pairings(traj, test_catalog())
        for p in pairs:
            assert p.viscous <= p.viscous_bound * (1 + 1e-12), p.test
            assert p.conductive <= p.conductive_bound * (1 + 1e-12), p.test
        bounds = (max(p.viscous_bound for p in pairs), max(p.conductive_bound for p in pairs))
        if previous is not None:
            assert bounds[0] <= 1.05 * 0.2 * previous[0]
            assert bounds[1] <= 1.05 * 0.2 * previous[1]
        previous = bounds


def test_diagnostics_columns_present():
    traj = run(SolverConfig(MODEL, Grid.line(16), 0.1, mu=Coefficient(0.01), k=Coefficient(0.01), snapshots=4),
               LINE_DATA)
    for row in traj.diagnostics.rows:
        assert set(DIAGNOSTIC_COLUMNS) <= set(row)
    assert len(traj.snapshots) == 5
    np.testing.assert_allclose(traj.times, np.linspace(0, 0.1, 5), atol=1e-15)


def test_cfl_violation_raises():
    cfg = SolverConfig(MODEL, Grid.cube(16), 0.1, dt=0.1, snapshots=1)
    with pytest.raises(CFLViolation):
        run(cfg, CUBE_DATA)


def test_temperature_floor_breach_raises():
    model = EnergyModel(theta_min=0.5)
    grid = Grid.line(16)
    state = equilibrium(grid, 0.6)
    # strong cooling drives theta below the floor
    cfg = SolverConfig(model, grid, 1.0, heat_supply=-2.0, snapshots=2)
    with pytest.raises(TemperatureFloorBreach):
        run(cfg, state)


def test_coefficient_bound_breach_raises():
    cfg = SolverConfig(MODEL, Grid.line(16), 0.1, mu=Coefficient(1.0), mu0=1e-6)
    with pytest.raises(CoefficientBoundBreach):
        run(cfg, LINE_DATA)


def test_energy_bound_breach_is_detected():
    cfg = SolverConfig(MODEL, Grid.line(16), 0.05, snapshots=2, energy_tolerance=-1e-3)
    with pytest.raises(EnergyBoundBreach):
        run(cfg, LINE_DATA)


def test_orientation_and_floor_validation_of_initial_data():
    with pytest.raises(ValueError):
        InitialData(displacement=(Mode(0, 0.3, (1, 0, 0)),)).build(Grid.line(16), MODEL)
    with pytest.raises(ValueError):
        InitialData(theta_mean=0.0).build(Grid.line(16), MODEL)
    with pytest.raises(ValueError):
        Coefficient(-1.0)
    with pytest.raises(ValueError):
        Coefficient(1.0, "cubic")


def test_stable_step_and_lipschitz_norm():
    grid = Grid.line(32)
    state = LINE_DATA.build(grid, MODEL)
    cfg = SolverConfig(MODEL, grid, 1.0, mu=Coefficient(1.0))
    assert stable_step(state, cfg) <= (1 / 32) ** 2 / 6.0 / 1.0 + 1e-15
    assert lipschitz_norm(equilibrium(grid), grid) == 0.0
    assert lipschitz_norm(state, grid) > 0.0
