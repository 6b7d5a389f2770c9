"""Explicit solver for the thermoviscoelastic system in ``(y, v, theta)``.

The motion is ``y = x + u`` with periodic displacement ``u``; ``F = I +
grad_h u`` is recomputed at every stage, so it is a discrete gradient by
construction. The semi-discrete equations are::

    u_t = v
    v_t = div_h Sigma(F, theta) + div_h(mu grad_h v) + b
    c_heat theta_t = theta psi_theta_F : grad_h v + div_h(k grad_h theta)
                     + mu |grad_h v|^2 + r

with ``c_heat = -theta psi_theta_theta``. The temperature equation is the
entropy balance multiplied by ``theta``. Because the divergence is the exact
negative adjoint of the gradient, the semi-discrete total energy
``int |v|^2/2 + e`` changes only through ``int r``. The total entropy
production ``-sum D(1/theta) k D theta + mu |grad v|^2 / theta`` is
nonnegative node by node.

Time stepping is classical RK4 at a fixed step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from polytherm import constitutive as cm
from polytherm.constitutive import EnergyModel
from polytherm.grid import Grid, TWO_PI, deformation_gradient, div, grad, integrate, time_integrate
from polytherm.minors import (
    LEVI_CIVITA,
    W_INDEX,
    Z_SLICE,
    contract_jacobian,
    minors_jacobian,
    minors_vector,
)


class NumericalFailure(RuntimeError):
    """A runtime invariant of the time integration was violated."""

    invariant = "numerical"


class CFLViolation(NumericalFailure):
    invariant = "CFL"


class TemperatureFloorBreach(NumericalFailure):
    invariant = "theta-floor"


class CoefficientBoundBreach(NumericalFailure):
    invariant = "coefficient-bound"


class EnergyBoundBreach(NumericalFailure):
    invariant = "energy-bound"


@dataclass(frozen=True)
class Coefficient:
    """Viscosity or conductivity law.

    ``constant``: the coefficient is ``value`` everywhere. ``state``: it is
    ``value * e / (theta + 1)`` for viscosity and ``value * e * theta / (theta
    + 1)`` for conduction. Both satisfy the coefficient bounds with
    ``mu0 = k0 = value`` automatically.
    """

    value: float = 0.0
    form: str = "constant"

    def __post_init__(self):
        if self.form not in ("constant", "state"):
            raise ValueError(f"unknown coefficient form {self.form!r}")
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError("coefficients must be finite and nonnegative")

    @property
    def active(self) -> bool:
        return self.value > 0

    def viscosity(self, e, theta):
        if self.form == "constant":
            return np.full(np.shape(theta), self.value)
        return self.value * e / (theta + 1.0)

    def conductivity(self, e, theta):
        if self.form == "constant":
            return np.full(np.shape(theta), self.value)
        return self.value * e * theta / (theta + 1.0)


HeatSupply = float | Callable[[Grid, float], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    model: EnergyModel
    grid: Grid
    t_end: float
    mu: Coefficient = Coefficient()
    k: Coefficient = Coefficient()
    heat_supply: HeatSupply = 0.0
    cfl: float = 0.5
    snapshots: int = 10
    dt: float | None = None
    wave_speed: float | None = None
    mu0: float | None = None
    k0: float | None = None
    energy_tolerance: float = 1e-8

    def __post_init__(self):
        if self.t_end <= 0 or self.snapshots < 1:
            raise ValueError("t_end must be positive and snapshots >= 1")
        if not (0 < self.cfl <= 1):
            raise ValueError("cfl must lie in (0, 1]")
        if self.model.c_th <= 0:
            raise ValueError("the solver needs c_th > 0 (positive heat capacity)")

    @property
    def mu_bound(self) -> float:
        return self.mu.value if self.mu0 is None else self.mu0

    @property
    def k_bound(self) -> float:
        return self.k.value if self.k0 is None else self.k0

    def supply(self, t: float) -> np.ndarray:
        if callable(self.heat_supply):
            return np.asarray(self.heat_supply(self.grid, t), dtype=float)
        return np.full(self.grid.dims, float(self.heat_supply))


@dataclass
class SimState:
    t: float
    u: np.ndarray
    v: np.ndarray
    theta: np.ndarray

    def copy(self) -> "SimState":
        return SimState(self.t, self.u.copy(), self.v.copy(), self.theta.copy())

    def stacked(self) -> np.ndarray:
        """Nodal array ``[u (3), v (3), theta]`` used for snapshot files."""
        return np.concatenate([self.u, self.v, self.theta[..., None]], axis=-1)


@dataclass(frozen=True)
class Mode:
    """One Fourier term ``amplitude * sin|cos(2 pi k . x)`` in a given component."""

    component: int
    amplitude: float
    wavevector: tuple[int, int, int]
    kind: str = "sin"

    def sample(self, grid: Grid) -> np.ndarray:
        x = grid.coords()
        phase = TWO_PI * sum(k * xa for k, xa in zip(self.wavevector, x))
        return self.amplitude * (np.sin(phase) if self.kind == "sin" else np.cos(phase))


@dataclass(frozen=True)
class InitialData:
    displacement: tuple[Mode, ...] = ()
    velocity: tuple[Mode, ...] = ()
    theta_mean: float = 1.0
    theta_modes: tuple[Mode, ...] = ()

    def build(self, grid: Grid, model: EnergyModel) -> SimState:
        u = np.zeros(grid.dims + (3,))
        v = np.zeros(grid.dims + (3,))
        for mode in self.displacement:
            u[..., mode.component] += mode.sample(grid)
        for mode in self.velocity:
            v[..., mode.component] += mode.sample(grid)
        theta = np.full(grid.dims, float(self.theta_mean))
        for mode in self.theta_modes:
            theta += mode.sample(grid)
        if np.min(theta) <= model.theta_min:
            raise ValueError("initial temperature below the floor")
        if np.min(np.linalg.det(deformation_gradient(u, grid))) <= 0:
            raise ValueError("initial displacement does not preserve orientation")
        return SimState(0.0, u, v, theta)


@dataclass
class Derived:
    """Fields computed from a state once per stage."""

    F: np.ndarray
    xi: np.ndarray
    jac: np.ndarray
    grad_v: np.ndarray
    grad_theta: np.ndarray
    sigma: np.ndarray
    e: np.ndarray
    mu: np.ndarray
    k: np.ndarray


def derive(state: SimState, cfg: SolverConfig) -> Derived:
    grid, model = cfg.grid, cfg.model
    if not np.all(state.theta > model.theta_min):
        raise TemperatureFloorBreach(
            f"theta-floor: min temperature {float(np.min(state.theta)):.6g} at t = {state.t:.6g}"
        )
    F = deformation_gradient(state.u, grid)
    xi = minors_vector(F)
    jac = minors_jacobian(F)
    sigma = contract_jacobian(jac, cm.dpsi_dxi(model, xi, state.theta))
    e = cm.internal_energy(model, xi, state.theta)
    return Derived(
        F=F,
        xi=xi,
        jac=jac,
        grad_v=grad(state.v, grid),
        grad_theta=grad(state.theta, grid),
        sigma=sigma,
        e=e,
        mu=cfg.mu.viscosity(e, state.theta),
        k=cfg.k.conductivity(e, state.theta),
    )


def check_coefficients(state: SimState, d: Derived, cfg: SolverConfig) -> None:
    """Runtime check of ``|mu theta| < mu0 |e|`` and ``|k| < k0 |e|``."""
    if cfg.mu.active and not np.all(np.abs(d.mu * state.theta) < cfg.mu_bound * np.abs(d.e)):
        raise CoefficientBoundBreach(f"coefficient-bound: |mu theta| >= mu0 |e| at t = {state.t:.6g}")
    if cfg.k.active and not np.all(np.abs(d.k) < cfg.k_bound * np.abs(d.e)):
        raise CoefficientBoundBreach(f"coefficient-bound: |k| >= k0 |e| at t = {state.t:.6g}")


def rhs(state: SimState, cfg: SolverConfig, sources=None, derived: Derived | None = None):
    """Time derivatives ``(du, dv, dtheta)``.

    ``sources`` is an optional callable ``(t) -> (s_u, s_v, s_theta)`` added
    to the three equations (the temperature source is added after dividing
    by the heat capacity), used for manufactured solutions.
    """
    grid, model = cfg.grid, cfg.model
    d = derive(state, cfg) if derived is None else derived
    dv = div(d.sigma, grid)
    if cfg.mu.active:
        dv = dv + div(d.mu[..., None, None] * d.grad_v, grid)
    thermal = contract_jacobian(d.jac, cm.d2psi_dxidtheta(model, d.xi))
    heat = state.theta * np.einsum("...ia,...ia->...", thermal, d.grad_v)
    if cfg.k.active:
        heat = heat + div(d.k[..., None] * d.grad_theta, grid)
    if cfg.mu.active:
        heat = heat + d.mu * np.einsum("...ia,...ia->...", d.grad_v, d.grad_v)
    heat = heat + cfg.supply(state.t)
    dtheta = heat / cm.heat_capacity(model, state.theta)
    du = state.v.copy()
    if sources is not None:
        su, sv, st = sources(state.t)
        du, dv, dtheta = du + su, dv + sv, dtheta + st
    return du, dv, dtheta


def _advance(state, rates, dt, t):
    du, dv, dth = rates
    return SimState(t, state.u + dt * du, state.v + dt * dv, state.theta + dt * dth)


def step(state: SimState, cfg: SolverConfig, dt: float, sources=None) -> SimState:
    """One classical RK4 step."""
    k1 = rhs(state, cfg, sources)
    k2 = rhs(_advance(state, k1, 0.5 * dt, state.t + 0.5 * dt), cfg, sources)
    k3 = rhs(_advance(state, k2, 0.5 * dt, state.t + 0.5 * dt), cfg, sources)
    k4 = rhs(_advance(state, k3, dt, state.t + dt), cfg, sources)
    return SimState(
        state.t + dt,
        state.u + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        state.v + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        state.theta + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
    )


# ---------------------------------------------------------------------------
# step-size control


_DET_HESSIAN_TABLE = np.einsum("ilk,adc->ialdkc", LEVI_CIVITA, LEVI_CIVITA)


def _tangent_bound(model: EnergyModel, d: Derived, theta: np.ndarray) -> float:
    """Upper bound on the largest eigenvalue of ``d^2 psi(Phi(F), theta) / dF^2``.

    Uses ``J^T psi_xixi J + sum_B psi_xi^B d^2 Phi^B / dF^2``; the cofactor
    second derivatives are constant and the determinant ones linear in F.
    """
    n = d.F.reshape(-1, 3, 3).shape[0]
    J = d.jac.reshape(n, 19, 9)
    H = cm.d2psi_dxi2(model, d.xi.reshape(n, 19))
    g = cm.dpsi_dxi(model, d.xi.reshape(n, 19), theta.reshape(n))
    tangent = np.matmul(np.swapaxes(J, 1, 2), np.matmul(H, J))
    eps2 = np.einsum("jil,bad->jbiald", LEVI_CIVITA, LEVI_CIVITA).reshape(9, 9, 9)
    tangent += np.einsum("nz,zij->nij", g[:, Z_SLICE], eps2)
    det2 = np.einsum("ialdkc,nkc->niald", _DET_HESSIAN_TABLE, d.F.reshape(n, 3, 3), optimize=True).reshape(n, 9, 9)
    tangent += g[:, W_INDEX, None, None] * det2
    return float(np.max(np.abs(np.linalg.eigvalsh(tangent))))


def wave_speed_bound(state: SimState, cfg: SolverConfig, d: Derived | None = None) -> float:
    if cfg.wave_speed is not None:
        return cfg.wave_speed
    d = derive(state, cfg) if d is None else d
    model = cfg.model
    stiffness = _tangent_bound(model, d, state.theta)
    # thermoelastic coupling stiffens the adiabatic wave speed
    thermal = contract_jacobian(d.jac, cm.d2psi_dxidtheta(model, d.xi))
    coupling = np.einsum("...ia,...ia->...", thermal, thermal) * state.theta / (2.0 * model.c_th)
    return 1.1 * math.sqrt(stiffness + float(np.max(coupling)))


def stable_step(state: SimState, cfg: SolverConfig, d: Derived | None = None) -> float:
    """Largest step allowed by the wave, viscous and conductive limits (with ``cfl = 1``)."""
    d = derive(state, cfg) if d is None else d
    h = min(1.0 / n for n in cfg.grid.dims if n > 1)
    limits = [h / wave_speed_bound(state, cfg, d)]
    if cfg.mu.active:
        limits.append(h * h / (6.0 * float(np.max(d.mu))))
    if cfg.k.active:
        c_heat = float(np.min(cm.heat_capacity(cfg.model, state.theta)))
        limits.append(h * h * c_heat / (6.0 * float(np.max(d.k))))
    return min(limits)


# ---------------------------------------------------------------------------
# diagnostics and driver


DIAGNOSTIC_COLUMNS = (
    "t",
    "energy",
    "entropy",
    "dissipation_k",
    "dissipation_mu",
    "theta_min",
    "heat_supplied",
    "energy_residual",
    "entropy_residual",
)


@dataclass
class Diagnostics:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)


@dataclass
class Trajectory:
    cfg: SolverConfig
    dt: float
    snapshots: list[SimState]
    diagnostics: Diagnostics

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])


def snapshot_diagnostics(state: SimState, cfg: SolverConfig, d: Derived | None = None) -> dict:
    grid = cfg.grid
    d = derive(state, cfg) if d is None else d
    kinetic = 0.5 * np.sum(state.v**2, axis=-1)
    eta = cm.entropy(cfg.model, d.xi, state.theta)
    gv2 = np.einsum("...ia,...ia->...", d.grad_v, d.grad_v)
    gt2 = np.sum(d.grad_theta**2, axis=-1)
    r = cfg.supply(state.t)
    return {
        "t": state.t,
        "energy": float(integrate(kinetic + d.e, grid)),
        "entropy": float(integrate(eta, grid)),
        "dissipation_k": float(integrate(d.k * gt2 / state.theta**2, grid)) if cfg.k.active else 0.0,
        "dissipation_mu": float(integrate(d.mu * gv2 / state.theta, grid)) if cfg.mu.active else 0.0,
        "theta_min": float(np.min(state.theta)),
        "supply_rate": float(integrate(np.abs(r), grid)),
        "entropy_supply": float(integrate(r / state.theta, grid)),
    }


def lipschitz_norm(state: SimState, grid: Grid, wave_speed: float = 1.0) -> float:
    """``max(|grad_h F|, |grad_h v| / wave_speed, |grad_h theta|)``, used to detect loss of smoothness.

    Dividing the velocity gradient by a wave speed keeps the norm steady while
    smooth waves trade strain for velocity.
    """
    F = deformation_gradient(state.u, grid)
    parts = (
        np.max(np.abs(grad(F, grid))),
        np.max(np.abs(grad(state.v, grid))) / wave_speed,
        np.max(np.abs(grad(state.theta, grid))),
    )
    return float(max(parts))


def run(cfg: SolverConfig, initial: InitialData | SimState, sources=None,
        monitor: Callable[[SimState], None] | None = None) -> Trajectory:
    """Integrate to ``t_end`` storing ``cfg.snapshots + 1`` evenly spaced snapshots."""
    state = initial.build(cfg.grid, cfg.model) if isinstance(initial, InitialData) else initial.copy()
    d = derive(state, cfg)
    check_coefficients(state, d, cfg)
    limit = cfg.cfl * stable_step(state, cfg, d)
    if cfg.dt is not None:
        if cfg.dt > limit:
            raise CFLViolation(f"CFL: dt = {cfg.dt:.6g} exceeds the stable bound {limit:.6g}")
        steps_per = int(math.ceil(cfg.t_end / (cfg.dt * cfg.snapshots) - 1e-9))
    else:
        steps_per = int(math.ceil(cfg.t_end / (limit * cfg.snapshots)))
    steps_per = max(steps_per, 1)
    dt = cfg.t_end / (steps_per * cfg.snapshots)

    snaps = [state.copy()]
    rows = [snapshot_diagnostics(state, cfg, d)]
    heat_in = 0.0
    if monitor is not None:
        monitor(state)
    for _ in range(cfg.snapshots):
        for _ in range(steps_per):
            r0 = float(integrate(np.abs(cfg.supply(state.t)), cfg.grid))
            state = step(state, cfg, dt, sources)
            r1 = float(integrate(np.abs(cfg.supply(state.t)), cfg.grid))
            heat_in += 0.5 * dt * (r0 + r1)
        d = derive(state, cfg)
        check_coefficients(state, d, cfg)
        if dt > stable_step(state, cfg, d):
            raise CFLViolation(f"CFL: dt = {dt:.6g} exceeds the stable bound at t = {state.t:.6g}")
        row = snapshot_diagnostics(state, cfg, d)
        bound = rows[0]["energy"] + heat_in + cfg.energy_tolerance * abs(rows[0]["energy"])
        if sources is None and row["energy"] > bound:
            raise EnergyBoundBreach(
                f"energy-bound: E = {row['energy']:.12g} exceeds E(0) + int|r| = {bound:.12g}"
            )
        row["heat_supplied"] = heat_in
        snaps.append(state.copy())
        rows.append(row)
        if monitor is not None:
            monitor(state)
    rows[0]["heat_supplied"] = 0.0

    traj = Trajectory(cfg, dt, snaps, Diagnostics(rows))
    if len(snaps) >= 3:
        res = energy_equation_residual(traj)
        times = traj.times
        ent = traj.diagnostics.column("entropy")
        for i, row in enumerate(rows):
            if 0 < i < len(rows) - 1:
                rate = (ent[i + 1] - ent[i - 1]) / (times[i + 1] - times[i - 1])
                production = row["dissipation_k"] + row["dissipation_mu"] + row["entropy_supply"]
                row["energy_residual"] = float(res[i - 1])
                row["entropy_residual"] = float(rate - production)
            else:
                row["energy_residual"] = math.nan
                row["entropy_residual"] = math.nan
    return traj


def energy_density_and_flux(state: SimState, cfg: SolverConfig, mu_scale: float = 1.0):
    """Total energy density and the conservative flux of the energy equation."""
    d = derive(state, cfg)
    grid = cfg.grid
    energy = 0.5 * np.sum(state.v**2, axis=-1) + d.e
    flux = np.einsum("...ia,...i->...a", d.sigma, state.v)
    if cfg.mu.active:
        flux = flux + mu_scale * d.mu[..., None] * np.einsum("...i,...ia->...a", state.v, d.grad_v)
    if cfg.k.active:
        flux = flux + d.k[..., None] * d.grad_theta
    return energy, flux


def energy_equation_residual(traj: Trajectory, mu_scale: float = 1.0) -> np.ndarray:
    """Max-norm residual of the conservative energy equation at interior snapshots.

    ``(E^{n+1} - E^{n-1}) / (2 dt) - div_h(flux^n) - r^n`` with the flux
    recomputed from the stored fields. ``mu_scale`` perturbs the viscous flux
    in the evaluator only (sensitivity check).
    """
    snaps = traj.snapshots
    if len(snaps) < 3:
        raise ValueError("energy residual needs at least 3 snapshots")
    cfg = traj.cfg
    dens = []
    fluxes = []
    for s in snaps:
        e, f = energy_density_and_flux(s, cfg, mu_scale)
        dens.append(e)
        fluxes.append(f)
    out = []
    for i in range(1, len(snaps) - 1):
        dt2 = snaps[i + 1].t - snaps[i - 1].t
        resid = (dens[i + 1] - dens[i - 1]) / dt2 - div(fluxes[i], cfg.grid) - cfg.supply(snaps[i].t)
        out.append(float(np.max(np.abs(resid))))
    return np.array(out)


@dataclass
class DiffusionPairing:
    """Space-time pairings of the diffusion terms with one test function.

    ``viscous = |int int mu grad v . grad phi|`` (largest velocity component)
    and ``viscous_bound = (int int mu |grad v|^2 / theta)^(1/2) (int int mu theta
    |grad phi|^2)^(1/2)``; the ``conductive`` pair is the same with
    ``k grad theta`` and the weights ``1 / theta^2`` and ``theta^2``.
    """

    test: str
    viscous: float
    viscous_bound: float
    conductive: float
    conductive_bound: float


def diffusion_pairings(traj: Trajectory, tests) -> list[DiffusionPairing]:
    """Hölder-bounded diffusion pairings over the stored snapshots (trapezoid in time)."""
    cfg, grid = traj.cfg, traj.cfg.grid
    times = traj.times
    derived = [derive(s, cfg) for s in traj.snapshots]
    thetas = [s.theta for s in traj.snapshots]
    visc_energy = time_integrate(
        [float(integrate(d.mu * np.sum(d.grad_v**2, axis=(-2, -1)) / th, grid)) for d, th in zip(derived, thetas)],
        times)
    cond_energy = time_integrate(
        [float(integrate(d.k * np.sum(d.grad_theta**2, axis=-1) / th**2, grid)) for d, th in zip(derived, thetas)],
        times)
    out = []
    for test in tests:
        _, dphi = test.sample(grid)
        if grid.mode == 1:
            dphi = dphi * np.array([1.0, 0.0, 0.0])
        dphi2 = np.sum(dphi**2, axis=-1)
        visc = time_integrate(
            [integrate(d.mu[..., None] * np.einsum("...ia,...a->...i", d.grad_v, dphi), grid) for d in derived],
            times)
        cond = time_integrate(
            [float(integrate(d.k * np.einsum("...a,...a->...", d.grad_theta, dphi), grid)) for d in derived],
            times)
        visc_weight = time_integrate([float(integrate(d.mu * th * dphi2, grid)) for d, th in zip(derived, thetas)],
                                     times)
        cond_weight = time_integrate([float(integrate(d.k * th**2 * dphi2, grid)) for d, th in zip(derived, thetas)],
                                     times)
        out.append(DiffusionPairing(
            test.name,
            float(np.max(np.abs(visc))),
            float(math.sqrt(visc_energy * visc_weight)),
            float(abs(cond)),
            float(math.sqrt(cond_energy * cond_weight)),
        ))
    return out
