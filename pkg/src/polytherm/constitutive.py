"""Polyconvex free energies in the minors variables and their derivatives.

The model family is

.. math::

    \\hat\\psi(\\xi, \\theta) = \\alpha_2 |F|^2 + \\alpha_4 |F|^4 + \\beta |Z|^2
        + \\delta \\sqrt{1 + w^2} + \\gamma w^2 + \\kappa\\theta w - c\\,\\theta^2

with ``xi = (F, Z, w)``. The ``gamma w^2`` term is off by default; it exists
to demonstrate a model that violates the quartic upper growth bound. The
mechanical part (everything except the ``kappa`` and ``c`` terms) is convex
in ``xi``; the entropy ``eta = -psi_theta = -kappa w + 2 c theta`` and the
internal energy ``e = psi + theta eta = mech(xi) + c theta^2`` follow.

Functions take batched minors vectors of shape ``(..., 19)`` and temperatures
broadcastable to ``(...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from polytherm.minors import (
    F_SLICE,
    N_MINORS,
    W_INDEX,
    Z_SLICE,
    contract_jacobian,
    minors_jacobian,
    minors_vector,
    split_minors,
)


class TemperatureFloorError(ValueError):
    """Raised when a temperature at or below the configured floor is evaluated."""


@dataclass(frozen=True)
class EnergyModel:
    alpha2: float = 1.0
    alpha4: float = 1.0
    beta: float = 1.0
    delta_det: float = 1.0
    kappa: float = 0.1
    c_th: float = 1.0
    det_sq: float = 0.0
    p: float = 4.0
    ell: float = 2.0
    theta_min: float = 1e-6

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise ValueError(f"model parameter {f.name} must be finite")
        for name in ("alpha2", "alpha4", "beta", "delta_det", "det_sq", "c_th"):
            if getattr(self, name) < 0:
                raise ValueError(f"model parameter {name} must be nonnegative")
        if self.p < 1 or self.ell <= 1:
            raise ValueError("growth exponents need p >= 1 and ell > 1")
        if self.theta_min <= 0:
            raise ValueError("theta_min must be positive")

    def hypothesis_violations(self) -> list[str]:
        """Hypotheses of the strict polyconvex setting that this model breaks."""
        out = []
        if self.alpha4 <= 0:
            out.append("alpha4 > 0")
        if self.beta <= 0:
            out.append("beta > 0")
        if self.c_th <= 0:
            out.append("c_th > 0")
        if self.p < 4:
            out.append("p >= 4")
        return out

    def replace(self, **changes) -> "EnergyModel":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return EnergyModel(**values)


def check_temperature(model: EnergyModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if not np.all(theta > model.theta_min):
        raise TemperatureFloorError(
            f"temperature {float(np.min(theta)):.6g} at or below floor {model.theta_min:g}"
        )
    return theta


def mechanical_energy(model: EnergyModel, xi) -> np.ndarray:
    F, Z, w = split_minors(xi)
    f2 = np.einsum("...ij,...ij->...", F, F)
    z2 = np.einsum("...ij,...ij->...", Z, Z)
    return (
        model.alpha2 * f2
        + model.alpha4 * f2**2
        + model.beta * z2
        + model.delta_det * np.sqrt(1.0 + w**2)
        + model.det_sq * w**2
    )


def free_energy(model: EnergyModel, xi, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(xi, dtype=float)[..., W_INDEX]
    return mechanical_energy(model, xi) + model.kappa * theta * w - model.c_th * theta**2


def entropy(model: EnergyModel, xi, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(xi, dtype=float)[..., W_INDEX]
    return -model.kappa * w + 2.0 * model.c_th * theta


def internal_energy(model: EnergyModel, xi, theta) -> np.ndarray:
    """``e = mech(xi) + c theta^2``; finite down to ``theta = 0``."""
    theta = np.asarray(theta, dtype=float)
    return mechanical_energy(model, xi) + model.c_th * theta**2


def heat_capacity(model: EnergyModel, theta) -> np.ndarray:
    """``de/dtheta = -theta psi_theta_theta = 2 c theta``."""
    return 2.0 * model.c_th * np.asarray(theta, dtype=float)


def dpsi_dxi(model: EnergyModel, xi, theta) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    F, Z, w = split_minors(xi)
    batch = xi.shape[:-1]
    f2 = np.einsum("...ij,...ij->...", F, F)
    out = np.empty(np.broadcast_shapes(batch, theta.shape) + (N_MINORS,))
    out[..., F_SLICE] = ((2.0 * model.alpha2 + 4.0 * model.alpha4 * f2)[..., None, None] * F).reshape(batch + (9,))
    out[..., Z_SLICE] = (2.0 * model.beta * Z).reshape(batch + (9,))
    out[..., W_INDEX] = (
        model.delta_det * w / np.sqrt(1.0 + w**2) + 2.0 * model.det_sq * w + model.kappa * theta
    )
    return out


def d2psi_dxi2(model: EnergyModel, xi) -> np.ndarray:
    """19x19 Hessian in ``xi``; independent of temperature for this family."""
    xi = np.asarray(xi, dtype=float)
    batch = xi.shape[:-1]
    f = xi[..., F_SLICE]
    w = xi[..., W_INDEX]
    f2 = np.einsum("...i,...i->...", f, f)
    hess = np.zeros(batch + (N_MINORS, N_MINORS))
    eye9 = np.eye(9)
    hess[..., F_SLICE, F_SLICE] = (
        (2.0 * model.alpha2 + 4.0 * model.alpha4 * f2)[..., None, None] * eye9
        + 8.0 * model.alpha4 * np.einsum("...i,...j->...ij", f, f)
    )
    hess[..., Z_SLICE, Z_SLICE] = 2.0 * model.beta * eye9
    hess[..., W_INDEX, W_INDEX] = model.delta_det * (1.0 + w**2) ** -1.5 + 2.0 * model.det_sq
    return hess


def d2psi_dxidtheta(model: EnergyModel, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape)
    out[..., W_INDEX] = model.kappa
    return out


def d2psi_dtheta2(model: EnergyModel, theta) -> np.ndarray:
    return np.full(np.shape(theta), -2.0 * model.c_th)


@dataclass
class ThermoEval:
    psi: np.ndarray
    eta: np.ndarray
    e: np.ndarray
    sigma: np.ndarray | None
    dpsi_dxi: np.ndarray
    d2psi_dxi2: np.ndarray
    dpsi_dtheta: np.ndarray
    d2psi_dxidtheta: np.ndarray
    d2psi_dtheta2: np.ndarray
    extras: dict = field(default_factory=dict)


def evaluate(model: EnergyModel, xi, theta, F=None) -> ThermoEval:
    """Full evaluation at ``(xi, theta)``; the stress needs the concrete ``F``.

    If ``F`` is omitted the F block of ``xi`` is used, which is the right
    choice whenever ``xi = Phi(F)``.
    """
    xi = np.asarray(xi, dtype=float)
    theta = check_temperature(model, theta)
    psi = free_energy(model, xi, theta)
    eta = entropy(model, xi, theta)
    g = dpsi_dxi(model, xi, theta)
    if F is None:
        F = xi[..., F_SLICE].reshape(xi.shape[:-1] + (3, 3))
    sigma = contract_jacobian(minors_jacobian(F), g)
    return ThermoEval(
        psi=psi,
        eta=eta,
        e=psi + theta * eta,
        sigma=sigma,
        dpsi_dxi=g,
        d2psi_dxi2=d2psi_dxi2(model, xi),
        dpsi_dtheta=-eta,
        d2psi_dxidtheta=d2psi_dxidtheta(model, xi),
        d2psi_dtheta2=d2psi_dtheta2(model, theta),
    )


def stress(model: EnergyModel, F, theta) -> np.ndarray:
    """Piola stress ``Sigma_{i alpha} = psi_xi^B(Phi(F), theta) dPhi^B/dF_{i alpha}``."""
    F = np.asarray(F, dtype=float)
    theta = check_temperature(model, theta)
    return contract_jacobian(minors_jacobian(F), dpsi_dxi(model, minors_vector(F), theta))


def thermal_stress(model: EnergyModel, F) -> np.ndarray:
    """``psi_theta_F = sum_B psi_xi_theta^B dPhi^B/dF`` (``kappa cof F`` here)."""
    F = np.asarray(F, dtype=float)
    return contract_jacobian(minors_jacobian(F), d2psi_dxidtheta(model, minors_vector(F)))


# ---------------------------------------------------------------------------
# growth conditions


@dataclass(frozen=True)
class GrowthRegion:
    """Sample region ``|F| <= f_max``, ``theta_lo <= theta <= theta_hi``."""

    f_max: float = 10.0
    theta_lo: float = 0.1
    theta_hi: float = 10.0
    samples: int = 20000
    ray_max: float = 1e3
    seed: int = 0

    def __post_init__(self):
        if self.samples <= 0 or self.f_max <= 0 or self.theta_hi <= self.theta_lo:
            raise ValueError("empty growth region")
        if self.theta_lo <= 0:
            raise ValueError("growth region needs theta bounded away from 0")


@dataclass
class GrowthReport:
    region: GrowthRegion
    ratios: dict[str, tuple[float, float]]
    ray_decay: dict[str, list[float]]
    flags: dict[str, bool]
    ray_scales: list[float]

    def rows(self):
        for name, (lo, hi) in self.ratios.items():
            yield {"quantity": name, "inf": lo, "sup": hi, "pass": self.flags.get(name, "")}


def _growth_weight(model, F, theta):
    fn = np.sqrt(np.einsum("...ij,...ij->...", F, F))
    return fn**model.p + theta**model.ell


def _random_matrices(rng, n, max_norm):
    d = rng.standard_normal((n, 3, 3))
    d /= np.linalg.norm(d.reshape(n, 9), axis=1)[:, None, None]
    return d * (max_norm * rng.random(n) ** (1.0 / 9.0))[:, None, None]


def check_growth(model: EnergyModel, region: GrowthRegion = GrowthRegion()) -> GrowthReport:
    """Sampled and ray-wise evaluation of the growth hypotheses.

    ``ratios`` holds inf/sup over one Monte-Carlo sample set of
    ``e / W``, ``psi / W`` (both bounds, separately) and
    ``|psi_xi| / |psi|`` where ``W = |F|^p + theta^ell``. ``ray_decay``
    holds ``|eta| / W``, ``|psi_F| / W`` and ``|Sigma| / W`` along rays
    ``F = s D``, ``theta = s^(p/ell)`` for a fixed set of unit directions
    ``D`` (the worst direction at each scale is kept), plus ``e / W`` along
    the ``diag(s, s, s)`` ray.
    """
    rng = np.random.default_rng(region.seed)
    n = region.samples
    F = _random_matrices(rng, n, region.f_max)
    theta = region.theta_lo + (region.theta_hi - region.theta_lo) * rng.random(n)
    xi = minors_vector(F)
    weight = _growth_weight(model, F, theta)
    e = internal_energy(model, xi, theta)
    psi = free_energy(model, xi, theta)
    g = dpsi_dxi(model, xi, theta)
    with np.errstate(divide="ignore"):
        gp = np.linalg.norm(g, axis=-1) / np.abs(psi)
    ratios = {
        "e_over_W": (float(np.min(e / weight)), float(np.max(e / weight))),
        "psi_over_W": (float(np.min(psi / weight)), float(np.max(psi / weight))),
        "dpsi_dxi_over_psi": (float(np.min(gp)), float(np.max(gp))),
    }

    scales = list(np.geomspace(1.0, region.ray_max, 13))
    dirs = _random_matrices(rng, 64, 1.0)
    dirs /= np.linalg.norm(dirs.reshape(64, 9), axis=1)[:, None, None]
    dirs = np.concatenate([dirs, np.eye(3)[None] / math.sqrt(3.0)])
    decay = {"eta_over_W": [], "dpsi_dF_over_W": [], "sigma_over_W": [], "e_over_W_diag": []}
    for s in scales:
        Fr = s * dirs
        th = np.full(len(dirs), s ** (model.p / model.ell))
        w_r = _growth_weight(model, Fr, th)
        xr = minors_vector(Fr)
        gr = dpsi_dxi(model, xr, th)
        sig = contract_jacobian(minors_jacobian(Fr), gr)
        decay["eta_over_W"].append(float(np.max(np.abs(entropy(model, xr, th)) / w_r)))
        decay["dpsi_dF_over_W"].append(float(np.max(np.linalg.norm(gr[:, F_SLICE], axis=-1) / w_r)))
        decay["sigma_over_W"].append(float(np.max(np.linalg.norm(sig.reshape(-1, 9), axis=-1) / w_r)))
        Fd = s * np.eye(3)[None]
        one = np.ones(1)
        decay["e_over_W_diag"].append(
            float(internal_energy(model, minors_vector(Fd), one)[0] / _growth_weight(model, Fd, one)[0])
        )

    def decays(series):
        return bool(series[-1] < 1e-2 * series[0] and np.all(np.diff(series) <= 1e-12 * series[0]))

    flags = {
        "e_over_W": ratios["e_over_W"][0] > 0 and math.isfinite(ratios["e_over_W"][1]),
        "psi_over_W": ratios["psi_over_W"][0] > 0 and math.isfinite(ratios["psi_over_W"][1]),
        "dpsi_dxi_over_psi": math.isfinite(ratios["dpsi_dxi_over_psi"][1]),
        "eta_over_W": decays(decay["eta_over_W"]),
        "dpsi_dF_over_W": decays(decay["dpsi_dF_over_W"]),
        "sigma_over_W": decays(decay["sigma_over_W"]),
        "e_over_W_diag": decay["e_over_W_diag"][-1] < 10.0 * max(decay["e_over_W_diag"][0], 1.0),
    }
    return GrowthReport(region, ratios, decay, flags, [float(s) for s in scales])
