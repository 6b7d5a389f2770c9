"""Augmented conservation-law structure in the 23 unknowns ``U = (xi, v, theta)``.

Layouts (last axis):

* state ``U``: ``[xi (19), v (3), theta]``
* conserved ``V = A(U)``: ``[xi (19), v (3), E]`` with ``E = |v|^2/2 + e``
* flux ``f_alpha``: ``[(dPhi/dF) v (19), Sigma_{. alpha} (3), Sigma_{i alpha} v_i]``
* multiplier ``G = (psi_xi, v, -1) / theta``

The entropy is ``H = -eta`` with zero flux. ``grad_U H = G grad_U A`` holds
pointwise. ``G grad_U f_alpha = 0`` holds pointwise when the ``F`` used to
build ``dPhi/dF`` is held fixed. For ``F = grad y`` the term carrying the
derivative of ``dPhi/dF`` is ``psi_xi^B v_i D_alpha(dPhi^B/dF_{i alpha}) /
theta``, which sums to zero over ``alpha`` by the Piola identity.
:func:`entropy_flux_field_residual` measures that summed quantity on a grid.
"""

from __future__ import annotations

import numpy as np

from polytherm import constitutive as cm
from polytherm.constitutive import EnergyModel, TemperatureFloorError
from polytherm.grid import Grid, deformation_gradient, partial
from polytherm.minors import F_SLICE, N_MINORS, contract_jacobian, minors_jacobian, minors_vector

N_STATE = N_MINORS + 4
V_SLICE = slice(N_MINORS, N_MINORS + 3)
THETA_INDEX = N_MINORS + 3


class InversionError(ValueError):
    """Conserved vector outside the attainable range, or Newton did not converge."""


def state_from_fields(F, v, theta) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    batch = np.broadcast_shapes(F.shape[:-2], v.shape[:-1], theta.shape)
    U = np.empty(batch + (N_STATE,))
    U[..., :N_MINORS] = minors_vector(F)
    U[..., V_SLICE] = v
    U[..., THETA_INDEX] = theta
    return U


def unpack(U):
    U = np.asarray(U, dtype=float)
    return U[..., :N_MINORS], U[..., V_SLICE], U[..., THETA_INDEX]


def _kinematic_F(xi):
    xi = np.asarray(xi, dtype=float)
    return xi[..., F_SLICE].reshape(xi.shape[:-1] + (3, 3))


def conserved(U, model: EnergyModel) -> np.ndarray:
    xi, v, theta = unpack(U)
    theta = cm.check_temperature(model, theta)
    V = np.array(U, dtype=float, copy=True)
    V[..., THETA_INDEX] = 0.5 * np.sum(v**2, axis=-1) + cm.internal_energy(model, xi, theta)
    return V


def entropy_H(U, model: EnergyModel) -> np.ndarray:
    xi, _, theta = unpack(U)
    return -cm.entropy(model, xi, cm.check_temperature(model, theta))


def _flux_unchecked(U, F, model, alpha):
    xi, v, theta = unpack(U)
    jac = minors_jacobian(F)[..., alpha]  # (..., 19, 3): dPhi^B/dF_{i alpha}
    g = cm.dpsi_dxi(model, xi, theta)
    sigma_col = np.einsum("...b,...bi->...i", g, jac)
    out = np.empty(np.broadcast_shapes(xi.shape[:-1], np.shape(F)[:-2]) + (N_STATE,))
    out[..., :N_MINORS] = np.einsum("...bi,...i->...b", jac, v)
    out[..., V_SLICE] = sigma_col
    out[..., THETA_INDEX] = np.einsum("...i,...i->...", sigma_col, v)
    return out


def flux(U, F, model: EnergyModel, alpha: int, tol: float = 1e-8) -> np.ndarray:
    """Flux in direction ``alpha`` (0, 1 or 2); requires ``xi = Phi(F)`` within ``tol``."""
    xi, _, theta = unpack(U)
    cm.check_temperature(model, theta)
    F = np.asarray(F, dtype=float)
    gap = np.max(np.abs(xi - minors_vector(F)) / (1.0 + np.abs(xi)))
    if gap > tol:
        raise ValueError(f"minors vector differs from Phi(F) by {gap:.3g} (tolerance {tol:g})")
    return _flux_unchecked(U, F, model, alpha)


def multiplier(U, model: EnergyModel) -> np.ndarray:
    xi, v, theta = unpack(U)
    theta = cm.check_temperature(model, theta)
    G = np.empty(np.shape(U))
    G[..., :N_MINORS] = cm.dpsi_dxi(model, xi, theta)
    G[..., V_SLICE] = v
    G[..., THETA_INDEX] = -1.0
    return G / theta[..., None]


def _fd_jacobian(func, U, step):
    """Central-difference Jacobian of ``func`` (..., m) w.r.t. the state, shape (..., m, 23)."""
    U = np.asarray(U, dtype=float)
    cols = []
    for j in range(N_STATE):
        dU = np.zeros(N_STATE)
        dU[j] = step
        cols.append((func(U + dU) - func(U - dU)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def check_entropy_pair(U, model: EnergyModel, F=None, step: float = 1e-5):
    """Residuals ``rH = |grad H - G grad A|`` and ``rq = max_alpha |G grad f_alpha|``.

    Gradients are central finite differences. ``F`` defaults to the F block
    of ``xi`` and is held fixed while differentiating the flux.
    """
    U = np.asarray(U, dtype=float)
    xi, _, theta = unpack(U)
    cm.check_temperature(model, theta)
    if F is None:
        F = _kinematic_F(xi)
    G = multiplier(U, model)
    dH = _fd_jacobian(lambda X: entropy_H(X, model)[..., None], U, step)[..., 0, :]
    dA = _fd_jacobian(lambda X: conserved(X, model), U, step)
    rH = np.max(np.abs(dH - np.einsum("...m,...mj->...j", G, dA)), axis=-1)
    rq = np.zeros(np.shape(theta))
    for alpha in range(3):
        df = _fd_jacobian(lambda X: _flux_unchecked(X, F, model, alpha), U, step)
        rq = np.maximum(rq, np.max(np.abs(np.einsum("...m,...mj->...j", G, df)), axis=-1))
    return rH, rq


def invert_A(V, model: EnergyModel, theta_guess=None, theta_max: float = 1e6,
             tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Recover ``U`` from ``V`` by solving ``e(xi, theta) = E - |v|^2/2`` for ``theta``.

    Safeguarded Newton: each iterate is kept inside a bisection bracket
    ``[theta_min, theta_max]`` that shrinks monotonically (``e`` is strictly
    increasing in ``theta``).
    """
    V = np.asarray(V, dtype=float)
    xi, v, E = V[..., :N_MINORS], V[..., V_SLICE], V[..., THETA_INDEX]
    target = E - 0.5 * np.sum(v**2, axis=-1)
    lo = np.full(target.shape, model.theta_min)
    hi = np.full(target.shape, float(theta_max))
    e_lo = cm.internal_energy(model, xi, lo)
    e_hi = cm.internal_energy(model, xi, hi)
    if np.any(target <= e_lo):
        raise InversionError("energy below the attainable range e(xi, theta_min)")
    if np.any(target >= e_hi):
        raise InversionError("energy above the attainable range e(xi, theta_max)")
    if theta_guess is None:
        theta = np.sqrt(lo * hi)
    else:
        theta = np.clip(np.broadcast_to(np.asarray(theta_guess, dtype=float), target.shape), lo, hi)
    theta = np.array(theta, dtype=float)
    for _ in range(max_iter):
        resid = cm.internal_energy(model, xi, theta) - target
        lo = np.where(resid < 0, theta, lo)
        hi = np.where(resid > 0, theta, hi)
        slope = cm.heat_capacity(model, theta)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = theta - resid / slope
        inside = (newton > lo) & (newton < hi) & np.isfinite(newton)
        new = np.where(inside, newton, 0.5 * (lo + hi))
        done = np.abs(new - theta) <= tol * np.maximum(theta, 1.0)
        theta = new
        if np.all(done):
            break
    else:
        raise InversionError(f"temperature inversion did not converge in {max_iter} iterations")
    U = np.array(V, dtype=float, copy=True)
    U[..., THETA_INDEX] = theta
    return U


def symmetric_entropy(V, model: EnergyModel, **kwargs) -> np.ndarray:
    """``H~(V) = -eta(xi, theta(V))``."""
    return entropy_H(invert_A(V, model, **kwargs), model)


def symmetric_hessian(V, model: EnergyModel, step: float = 1e-3) -> np.ndarray:
    """Central-difference 23x23 Hessian of ``H~`` for a batch ``V`` (..., 23)."""
    V = np.asarray(V, dtype=float)
    batch = V.shape[:-1]
    eye = np.eye(N_STATE) * step
    pairs = [(i, j) for i in range(N_STATE) for j in range(i, N_STATE)]
    offsets = []
    for i, j in pairs:
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            offsets.append(si * eye[i] + sj * eye[j])
    offsets = np.asarray(offsets)  # (4 * npairs, 23)
    points = V[..., None, :] + offsets
    theta_guess = invert_A(V, model)[..., THETA_INDEX][..., None]
    values = symmetric_entropy(points, model, theta_guess=theta_guess).reshape(batch + (len(pairs), 4))
    second = (values[..., 0] - values[..., 1] - values[..., 2] + values[..., 3]) / (4.0 * step**2)
    hess = np.empty(batch + (N_STATE, N_STATE))
    for k, (i, j) in enumerate(pairs):
        hess[..., i, j] = second[..., k]
        hess[..., j, i] = second[..., k]
    return hess


def symmetric_hessian_min_eig(V, model: EnergyModel, step: float = 1e-3) -> np.ndarray:
    return np.linalg.eigvalsh(symmetric_hessian(V, model, step))[..., 0]


def entropy_flux_field_residual(displacement, velocity, theta, grid: Grid, model: EnergyModel) -> float:
    """Max-norm of ``sum_alpha G(U) . D_alpha f_alpha(U)`` for fields with ``F = grad_h y``.

    Unlike the frozen-``F`` pointwise check, this includes the derivative of
    ``dPhi/dF`` and so vanishes only through the discrete Piola identity; it
    converges to zero at second order under refinement.
    """
    F = deformation_gradient(displacement, grid)
    U = state_from_fields(F, velocity, theta)
    G = multiplier(U, model)
    total = np.zeros(grid.dims)
    for alpha in range(3):
        f = _flux_unchecked(U, F, model, alpha)
        total += np.einsum("...m,...m->...", G, partial(f, alpha, grid))
    return float(np.max(np.abs(total)))
