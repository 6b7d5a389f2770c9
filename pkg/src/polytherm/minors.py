"""Null-Lagrangian algebra of the minors vector.

The minors vector of a 3x3 matrix ``F`` is

.. math::

    \\Phi(F) = (F, \\operatorname{cof} F, \\det F) \\in \\mathbb{R}^{19},

flattened as: components 0..8 are ``F`` row-major, 9..17 are the cofactor
``Z`` row-major, and 18 is the determinant ``w``. Every module in the
package uses this ordering.

All functions accept batched input of shape ``(..., 3, 3)``.

.. autofunction:: cofactor
.. autofunction:: determinant
.. autofunction:: minors_vector
.. autofunction:: minors_jacobian
.. autofunction:: piola_residual
"""

from __future__ import annotations

import numpy as np

from polytherm.grid import TWO_PI, Grid, deformation_gradient, div

N_MINORS = 19
F_SLICE = slice(0, 9)
Z_SLICE = slice(9, 18)
W_INDEX = 18


def _levi_civita() -> np.ndarray:
    eps = np.zeros((3, 3, 3))
    for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        eps[i, j, k] = 1.0
        eps[i, k, j] = -1.0
    return eps


LEVI_CIVITA = _levi_civita()


def _cofactor_derivative_table():
    # d cof_{j beta} / d F_{i alpha} = eps_jil eps_{beta alpha delta} F_{l delta}: for each
    # (j beta, i alpha) at most one (l, delta) contributes, so store its flat index and sign
    index = np.zeros((9, 9), dtype=int)
    sign = np.zeros((9, 9))
    for j in range(3):
        for b in range(3):
            for i in range(3):
                for a in range(3):
                    for l in range(3):
                        for d in range(3):
                            s = LEVI_CIVITA[j, i, l] * LEVI_CIVITA[b, a, d]
                            if s:
                                index[3 * j + b, 3 * i + a] = 3 * l + d
                                sign[3 * j + b, 3 * i + a] = s
    return index, sign


_DCOF_INDEX, _DCOF_SIGN = _cofactor_derivative_table()


def cofactor(F: np.ndarray) -> np.ndarray:
    """Cofactor matrix, so that ``F @ cof(F).T == det(F) * I``.

    Row ``i`` of the cofactor is the cross product of the two other rows of
    ``F`` taken in cyclic order, which is the contraction
    ``0.5 * eps_ijk eps_abc F_jb F_kc`` written without the zero terms.
    """
    F = np.asarray(F, dtype=float)
    r0, r1, r2 = F[..., 0, :], F[..., 1, :], F[..., 2, :]
    return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)


def determinant(F: np.ndarray) -> np.ndarray:
    """Determinant via the first-row cofactor expansion."""
    F = np.asarray(F, dtype=float)
    return np.einsum("...j,...j->...", F[..., 0, :], np.cross(F[..., 1, :], F[..., 2, :]))


def minors_vector(F: np.ndarray) -> np.ndarray:
    """Return ``Phi(F)`` with shape ``(..., 19)``."""
    F = np.asarray(F, dtype=float)
    batch = F.shape[:-2]
    Z = cofactor(F)
    w = np.einsum("...ij,...ij->...", Z[..., :1, :], F[..., :1, :])
    return np.concatenate(
        [F.reshape(batch + (9,)), Z.reshape(batch + (9,)), w[..., None]], axis=-1
    )


def split_minors(xi: np.ndarray):
    """Return the ``(F, Z, w)`` blocks of a minors vector as views."""
    xi = np.asarray(xi, dtype=float)
    batch = xi.shape[:-1]
    return (
        xi[..., F_SLICE].reshape(batch + (3, 3)),
        xi[..., Z_SLICE].reshape(batch + (3, 3)),
        xi[..., W_INDEX],
    )


def minors_jacobian(F: np.ndarray) -> np.ndarray:
    """Analytic Jacobian ``dPhi^B / dF_{i alpha}`` with shape ``(..., 19, 3, 3)``.

    The cofactor block is linear in ``F``:
    ``d cof_{j beta} / d F_{i alpha} = eps_jil eps_{beta alpha delta} F_{l delta}``,
    and the last row is ``cof(F)`` (Jacobi's formula).
    """
    F = np.asarray(F, dtype=float)
    batch = F.shape[:-2]
    jac = np.zeros(batch + (N_MINORS, 3, 3))
    jac[..., F_SLICE, :, :] = np.eye(9).reshape(9, 3, 3)
    dcof = F.reshape(batch + (9,))[..., _DCOF_INDEX] * _DCOF_SIGN
    jac[..., Z_SLICE, :, :] = dcof.reshape(batch + (9, 3, 3))
    jac[..., W_INDEX, :, :] = cofactor(F)
    return jac


def contract_jacobian(jac: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Contract a 19-vector against the minors index: ``sum_B vec_B dPhi^B/dF``."""
    vec = np.asarray(vec, dtype=float)
    jac = np.asarray(jac)
    batch = np.broadcast_shapes(vec.shape[:-1], jac.shape[:-3])
    flat = np.matmul(vec[..., None, :], jac.reshape(jac.shape[:-2] + (9,)))
    return flat.reshape(batch + (3, 3))


def piola_residual(displacement: np.ndarray, grid: Grid) -> np.ndarray:
    """Discrete divergence of the minors Jacobian for the motion ``y = x + u``.

    Returns an array of shape ``grid.dims + (19, 3)`` holding
    ``sum_alpha D_alpha (dPhi^B/dF_{i alpha})(grad_h y)``. The F and cofactor
    rows vanish to round-off because centered differences commute; the
    determinant row converges at second order.
    """
    F = deformation_gradient(displacement, grid)
    return div(minors_jacobian(F), grid)


def demo_motion(grid: Grid, amplitude: float = 0.1) -> np.ndarray:
    """Displacement of the shipped smooth motion used for Piola refinement studies.

    Each component mixes two directions, so the determinant row of the
    residual is not identically zero.
    """
    x1, x2, x3 = (TWO_PI * c for c in grid.coords())
    return amplitude * np.stack(
        [np.sin(x2) * np.cos(x3), np.sin(x3) * np.cos(x1), np.sin(x1) * np.cos(x2)], axis=-1
    )
