"""Weak continuity of minors, transport identities, Young measures and concentration.

Every "weak limit" here means pairings against the fixed test catalog, followed
along a finite ladder of sequence members. All weak-form residuals go through
one space-time pairing. A density ``rho``, flux ``f`` and source ``s`` satisfy
``d_t rho = d_alpha f_alpha + s`` in the sense of distributions when

    -int int rho phi chi' + int int f_alpha d_alpha(phi) chi - int int s phi chi

vanishes for smooth ``phi(x)`` and windows ``chi(t)``. Spatial integrals are
sums over cells with precomputed integrals of ``phi`` and ``grad phi``, so the
same routine serves nodal fields and cell-averaged Young-measure estimates.

Nodal Young-measure components are ordered ``[F (9), v (3), theta]``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from polytherm import constitutive as cm
from polytherm.constitutive import EnergyModel
from polytherm.grid import (
    TWO_PI,
    Grid,
    TestFunction,
    TimeWindow,
    deformation_gradient,
    integrate,
    lp_norm,
    test_catalog,
    time_integrate,
)
from polytherm.minors import LEVI_CIVITA, W_INDEX, Z_SLICE, F_SLICE, cofactor, determinant, minors_jacobian, minors_vector
from polytherm.relent import _threads

N_COMPONENTS = 13
F_COMPONENTS = slice(0, 9)
V_COMPONENTS = slice(9, 12)
THETA_COMPONENT = 12


class TooFewSnapshots(ValueError):
    pass


class UncertifiedSequence(ValueError):
    """Certified norms grow along the ladder, so the family is not uniformly bounded."""


class UnderResolved(ValueError):
    pass


class MassNotConserved(ValueError):
    pass


# ---------------------------------------------------------------------------
# space-time pairing


@dataclass(frozen=True)
class CellWeights:
    """Integrals of ``phi`` and ``grad phi`` over each cell of a partition."""

    phi: np.ndarray  # (ncells,)
    grad: np.ndarray  # (ncells, 3)


def _cell_ids(grid: Grid, cell: tuple[int, int, int]) -> tuple[np.ndarray, tuple[int, int, int]]:
    counts = tuple(-(-n // c) for n, c in zip(grid.dims, cell))
    idx = np.indices(grid.dims)
    ids = np.ravel_multi_index(tuple(idx[a] // cell[a] for a in range(3)), counts)
    return ids.ravel(), counts


def cell_weights(test: TestFunction, grid: Grid, cell=(1, 1, 1)) -> CellWeights:
    """On a reduced grid the test function is its restriction to the active axes,
    so gradient components along length-1 axes are dropped."""
    phi, gphi = test.sample(grid)
    gphi = gphi * np.array([n > 1 for n in grid.dims], dtype=float)
    vol = grid.cell_volume
    ids, counts = _cell_ids(grid, tuple(cell))
    ncells = int(np.prod(counts))
    w0 = np.bincount(ids, weights=phi.ravel() * vol, minlength=ncells)
    w1 = np.stack([np.bincount(ids, weights=gphi[..., a].ravel() * vol, minlength=ncells) for a in range(3)], axis=1)
    return CellWeights(w0, w1)


def weak_residual(density, flux, times, weights: CellWeights, window: TimeWindow | None = None,
                  source=None) -> np.ndarray:
    """Distributional residual per component for cell data.

    ``density`` has shape ``(T, ncells, m)``, ``flux`` ``(T, ncells, m, 3)`` and
    ``source`` (optional) ``(T, ncells, m)``. Returns the ``(m,)`` residuals.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise TooFewSnapshots("weak residuals need at least 3 time levels")
    window = TimeWindow(times[0], times[-1]) if window is None else window
    chi, dchi = window.value(times), window.derivative(times)
    rho_phi = np.einsum("tcm,c->tm", density, weights.phi)
    flux_grad = np.einsum("tcma,ca->tm", flux, weights.grad)
    integrand = -rho_phi * dchi[:, None] + flux_grad * chi[:, None]
    if source is not None:
        integrand -= np.einsum("tcm,c->tm", source, weights.phi) * chi[:, None]
    return time_integrate(integrand, times)


def _as_tests(test) -> list[TestFunction]:
    if test is None:
        return test_catalog()
    if isinstance(test, TestFunction):
        return [test]
    return list(test)


# ---------------------------------------------------------------------------
# transport-stretching identities


def _nodal(a: np.ndarray, grid: Grid) -> np.ndarray:
    return a.reshape((a.shape[0], grid.size) + a.shape[1 + 3:])


def transport_identity_residual(displacements, times, grid: Grid, test=None, window=None, affine=None):
    """Weak residuals of ``d_t F = grad v``, ``d_t det F = div(cof F v)`` and the cofactor identity.

    ``displacements`` has shape ``(T,) + dims + (3,)`` and describes ``y = A(t) x + u``;
    ``affine`` holds ``A`` per time level (identity if omitted). The velocity is the
    second-order time difference of ``y``. The affine velocity ``A' x`` is not
    periodic, so its contribution enters as the pointwise source ``J(F) : A'``
    (the Piola identity removes the term carrying ``x``). Returns the three
    residuals as the maximum over components and test functions.
    """
    u = np.asarray(displacements, dtype=float)
    times = np.asarray(times, dtype=float)
    if u.shape[0] < 3 or len(times) != u.shape[0]:
        raise TooFewSnapshots("transport residuals need at least 3 snapshots with matching times")
    A = np.broadcast_to(np.eye(3), (len(times), 3, 3)) if affine is None else np.asarray(affine, dtype=float)
    w = np.gradient(u, times, axis=0, edge_order=2)
    A_dot = np.gradient(A, times, axis=0, edge_order=2)
    F = np.stack([deformation_gradient(u[k], grid, A[k]) for k in range(len(times))])
    jac = minors_jacobian(F)  # (T, dims, 19, 3, 3)
    density = _nodal(minors_vector(F), grid)
    flux = _nodal(np.einsum("t...bia,t...i->t...ba", jac, w), grid)
    source = _nodal(np.einsum("t...bia,tia->t...b", jac, A_dot), grid)
    worst = np.zeros(3)
    for phi in _as_tests(test):
        r = np.abs(weak_residual(density, flux, times, cell_weights(phi, grid), window, source))
        worst = np.maximum(worst, [r[F_SLICE].max(), r[W_INDEX], r[Z_SLICE].max()])
    return float(worst[0]), float(worst[1]), float(worst[2])


# ---------------------------------------------------------------------------
# sequence families


Fields = tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class SequenceSpec:
    """A ladder of fixed-time states ``(u, v, theta)`` and their weak-limit state.

    ``member(parameter, grid)`` builds one rung and ``limit(grid)`` the limit.
    ``wavelength(parameter)`` is the finest spatial scale of a rung, used for
    resolution checks. ``p`` is the exponent whose ``W^{1,p}`` bound is certified.
    """

    kind: str
    grid: Grid
    ladder: tuple[float, ...]
    member: Callable[[float, Grid], Fields]
    limit: Callable[[Grid], Fields]
    wavelength: Callable[[float], float]
    p: float = 4.0
    ell: float = 2.0
    q: float = 2.0
    rho: float = 2.0
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("oscillatory", "concentrating", "constant"):
            raise ValueError(f"unknown family kind {self.kind!r}")
        if len(self.ladder) < 2:
            raise ValueError("a ladder needs at least two rungs")

    def members(self) -> list[Fields]:
        with ThreadPoolExecutor(_threads()) as pool:
            return list(pool.map(lambda s: self.member(s, self.grid), self.ladder))

    def certificate(self, members=None) -> list[dict]:
        """Per-rung ``||F||_p``, ``||v||_2``, ``||theta||_ell`` and the recorded ``q, rho`` norms."""
        rows = []
        for s, (u, v, th) in zip(self.ladder, members or self.members()):
            F = deformation_gradient(u, self.grid)
            rows.append({
                "parameter": s,
                "F_Lp": lp_norm(np.linalg.norm(F.reshape(F.shape[:3] + (9,)), axis=-1), self.grid, self.p),
                "v_L2": lp_norm(np.linalg.norm(v, axis=-1), self.grid, 2.0),
                "theta_Lell": lp_norm(th, self.grid, self.ell),
                "cof_Lq": lp_norm(np.linalg.norm(cofactor(F).reshape(F.shape[:3] + (9,)), axis=-1), self.grid, self.q),
                "det_Lrho": lp_norm(determinant(F), self.grid, self.rho),
            })
        return rows

    def certify(self, members=None, growth: float = 4.0) -> list[dict]:
        rows = self.certificate(members)
        for key in ("F_Lp", "v_L2", "theta_Lell"):
            values = [r[key] for r in rows]
            if max(values) > growth * max(values[0], 1e-300):
                raise UncertifiedSequence(f"{key} grows from {values[0]:.4g} to {max(values):.4g} along the ladder")
        return rows


def _zero_fields(grid):
    return np.zeros(grid.dims + (3,)), np.zeros(grid.dims + (3,)), np.ones(grid.dims)


def smooth_base(grid: Grid) -> np.ndarray:
    """Small smooth displacement used as the base motion of the oscillatory demos."""
    x1, x2, x3 = grid.coords()
    u = np.zeros(grid.dims + (3,))
    u[..., 0] = 0.05 * np.sin(TWO_PI * x2)
    u[..., 1] = 0.04 * np.cos(TWO_PI * (x1 + x3))
    u[..., 2] = 0.03 * np.sin(TWO_PI * x1)
    return u


def constant_family(grid: Grid, ladder=(1.0, 0.5, 0.25)) -> SequenceSpec:
    def member(_, g):
        u, v, th = _zero_fields(g)
        return smooth_base(g), v, th

    return SequenceSpec("constant", grid, tuple(ladder), member, lambda g: member(None, g),
                        lambda s: 1.0, label="constant")


def oscillatory_family(grid: Grid, frequencies=(2, 4, 8), base: bool = True) -> SequenceSpec:
    """``y = x + u0 + eps sin(x1 / eps) e1`` with ``eps = 1 / (2 pi m)``.

    ``F11`` oscillates while ``det F`` stays affine in ``F11``. With
    ``base=False`` the family is a pure laminate ``u0 = 0``. The ladder
    parameter is ``eps``. The amplitude is divided by the centered-difference
    symbol so that the discrete ``F11`` oscillates as ``cos(x1 / eps)`` exactly.
    """
    ladder = tuple(1.0 / (TWO_PI * m) for m in frequencies)

    def member(eps, g):
        u, v, th = _zero_fields(g)
        if base:
            u = smooth_base(g)
        h = 1.0 / g.dims[0]
        symbol = math.sin(h / eps) / (h / eps) if g.dims[0] > 1 else 1.0
        u[..., 0] += eps / symbol * np.sin(g.coords()[0] / eps)
        return u, v, th

    def limit(g):
        u, v, th = _zero_fields(g)
        return (smooth_base(g) if base else u), v, th

    return SequenceSpec("oscillatory", grid, ladder, member, limit, lambda eps: TWO_PI * eps, p=4.0,
                        label="gradient oscillation" if base else "laminate")


def _bump(r2):
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out


def _periodic_offset(x, center):
    return (x - center + 0.5) % 1.0 - 0.5


def concentration_profile(z: np.ndarray) -> np.ndarray:
    """``g(z) = b(|z|) (1, z1, z2)``: compactly supported with ``int z3 det grad g != 0``."""
    b = _bump(np.sum(z**2, axis=-1))
    return np.stack([b, b * z[..., 0], b * z[..., 1]], axis=-1)


def concentrating_family(grid: Grid, ladder=(0.25, 0.125, 0.0625), center=(0.5, 0.5, 0.5)) -> SequenceSpec:
    """``u = eps^(-1/3) g((x - x0) / eps)``: bounded in ``W^{1,2}``, unbounded in ``W^{1,4}``.

    The minors of order one and two converge weakly, but the determinant keeps
    an ``O(1)`` gap ``grad phi(x0) . int z det grad g``.
    """

    def member(eps, g):
        x = np.stack([_periodic_offset(c, x0) for c, x0 in zip(g.coords(), center)], axis=-1)
        u, v, th = _zero_fields(g)
        return eps ** (-1.0 / 3.0) * concentration_profile(x / eps), v, th

    def limit(g):
        return _zero_fields(g)

    return SequenceSpec("concentrating", grid, tuple(ladder), member, limit, lambda eps: eps, p=2.0,
                        label="p = 2 concentration")


def duty_cycle_family(grid: Grid, frequencies=(2, 4, 8), values=(1.0, -0.5), fraction=1.0 / 3.0) -> SequenceSpec:
    """Velocity ``v1`` taking ``values[0]`` on a ``fraction`` of each period and ``values[1]`` elsewhere."""
    ladder = tuple(1.0 / m for m in frequencies)
    a, b = values

    def member(wavelength, g):
        u, v, th = _zero_fields(g)
        phase = (g.coords()[0] / wavelength) % 1.0
        v[..., 0] = np.where(phase < fraction - 1e-12, a, b)
        return u, v, th

    def limit(g):
        u, v, th = _zero_fields(g)
        v[..., 0] = fraction * a + (1 - fraction) * b
        return u, v, th

    return SequenceSpec("oscillatory", grid, ladder, member, limit, lambda lam: lam, label="duty cycle")


def gaussian_velocity(grid: Grid, n: float, amplitude=1.0, width=0.25, center=(0.5, 0.5, 0.5)) -> np.ndarray:
    """``v_n = n^{3/2} phi(n (x - x0)) e1`` with a Gaussian ``phi``; ``||v_n||_2`` is fixed."""
    x = np.stack([_periodic_offset(c, x0) for c, x0 in zip(grid.coords(), center)], axis=-1)
    v = np.zeros(grid.dims + (3,))
    v[..., 0] = amplitude * n**1.5 * np.exp(-0.5 * n * n * np.sum(x**2, axis=-1) / width**2)
    return v


def gaussian_kinetic_mass(amplitude=1.0, width=0.25) -> float:
    """Closed form of ``int |phi|^2 / 2`` over R^3 for the Gaussian profile."""
    return 0.5 * amplitude**2 * (math.pi * width**2) ** 1.5


def bump_family(grid: Grid, ladder=(2, 4, 8, 16), centers=((0.625, 0.625, 0.625),), amplitude=1.0, width=0.25) -> SequenceSpec:
    def member(n, g):
        u, v, th = _zero_fields(g)
        for c in centers:
            v += gaussian_velocity(g, n, amplitude, width, c)
        return u, v, th

    return SequenceSpec("concentrating", grid, tuple(float(n) for n in ladder), member, _zero_fields,
                        lambda n: width / n, p=4.0, label="velocity bump")


# ---------------------------------------------------------------------------
# weak continuity of minors


@dataclass
class WeakLimitTable:
    label: str
    parameters: list[float]
    minors_gap: list[float]  # max over catalog and minors components
    det_gap: list[float]
    cof_gap: list[float]
    contrast_gap: list[float]  # (F11)^2 against the square of the limit
    divergence_route_gap: list[float]  # direct <cof F, phi> against the divergence form
    certificate: list[dict]
    verdict: str
    det_verdict: str

    def rows(self):
        for i, s in enumerate(self.parameters):
            yield {
                "family": self.label,
                "parameter": s,
                "minors_gap": self.minors_gap[i],
                "det_gap": self.det_gap[i],
                "cof_gap": self.cof_gap[i],
                "contrast_gap": self.contrast_gap[i],
                "divergence_route_gap": self.divergence_route_gap[i],
            }


def _pairings(field, grid, tests):
    """``<field_m, phi>`` for every test, shape ``(ntests, m)``."""
    flat = field.reshape(grid.size, -1)
    out = []
    for t in tests:
        phi, _ = t.sample(grid)
        out.append(flat.T @ phi.ravel() * grid.cell_volume)
    return np.array(out)


def cofactor_divergence_pairing(u, grid: Grid, test: TestFunction, affine=None) -> np.ndarray:
    """``<cof F, phi>`` through ``cof F = (1/2) d_beta(eps eps y_j F_k gamma)``.

    With ``y = A x + u`` the ``A x`` part is moved onto the pointwise term
    ``(1/2) eps_ijk eps_abg A_jb F_kg``. Returns a 3x3 array.
    """
    A = np.eye(3) if affine is None else np.asarray(affine, dtype=float)
    F = deformation_gradient(u, grid, A)
    phi, gphi = test.sample(grid)
    vol = grid.cell_volume
    flat_u = u.reshape(-1, 3)
    flat_F = F.reshape(-1, 9)
    # node sums first, then the Levi-Civita contraction on small tensors
    F_phi = (flat_F.T @ phi.ravel() * vol).reshape(3, 3)
    ugrad = flat_u[:, :, None] * gphi.reshape(-1, 1, 3)  # (N, j, b)
    moments = (ugrad.reshape(-1, 9).T @ flat_F * vol).reshape(3, 3, 3, 3)  # (j, b, k, g)
    ee = np.einsum("ijk,abg->iajbkg", LEVI_CIVITA, LEVI_CIVITA)
    pointwise = 0.5 * np.einsum("iajbkg,jb,kg->ia", ee, A, F_phi)
    return pointwise - 0.5 * np.einsum("iajbkg,jbkg->ia", ee, moments)


def _decays(gaps, noise, factor=0.5, band=0.05) -> bool:
    gaps = np.asarray(gaps)
    monotone = all(b <= a * (1 + band) + noise for a, b in zip(gaps, gaps[1:]))
    return bool(monotone and gaps[-1] <= max(noise, factor * gaps[0]))


def minors_weak_limit_test(seq: SequenceSpec, tests=None, noise=1e-10) -> WeakLimitTable:
    """Pairing gaps of ``Phi(F^eps)`` against ``Phi(F)`` of the limit along the ladder.

    The verdict is ``PASS`` when every gap decays (monotone within a 5% band,
    finest at most half the coarsest or below ``noise``). A failing determinant
    gap for a family certified only below ``p = 4`` is reported as
    ``EXPECTED-FAIL``: the exponent hypothesis is active.
    """
    tests = _as_tests(tests)
    grid = seq.grid
    members = seq.members()
    cert = seq.certify(members)
    u0, _, _ = seq.limit(grid)
    F0 = deformation_gradient(u0, grid)
    limit_pair = _pairings(minors_vector(F0), grid, tests)
    limit_sq = _pairings(F0[..., 0, 0] ** 2, grid, tests)
    minors_gap, det_gap, cof_gap, contrast, route = [], [], [], [], []
    for u, _, _ in members:
        F = deformation_gradient(u, grid)
        gap = np.abs(_pairings(minors_vector(F), grid, tests) - limit_pair)
        minors_gap.append(float(gap.max()))
        det_gap.append(float(gap[:, W_INDEX].max()))
        cof_gap.append(float(gap[:, Z_SLICE].max()))
        contrast.append(float(np.abs(_pairings(F[..., 0, 0] ** 2, grid, tests) - limit_sq).max()))
        direct = _pairings(cofactor(F).reshape(grid.dims + (9,)), grid, tests)
        via_div = np.array([cofactor_divergence_pairing(u, grid, t).ravel() for t in tests])
        route.append(float(np.abs(direct - via_div).max()))
    scale = max(1.0, float(np.abs(limit_pair).max()))
    all_decay = _decays(minors_gap, noise * scale)
    det_decay = _decays(det_gap, noise * scale)
    if all_decay:
        verdict = "PASS"
    elif seq.p < 4 and not det_decay:
        verdict = "EXPECTED-FAIL"
    else:
        verdict = "FAIL"
    det_verdict = "PASS" if det_decay else ("EXPECTED-FAIL" if seq.p < 4 else "FAIL")
    return WeakLimitTable(seq.label, list(seq.ladder), minors_gap, det_gap, cof_gap, contrast, route, cert,
                          verdict, det_verdict)


# ---------------------------------------------------------------------------
# Young measures


@dataclass
class YoungMeasureEstimate:
    """Per-cell atoms and probability weights over nodal ``[F, v, theta]`` values.

    Atoms of cell ``c`` are ``atoms[offsets[c]:offsets[c + 1]]``. Each atom is
    the mean of the nodal values that fall into one joint bin.
    """

    grid: Grid
    cell: tuple[int, int, int]
    bins: int
    edges: list[np.ndarray]
    offsets: np.ndarray
    atoms: np.ndarray
    weights: np.ndarray
    cell_of_atom: np.ndarray

    @property
    def ncells(self) -> int:
        return len(self.offsets) - 1

    def weight_sums(self) -> np.ndarray:
        return np.bincount(self.cell_of_atom, weights=self.weights, minlength=self.ncells)

    def average(self, observable: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``<nu_c, f>`` per cell; ``f`` maps atoms ``(K, 13)`` to ``(K,)`` or ``(K, m)``."""
        values = np.asarray(observable(self.atoms), dtype=float)
        flat = values.reshape(len(self.atoms), -1) * self.weights[:, None]
        out = np.stack([np.bincount(self.cell_of_atom, weights=flat[:, j], minlength=self.ncells)
                        for j in range(flat.shape[1])], axis=1)
        return out.reshape((self.ncells,) + values.shape[1:])

    def pair(self, observable, test: TestFunction) -> float:
        w = cell_weights(test, self.grid, self.cell)
        return float(np.sum(self.average(observable) * w.phi))

    def histogram(self, cell: int = 0):
        """The ``(weights, atoms)`` of one cell."""
        sl = slice(self.offsets[cell], self.offsets[cell + 1])
        return self.weights[sl], self.atoms[sl]


def nodal_components(u, v, theta, grid: Grid, affine=None) -> np.ndarray:
    F = deformation_gradient(u, grid, affine)
    return np.concatenate([F.reshape(grid.dims + (9,)), v, theta[..., None]], axis=-1)


def young_measure_from_fields(values: np.ndarray, grid: Grid, cell=(1, 1, 1), bins: int = 32) -> YoungMeasureEstimate:
    """Quantize nodal component vectors into joint bins per cell (adaptive range per component)."""
    values = grid.check(np.asarray(values, dtype=float), (N_COMPONENTS,))
    cell = tuple(int(min(c, n)) for c, n in zip(cell, grid.dims))
    flat = values.reshape(grid.size, N_COMPONENTS)
    ids, counts = _cell_ids(grid, cell)
    ncells = int(np.prod(counts))
    edges, codes = [], [ids]
    for j in range(N_COMPONENTS):
        lo, hi = float(flat[:, j].min()), float(flat[:, j].max())
        if hi - lo <= 1e-12 * max(1.0, abs(lo)):
            edges.append(np.array([lo, hi]))
            continue
        e = np.linspace(lo, hi, bins + 1)
        edges.append(e)
        codes.append(np.clip(np.searchsorted(e, flat[:, j], side="right") - 1, 0, bins - 1))
    keys = np.stack(codes, axis=1)
    unique, inverse, size = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    atoms = np.stack([np.bincount(inverse, weights=flat[:, j]) for j in range(N_COMPONENTS)], axis=1) / size[:, None]
    cell_of_atom = unique[:, 0]
    nodes_per_cell = np.bincount(ids, minlength=ncells)
    weights = size / nodes_per_cell[cell_of_atom]
    offsets = np.searchsorted(cell_of_atom, np.arange(ncells + 1))
    return YoungMeasureEstimate(grid, cell, bins, edges, offsets, atoms, weights.astype(float), cell_of_atom)


def default_cell(seq: SequenceSpec) -> tuple[int, int, int]:
    """Four finest wavelengths per cell edge, in nodes."""
    nodes = 4.0 * seq.wavelength(seq.ladder[-1])
    return tuple(max(1, min(n, int(round(nodes * n)))) for n in seq.grid.dims)


def estimate_young_measure(seq: SequenceSpec, cell=None, bins: int = 32, rung: int = -1) -> YoungMeasureEstimate:
    grid = seq.grid
    h = min(1.0 / n for n in grid.dims if n > 1)
    if seq.wavelength(seq.ladder[-1]) < 4.0 * h:
        raise UnderResolved(
            f"finest scale {seq.wavelength(seq.ladder[-1]):.4g} is below four grid spacings ({4 * h:.4g})"
        )
    u, v, th = seq.member(seq.ladder[rung], grid)
    return young_measure_from_fields(nodal_components(u, v, th, grid), grid, cell or default_cell(seq), bins)


def direct_weak_limit(seq: SequenceSpec, observable, test: TestFunction, rung: int = -1) -> float:
    """``<f(U^eps), phi>`` on one rung, for cross-checking a Young-measure estimate."""
    u, v, th = seq.member(seq.ladder[rung], seq.grid)
    vals = nodal_components(u, v, th, seq.grid).reshape(seq.grid.size, N_COMPONENTS)
    phi, _ = test.sample(seq.grid)
    return float(np.sum(np.asarray(observable(vals)) * phi.ravel()) * seq.grid.cell_volume)


# ---------------------------------------------------------------------------
# recession functions


@dataclass
class RecessionResult:
    value: float
    converged: bool
    ladder: np.ndarray
    ratios: np.ndarray


def _from_growth_variables(A, b, c, p, ell):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(A)
    nb = np.linalg.norm(b)
    F = A * na ** (1.0 / p - 1.0) if na > 0 else np.zeros((3, 3))
    v = b / math.sqrt(nb) if nb > 0 else np.zeros(3)
    return F, v, float(c) ** (1.0 / ell)


def recession(observable: Callable, direction, weights=(4.0, 2.0, 2.0), ladder=None, tol=1e-6) -> RecessionResult:
    """Limit of ``g(s z) / (1 + s |z|)`` as ``s`` grows, ``g`` being ``f`` in growth variables.

    ``direction`` is ``(A (3x3), b (3), c)`` with ``c >= 0``, normalized here to
    the unit sphere. The variables ``(A, b, c) = (|F|^{p-1} F, |v| v, theta^ell)``
    map back by ``F = A |A|^{1/p - 1}``, ``v = b / sqrt|b|``, ``theta = c^{1/ell}``.
    ``observable(F, v, theta)`` returns a scalar. The limit is a Richardson
    extrapolation on a geometric ladder assuming a ``1/s`` error; ``converged``
    is a flag, not an exception.
    """
    A, b, c = direction
    if c < 0:
        raise ValueError("the temperature component of the direction must be >= 0")
    z = np.concatenate([np.ravel(A), np.ravel(b), [c]]).astype(float)
    norm = np.linalg.norm(z)
    if norm == 0:
        raise ValueError("direction must be nonzero")
    z /= norm
    p, _, ell = weights
    s = np.logspace(2, 14, 13) if ladder is None else np.asarray(ladder, dtype=float)
    ratios = []
    for sk in s:
        F, v, th = _from_growth_variables(sk * z[:9].reshape(3, 3), sk * z[9:12], sk * z[12], p, ell)
        ratios.append(float(observable(F, v, th)) / (1.0 + sk))
    ratios = np.array(ratios)
    extrap = (s[1:] * ratios[1:] - s[:-1] * ratios[:-1]) / (s[1:] - s[:-1])
    value = float(extrap[-1])
    converged = bool(abs(extrap[-1] - extrap[-2]) <= tol * max(1.0, abs(value)))
    return RecessionResult(value, converged, s, ratios)


def total_energy_observable(model: EnergyModel):
    """``|v|^2 / 2 + e(Phi(F), theta)`` as a function of ``(F, v, theta)`` (theta may be 0)."""

    def f(F, v, theta):
        return 0.5 * float(np.dot(v, v)) + float(cm.internal_energy(model, minors_vector(F), theta))

    return f


# ---------------------------------------------------------------------------
# concentration


@dataclass
class ConcentrationEstimate:
    ladder: list[float]
    cell: tuple[int, int, int]
    cell_mass: list[np.ndarray]  # per rung, gamma mass per cell
    total: list[float]
    representable: list[float]
    energy: list[float]
    thresholds: list[float]
    extrapolated: float
    clipped: float
    sensitivity: dict[float, float]
    peak_cell: int
    peak_fraction: float

    def rows(self):
        for i, n in enumerate(self.ladder):
            yield {
                "parameter": n,
                "threshold": self.thresholds[i],
                "energy": self.energy[i],
                "representable": self.representable[i],
                "gamma": self.total[i],
            }


def _aitken(values) -> float:
    a, b, c = values[-3:]
    denom = (c - b) - (b - a)
    if abs(denom) <= 1e-12 * max(abs(a), abs(b), abs(c), 1e-300):
        return float(c)
    candidate = c - (c - b) ** 2 / denom
    # fall back to the finest rung when the sequence is not geometrically convergent
    if (c - b) * (b - a) <= 0 or not math.isfinite(candidate):
        return float(c)
    return float(candidate)


def energy_density(u, v, theta, grid: Grid, model: EnergyModel) -> np.ndarray:
    F = deformation_gradient(u, grid)
    return 0.5 * np.sum(v**2, axis=-1) + cm.internal_energy(model, minors_vector(F), theta)


THRESHOLD_GROWTH = 0.5


def split_concentration(densities, grid: Grid, refinement, cell=(16, 16, 16), percentile=99.9,
                        threshold_scale=1.0, mass_tolerance=0.02):
    """Per-rung split of ``int f`` into ``int min(f, L_k)`` and the excess over ``L_k``.

    The height of ``L_k`` above the median density of the coarsest rung is
    ``threshold_scale * (P - median) * refinement_k ** THRESHOLD_GROWTH``, with
    ``P`` the chosen percentile of the coarsest rung. The threshold grows along
    the ladder, but far slower than a concentrating peak, so bounded
    oscillations drop below it while concentrations stay above.
    """
    energies = [float(integrate(f, grid)) for f in densities]
    spread = (max(energies) - min(energies)) / max(abs(energies[0]), 1e-300)
    if spread > mass_tolerance:
        raise MassNotConserved(f"energy mass varies by {spread:.3%} along the ladder")
    median = float(np.median(densities[0]))
    height = float(np.percentile(densities[0], percentile)) - median
    ids, counts = _cell_ids(grid, tuple(min(c, n) for c, n in zip(cell, grid.dims)))
    ncells = int(np.prod(counts))
    thresholds, masses, totals, reps = [], [], [], []
    clipped = 0.0
    for f, r in zip(densities, refinement):
        L = median + threshold_scale * height * float(r) ** THRESHOLD_GROWTH
        excess = f - np.minimum(f, L)
        clipped += float(integrate(np.maximum(-excess, 0.0), grid))
        excess = np.maximum(excess, 0.0)
        per_cell = np.bincount(ids, weights=excess.ravel() * grid.cell_volume, minlength=ncells)
        thresholds.append(L)
        masses.append(per_cell)
        totals.append(float(per_cell.sum()))
        reps.append(float(integrate(np.minimum(f, L), grid)))
    return energies, thresholds, masses, totals, reps, clipped


def estimate_concentration(seq: SequenceSpec, model: EnergyModel, cell=(16, 16, 16), percentile=99.9,
                           sensitivity_scales=(0.5, 2.0)) -> ConcentrationEstimate:
    grid = seq.grid
    densities = [energy_density(u, v, th, grid, model) for u, v, th in seq.members()]
    refinement = [seq.wavelength(seq.ladder[0]) / seq.wavelength(s) for s in seq.ladder]
    energies, thresholds, masses, totals, reps, clipped = split_concentration(
        densities, grid, refinement, cell, percentile)
    extrapolated = _aitken(totals) if len(totals) >= 3 else totals[-1]
    sensitivity = {1.0: extrapolated}
    for scale in sensitivity_scales:
        alt = split_concentration(densities, grid, refinement, cell, percentile, threshold_scale=scale)[3]
        sensitivity[float(scale)] = _aitken(alt) if len(alt) >= 3 else alt[-1]
    finest = masses[-1]
    peak = int(np.argmax(finest))
    fraction = float(finest[peak] / finest.sum()) if finest.sum() > 0 else 0.0
    return ConcentrationEstimate(list(seq.ladder), tuple(cell), masses, totals, reps, energies, thresholds,
                                 float(extrapolated), clipped, sensitivity, peak, fraction)


# ---------------------------------------------------------------------------
# averaged equations


@dataclass
class AveragedLevel:
    """A Young-measure estimate at one time plus the gamma mass carried at that time."""

    time: float
    estimate: YoungMeasureEstimate
    gamma: float = 0.0


@dataclass
class AveragedResiduals:
    rows: list[dict]
    energy_gap_with_gamma: float
    energy_gap_without_gamma: float
    gamma_term: float
    energy_scale: float

    @property
    def closes_with_gamma(self) -> bool:
        return self.energy_gap_with_gamma <= 0.05 * self.energy_scale

    @property
    def closes_without_gamma(self) -> bool:
        return self.energy_gap_without_gamma <= 0.05 * self.energy_scale


def dirac_levels(snapshots, grid: Grid) -> list[AveragedLevel]:
    """Nodal Dirac measures (one atom per node) for solver snapshots with ``u, v, theta``."""
    levels = []
    for s in snapshots:
        values = nodal_components(s.u, s.v, s.theta, grid)
        levels.append(AveragedLevel(s.t, young_measure_from_fields(values, grid, (1, 1, 1))))
    return levels


def static_levels(seq: SequenceSpec, rung: int, times, cell=(1, 1, 1)) -> list[AveragedLevel]:
    """One ladder member held fixed in time, as Young-measure levels."""
    u, v, th = seq.member(seq.ladder[rung], seq.grid)
    est = young_measure_from_fields(nodal_components(u, v, th, seq.grid), seq.grid, cell)
    return [AveragedLevel(float(t), est) for t in times]


def _stress_atoms(model):
    def f(atoms):
        F = atoms[:, F_COMPONENTS].reshape(-1, 3, 3)
        xi = minors_vector(F)
        g = cm.dpsi_dxi(model, xi, atoms[:, THETA_COMPONENT])
        return np.einsum("nb,nbia->nia", g, minors_jacobian(F))

    return f


def _energy_atoms(model):
    def f(atoms):
        xi = minors_vector(atoms[:, F_COMPONENTS].reshape(-1, 3, 3))
        return 0.5 * np.sum(atoms[:, V_COMPONENTS] ** 2, axis=1) + cm.internal_energy(model, xi, atoms[:, THETA_COMPONENT])

    return f


def energy_test_window(t_end: float) -> tuple[Callable, Callable]:
    """``phi(t) = cos^2(pi t / (2 T))``: ``phi(0) = 1``, ``phi(T) = 0``."""

    def value(t):
        return np.cos(0.5 * math.pi * np.asarray(t) / t_end) ** 2

    def derivative(t):
        a = 0.5 * math.pi * np.asarray(t) / t_end
        return -(math.pi / t_end) * np.sin(a) * np.cos(a)

    return value, derivative


def averaged_equations_check(levels: Sequence[AveragedLevel], model: EnergyModel, tests=None,
                             heat_supply: float = 0.0) -> AveragedResiduals:
    """Distributional residuals of the averaged momentum and minors equations, the entropy
    inequality deficit, and the time-integrated energy identity with and without gamma.

    The minors equation uses ``Phi`` of the cell-averaged ``F`` and the
    cell-averaged ``v``. The entropy deficit is reported only for nonnegative
    test functions. ``heat_supply`` is a constant ``r``.
    """
    if len(levels) < 3:
        raise TooFewSnapshots("averaged equations need at least 3 time levels")
    times = np.array([lv.time for lv in levels])
    est0 = levels[0].estimate
    grid, cell = est0.grid, est0.cell
    mean_F = np.stack([lv.estimate.average(lambda a: a[:, F_COMPONENTS]).reshape(-1, 3, 3) for lv in levels])
    mean_v = np.stack([lv.estimate.average(lambda a: a[:, V_COMPONENTS]) for lv in levels])
    xi = minors_vector(mean_F)
    minors_flux = np.einsum("tcbia,tci->tcba", minors_jacobian(mean_F), mean_v)
    stress = np.stack([lv.estimate.average(_stress_atoms(model)) for lv in levels])  # (T, c, 3, 3)
    entropy = np.stack([lv.estimate.average(
        lambda a: cm.entropy(model, minors_vector(a[:, F_COMPONENTS].reshape(-1, 3, 3)), a[:, THETA_COMPONENT]))
        for lv in levels])
    supply = np.stack([lv.estimate.average(lambda a: heat_supply / a[:, THETA_COMPONENT]) for lv in levels])

    rows = []
    for test in _as_tests(tests):
        w = cell_weights(test, grid, cell)
        r_minors = np.abs(weak_residual(xi, minors_flux, times, w))
        r_momentum = np.abs(weak_residual(mean_v, stress, times, w))
        row = {"test": test.name, "minors": float(r_minors.max()), "momentum": float(r_momentum.max())}
        phi, _ = test.sample(grid)
        if np.min(phi) >= 0:
            ent = weak_residual(entropy[..., None], np.zeros(entropy.shape + (1, 3)), times, w,
                                source=supply[..., None])[0]
            row["entropy_deficit"] = float(max(0.0, -ent))
        else:
            row["entropy_deficit"] = math.nan
        rows.append(row)

    energy = np.array([float(np.sum(lv.estimate.average(_energy_atoms(model)) * _cell_volumes(lv.estimate)))
                       for lv in levels])
    gamma = np.array([lv.gamma for lv in levels])
    value, derivative = energy_test_window(times[-1] - times[0])
    tau = times - times[0]
    supply_total = heat_supply * float(np.sum(_cell_volumes(est0)))
    rhs = -time_integrate(supply_total * value(tau), times)
    base = value(0.0) * (energy[0] + gamma[0])
    without = base + time_integrate(derivative(tau) * energy, times) - rhs
    gamma_term = float(time_integrate(derivative(tau) * gamma, times))
    with_gamma = without + gamma_term
    return AveragedResiduals(rows, float(abs(with_gamma)), float(abs(without)), gamma_term, float(abs(base)))


def _cell_volumes(est: YoungMeasureEstimate) -> np.ndarray:
    ids, counts = _cell_ids(est.grid, est.cell)
    return np.bincount(ids, minlength=int(np.prod(counts))) * est.grid.cell_volume


def focusing_levels(grid: Grid, model: EnergyModel, n: float, times, amplitude=40.0, width=0.25,
                    cell=(16, 16, 16), bins=32, percentile=99.9, center=(0.625, 0.625, 0.625)):
    """Velocity bump whose width shrinks from ``width`` at the first time to ``width / n`` at the last.

    The ``L^2`` mass is fixed, so no energy is created. Each level splits the
    energy with the :func:`split_concentration` threshold, using the first
    level as the coarsest rung and the current focusing factor as the
    refinement. The representable part is the Young measure of the state with
    its kinetic energy cut to the threshold; gamma is the excess.
    """
    times = np.asarray(times, dtype=float)
    ramp = np.sin(0.5 * math.pi * (times - times[0]) / (times[-1] - times[0])) ** 2
    zeros = np.zeros(grid.dims + (3,))
    theta = np.ones(grid.dims)
    factors = 1.0 + (n - 1.0) * ramp
    velocities = [gaussian_velocity(grid, f, amplitude, width, center) for f in factors]
    densities = [energy_density(zeros, v, theta, grid, model) for v in velocities]
    _, thresholds, _, totals, _, _ = split_concentration(densities, grid, factors, cell, percentile)
    background = float(cm.internal_energy(model, minors_vector(np.eye(3)), 1.0))
    levels = []
    for t, v, L, gamma in zip(times, velocities, thresholds, totals):
        kinetic = 0.5 * np.sum(v**2, axis=-1)
        kept = np.minimum(kinetic, max(L - background, 0.0))
        scale = np.sqrt(np.divide(kept, kinetic, out=np.ones_like(kinetic), where=kinetic > 0))
        values = nodal_components(zeros, v * scale[..., None], theta, grid)
        levels.append(AveragedLevel(float(t), young_measure_from_fields(values, grid, cell, bins), gamma))
    return levels
