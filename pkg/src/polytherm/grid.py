"""Uniform periodic grids on the unit torus and the discrete operators on them.

Fields are plain NumPy arrays whose leading three axes are the node axes
``(n1, n2, n3)``; any trailing axes are components. A grid with dims
``(n, 1, 1)`` is the plane-wave (1-D) mode: fields depend on ``x1`` only and
the centered difference along a length-one axis is identically zero, so the
same code serves both modes.

Derivatives are second-order centered differences with periodic wrap. The
divergence is built from the same stencil, which makes it the exact negative
adjoint of the gradient and makes ``D_a D_b = D_b D_a`` hold to round-off.

Snapshot files use the ``PTFLD1`` layout::

    bytes 0..5    b"PTFLD1"
    3 x uint32    node counts n1, n2, n3
    uint32        number of components c
    float64       time stamp
    float64[...]  values, node-major C order (i1 slowest), components fastest

All multi-byte values are little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAGIC = b"PTFLD1"


@dataclass(frozen=True)
class Grid:
    """Node counts of a periodic grid on the unit torus."""

    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3:
            raise ValueError(f"grid needs three node counts, got {dims}")
        if dims[1:] == (1, 1):
            if dims[0] < 4:
                raise ValueError("line grid needs at least 4 nodes")
        elif min(dims) < 4:
            raise ValueError(f"every axis needs at least 4 nodes, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def cube(cls, n: int) -> "Grid":
        return cls((n, n, n))

    @classmethod
    def line(cls, n: int) -> "Grid":
        return cls((n, 1, 1))

    @property
    def mode(self) -> int:
        return 1 if self.dims[1:] == (1, 1) else 3

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(1.0 / n for n in self.dims)

    @property
    def cell_volume(self) -> float:
        return 1.0 / math.prod(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Node coordinates ``x_a = i_a / n_a`` broadcast to the full grid."""
        axes = [np.arange(n) / n for n in self.dims]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def check(self, field: np.ndarray, trailing: tuple[int, ...] | None = None):
        field = np.asarray(field)
        if field.shape[:3] != self.dims:
            raise ValueError(f"field shape {field.shape} does not match grid {self.dims}")
        if trailing is not None and field.shape[3:] != trailing:
            raise ValueError(f"expected components {trailing}, got {field.shape[3:]}")
        return field


def partial(field: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    """Centered difference along node axis ``axis`` (0, 1 or 2)."""
    n = grid.dims[axis]
    if n == 1:
        return np.zeros_like(field, dtype=float)
    return (np.roll(field, -1, axis=axis) - np.roll(field, 1, axis=axis)) * (0.5 * n)


def grad(field: np.ndarray, grid: Grid) -> np.ndarray:
    """Gradient; appends a derivative axis of length 3 to the component axes."""
    field = grid.check(field)
    return np.stack([partial(field, a, grid) for a in range(3)], axis=-1)


def div(field: np.ndarray, grid: Grid) -> np.ndarray:
    """Divergence over the last component axis, which must have length 3."""
    field = grid.check(field)
    if field.ndim < 4 or field.shape[-1] != 3:
        raise ValueError(f"divergence needs a trailing axis of length 3, got {field.shape}")
    return sum(partial(field[..., a], a, grid) for a in range(3))


def deformation_gradient(displacement: np.ndarray, grid: Grid, affine=None) -> np.ndarray:
    """``F = A + grad_h u`` for the motion ``y = A x + u`` (``A = I`` by default)."""
    displacement = grid.check(displacement, (3,))
    A = np.eye(3) if affine is None else np.asarray(affine, dtype=float)
    return grad(displacement, grid) + A


def curl_constraint_residual(F: np.ndarray, grid: Grid) -> float:
    """Max over nodes and indices of ``|D_a F_ib - D_b F_ia|``."""
    F = grid.check(F, (3, 3))
    dF = grad(F, grid)  # [..., i, b, a] = D_a F_ib
    return float(np.max(np.abs(dF - np.swapaxes(dF, -1, -2))))


def _bump(s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def mollifier_weights(n: int, epsilon: float) -> np.ndarray:
    """Periodized, normalized 1-D bump kernel sampled on ``n`` nodes."""
    offsets = np.arange(n) / n
    offsets = np.where(offsets > 0.5, offsets - 1.0, offsets)
    images = int(math.ceil(epsilon)) + 1
    w = sum(_bump((offsets + m) / epsilon) for m in range(-images, images + 1))
    return w / w.sum()


def mollify(field: np.ndarray, grid: Grid, epsilon: float) -> np.ndarray:
    """Convolve with the product kernel ``prod_a rho_eps(x_a)``.

    The discrete kernel is normalized to unit sum, so the grid mean is
    preserved; being circulant it commutes with :func:`grad`.
    """
    field = grid.check(field).astype(float)
    out = field
    for axis, n in enumerate(grid.dims):
        if n == 1:
            continue
        if epsilon < 2.0 / n:
            raise ValueError(f"mollifier width {epsilon} under-resolved on axis {axis} (h = {1 / n})")
        kernel_hat = np.fft.fft(mollifier_weights(n, epsilon))
        shape = [1] * out.ndim
        shape[axis] = n
        out = np.fft.ifft(np.fft.fft(out, axis=axis) * kernel_hat.reshape(shape), axis=axis).real
    return out


def integrate(field: np.ndarray, grid: Grid) -> np.ndarray:
    """Grid quadrature of ``int field dx`` over the node axes."""
    field = grid.check(field)
    return np.sum(field, axis=(0, 1, 2)) * grid.cell_volume


def lp_norm(field: np.ndarray, grid: Grid, p: float) -> float:
    """``L^p`` norm of a scalar or vector field (Euclidean in the components)."""
    field = grid.check(field)
    if not (p == math.inf or p >= 1):
        raise ValueError(f"invalid exponent p = {p}")
    mag = np.abs(field)
    if field.ndim > 3:
        mag = np.sqrt(np.sum(field.reshape(grid.dims + (-1,)) ** 2, axis=-1))
    if p == math.inf:
        return float(np.max(mag))
    return float(integrate(mag**p, grid) ** (1.0 / p))


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """Smooth periodic spatial profile with its analytic gradient."""

    name: str
    value: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

    __test__ = False  # keep pytest from collecting it

    def sample(self, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
        x = grid.coords()
        return np.broadcast_to(self.value(*x), grid.dims).astype(float), self.gradient(*x)


@dataclass(frozen=True)
class TimeWindow:
    """``chi(t) = sin^2(pi (t - t0) / (t1 - t0))`` on ``[t0, t1]``; vanishes with its slope at both ends."""

    t0: float
    t1: float

    def value(self, t):
        s = np.pi * (np.asarray(t, dtype=float) - self.t0) / (self.t1 - self.t0)
        return np.sin(s) ** 2

    def derivative(self, t):
        s = np.pi * (np.asarray(t, dtype=float) - self.t0) / (self.t1 - self.t0)
        return np.pi / (self.t1 - self.t0) * np.sin(2 * s)


TWO_PI = 2.0 * np.pi


def _trig(name, k, kind="cos", offset=0.0, scale=1.0):
    k = np.asarray(k, dtype=float)

    def phase(x1, x2, x3):
        return TWO_PI * (k[0] * x1 + k[1] * x2 + k[2] * x3)

    if kind == "cos":
        def value(x1, x2, x3):
            return offset + scale * np.cos(phase(x1, x2, x3))

        def gradient(x1, x2, x3):
            s = -scale * np.sin(phase(x1, x2, x3))
            return np.stack([TWO_PI * k[a] * s for a in range(3)], axis=-1)
    else:
        def value(x1, x2, x3):
            return offset + scale * np.sin(phase(x1, x2, x3))

        def gradient(x1, x2, x3):
            c = scale * np.cos(phase(x1, x2, x3))
            return np.stack([TWO_PI * k[a] * c for a in range(3)], axis=-1)

    return TestFunction(name, value, gradient)


def _periodic_gauss_1d(x, center, width):
    val = np.zeros_like(x, dtype=float)
    der = np.zeros_like(x, dtype=float)
    for m in range(-2, 3):
        d = x - center + m
        g = np.exp(-0.5 * (d / width) ** 2)
        val += g
        der += -d / width**2 * g
    return val, der


def _gaussian(name, center, width, active=(True, True, True)):
    def parts(x1, x2, x3):
        out = []
        for a, x in enumerate((x1, x2, x3)):
            if active[a]:
                out.append(_periodic_gauss_1d(np.asarray(x, dtype=float), center[a], width))
            else:
                out.append((np.ones_like(x, dtype=float), np.zeros_like(x, dtype=float)))
        return out

    def value(x1, x2, x3):
        (g1, _), (g2, _), (g3, _) = parts(x1, x2, x3)
        return g1 * g2 * g3

    def gradient(x1, x2, x3):
        (g1, d1), (g2, d2), (g3, d3) = parts(x1, x2, x3)
        return np.stack([d1 * g2 * g3, g1 * d2 * g3, g1 * g2 * d3], axis=-1)

    return TestFunction(name, value, gradient)


def _product_trig():
    def value(x1, x2, x3):
        return np.cos(TWO_PI * x1) * np.cos(TWO_PI * x2) * np.cos(TWO_PI * x3)

    def gradient(x1, x2, x3):
        c1, c2, c3 = (np.cos(TWO_PI * x) for x in (x1, x2, x3))
        s1, s2, s3 = (np.sin(TWO_PI * x) for x in (x1, x2, x3))
        return -TWO_PI * np.stack([s1 * c2 * c3, c1 * s2 * c3, c1 * c2 * s3], axis=-1)

    return TestFunction("cos_x1_cos_x2_cos_x3", value, gradient)


def _sin_sin():
    def value(x1, x2, x3):
        return np.sin(TWO_PI * x1) * np.sin(TWO_PI * x3) + 0 * x2

    def gradient(x1, x2, x3):
        return TWO_PI * np.stack(
            [np.cos(TWO_PI * x1) * np.sin(TWO_PI * x3), 0 * x2, np.sin(TWO_PI * x1) * np.cos(TWO_PI * x3)],
            axis=-1,
        )

    return TestFunction("sin_x1_sin_x3", value, gradient)


def _constant():
    def value(x1, x2, x3):
        return np.ones_like(np.asarray(x1, dtype=float))

    def gradient(x1, x2, x3):
        return np.zeros(np.shape(x1) + (3,))

    return TestFunction("one", value, gradient)


def test_catalog() -> list[TestFunction]:
    """The fixed twelve-function catalog used for every distributional pairing."""
    return [
        _constant(),
        _trig("cos_x1", (1, 0, 0)),
        _trig("sin_x2", (0, 1, 0), kind="sin"),
        _trig("cos_x1_plus_x2", (1, 1, 0)),
        _sin_sin(),
        _product_trig(),
        _trig("one_plus_sin_x1_minus_x3", (1, 0, -1), kind="sin", offset=1.0, scale=0.5),
        _trig("sin_2x1", (2, 0, 0), kind="sin"),
        _gaussian("gauss_center", (0.5, 0.5, 0.5), 0.15),
        _gaussian("gauss_offset", (0.25, 0.5, 0.75), 0.12),
        _trig("one_plus_cos_x3", (0, 0, 1), offset=1.0, scale=0.5),
        _gaussian("gauss_plane_x1", (0.3, 0.0, 0.0), 0.12, active=(True, False, False)),
    ]


test_catalog.__test__ = False


def catalog_by_name(name: str) -> TestFunction:
    for fn in test_catalog():
        if fn.name == name:
            return fn
    raise KeyError(f"no test function named {name!r}")


def time_integrate(values: np.ndarray, times: Sequence[float]) -> np.ndarray:
    """Trapezoidal rule over the leading (time) axis."""
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    if values.shape[0] == 0:
        raise ValueError("empty snapshot set")
    if values.shape[0] == 1:
        return values[0]
    dt = np.diff(times)
    return np.tensordot(dt, 0.5 * (values[1:] + values[:-1]), axes=(0, 0))


def pair(field, grid: Grid, test: TestFunction, times=None, window: TimeWindow | None = None) -> float:
    """Quadrature of ``int int field * phi dx dt``.

    With ``times`` omitted, ``field`` is a single scalar field on the grid and
    the result is the spatial integral. Otherwise ``field`` has a leading time
    axis matching ``times`` and is weighted by ``window`` (1 if omitted).
    """
    phi, _ = test.sample(grid)
    field = np.asarray(field, dtype=float)
    if times is None:
        return float(integrate(grid.check(field) * phi, grid))
    if field.shape[0] == 0:
        raise ValueError("empty snapshot set")
    spatial = np.array([integrate(grid.check(f) * phi, grid) for f in field])
    weights = np.ones(len(times)) if window is None else window.value(times)
    return float(time_integrate(spatial * weights, times))


# ---------------------------------------------------------------------------
# snapshot files


def write_snapshot(path, values: np.ndarray, grid: Grid, time: float) -> None:
    values = grid.check(np.asarray(values, dtype="<f8"))
    comps = int(np.prod(values.shape[3:], dtype=int))
    header = MAGIC + struct.pack("<3II d", *grid.dims, comps, float(time))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values).tobytes())


def read_snapshot(path) -> tuple[np.ndarray, Grid, float]:
    """Read a ``PTFLD1`` file; returns values shaped ``dims + (c,)``, grid, time."""
    data = Path(path).read_bytes()
    if data[:6] != MAGIC:
        raise ValueError(f"{path} is not a PTFLD1 snapshot")
    n1, n2, n3, comps, time = struct.unpack_from("<3II d", data, 6)
    offset = 6 + struct.calcsize("<3II d")
    values = np.frombuffer(data, dtype="<f8", offset=offset)
    grid = Grid((n1, n2, n3))
    if values.size != comps * grid.size:
        raise ValueError(f"{path}: payload has {values.size} values, header promises {comps * grid.size}")
    return values.reshape(grid.dims + (comps,)).astype(float), grid, time
