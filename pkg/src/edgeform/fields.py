"""Charts, evaluable fields, finite differences and grid interpolation.

Every callable in this package is vectorized: a field maps an array of chart
points with shape ``(..., ndim)`` to values of shape ``(..., *field.shape)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ExtrapolationError, UnsupportedError

_BOUNDARY_TOL = 1e-12

# (offsets, weights) for first and second derivatives; weights are divided by
# h or h**2 afterwards.
_CENTRAL = {
    1: ((-2, -1, 1, 2), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0),
    2: ((-2, -1, 0, 1, 2), np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0),
}
_FORWARD = {
    (1, 2): ((0, 1, 2), np.array([-3.0, 4.0, -1.0]) / 2.0),
    (1, 4): ((0, 1, 2, 3, 4), np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0),
    (2, 2): ((0, 1, 2, 3), np.array([2.0, -5.0, 4.0, -1.0])),
    (2, 4): ((0, 1, 2, 3, 4, 5),
             np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / 12.0),
}


@dataclass(frozen=True)
class ChartBox:
    """Coordinate box ``[0, x_max] x prod(y_ranges) x prod(z_ranges)``.

    Axis order is ``(x, y^1..y^ny, z^1..z^nz)``. ``resolution`` is either one
    sample count used on every axis or one count per axis.
    """

    x_max: float
    y_ranges: tuple = ()
    z_ranges: tuple = ()
    z_periodic: tuple = ()
    resolution: object = 33

    def __post_init__(self):
        if not self.x_max > 0:
            raise DomainError(f"x_max must be positive, got {self.x_max}")
        object.__setattr__(self, "y_ranges", tuple(tuple(map(float, r)) for r in self.y_ranges))
        object.__setattr__(self, "z_ranges", tuple(tuple(map(float, r)) for r in self.z_ranges))
        zp = tuple(bool(p) for p in self.z_periodic) or (False,) * len(self.z_ranges)
        if len(zp) != len(self.z_ranges):
            raise DomainError("z_periodic must have one flag per fiber coordinate")
        object.__setattr__(self, "z_periodic", zp)
        for lo, hi in self.y_ranges + self.z_ranges:
            if not hi > lo:
                raise DomainError(f"empty coordinate range ({lo}, {hi})")
        res = self.resolution
        if np.isscalar(res):
            res = (int(res),) * self.ndim
        res = tuple(int(r) for r in res)
        if len(res) != self.ndim:
            raise DomainError(f"resolution needs {self.ndim} entries, got {len(res)}")
        object.__setattr__(self, "resolution", res)

    @property
    def n_y(self):
        return len(self.y_ranges)

    @property
    def n_z(self):
        return len(self.z_ranges)

    @property
    def ndim(self):
        return 1 + self.n_y + self.n_z

    @property
    def base_dim(self):
        return self.n_y + self.n_z

    @property
    def bounds(self):
        return ((0.0, float(self.x_max)),) + self.y_ranges + self.z_ranges

    @property
    def periodic(self):
        return (False,) * (1 + self.n_y) + self.z_periodic

    def axis_nodes(self, axis, resolution=None):
        lo, hi = self.bounds[axis]
        n = self.resolution[axis] if resolution is None else int(resolution)
        if self.periodic[axis]:
            return lo + (hi - lo) * np.arange(n) / n
        return np.linspace(lo, hi, n)

    def grid_axes(self):
        return tuple(self.axis_nodes(i) for i in range(self.ndim))

    def boundary_axes(self):
        return tuple(self.axis_nodes(i) for i in range(1, self.ndim))

    def boundary_points(self):
        """All boundary grid nodes as an array ``(M, ndim)`` with x = 0."""
        base = mesh_points(self.boundary_axes())
        return np.concatenate([np.zeros(base.shape[:-1] + (1,)), base], axis=-1).reshape(-1, self.ndim)

    def base_box(self):
        """Bounds and periodic flags of the boundary (y, z) coordinates."""
        return self.bounds[1:], self.periodic[1:]

    def refined(self, factor=2):
        res = tuple(
            r * factor if p else (r - 1) * factor + 1
            for r, p in zip(self.resolution, self.periodic)
        )
        return ChartBox(self.x_max, self.y_ranges, self.z_ranges, self.z_periodic, res)

    def contains(self, points, tol=_BOUNDARY_TOL):
        pts = np.asarray(points, dtype=float)
        ok = np.ones(pts.shape[:-1], dtype=bool)
        for i, ((lo, hi), per) in enumerate(zip(self.bounds, self.periodic)):
            if not per:
                ok &= (pts[..., i] >= lo - tol) & (pts[..., i] <= hi + tol)
        return ok


def mesh_points(axes):
    """Tensor-product nodes of ``axes`` as an array ``(n1, ..., nk, k)``."""
    if len(axes) == 0:
        return np.zeros((0,))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class Field:
    """A vectorized scalar, vector or matrix field on (part of) R^ndim.

    ``bounds`` entries may be infinite; ``scales`` gives the length used to
    size finite-difference steps on unbounded axes. ``derivative`` is an
    optional analytic callable ``(points, multi_index) -> values``.
    """

    func: Callable
    ndim: int
    shape: tuple = ()
    bounds: Optional[tuple] = None
    periodic: Optional[tuple] = None
    scales: Optional[tuple] = None
    derivative: Optional[Callable] = None
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.bounds is None:
            object.__setattr__(self, "bounds", ((-math.inf, math.inf),) * self.ndim)
        if self.periodic is None:
            object.__setattr__(self, "periodic", (False,) * self.ndim)
        if self.scales is None:
            object.__setattr__(self, "scales", (1.0,) * self.ndim)

    @classmethod
    def on_box(cls, func, box: ChartBox, shape=(), **kw):
        return cls(func, box.ndim, shape, box.bounds, box.periodic, **kw)

    def __call__(self, points):
        return np.asarray(self.func(np.asarray(points, dtype=float)), dtype=float)

    def step(self, axis):
        lo, hi = self.bounds[axis]
        length = hi - lo if math.isfinite(hi - lo) else self.scales[axis]
        return self.fd_step * length

    def check_domain(self, points):
        pts = np.asarray(points, dtype=float)
        for i, ((lo, hi), per) in enumerate(zip(self.bounds, self.periodic)):
            if per:
                continue
            c = pts[..., i]
            if np.any(c < lo - _BOUNDARY_TOL) or np.any(c > hi + _BOUNDARY_TOL):
                raise DomainError(f"point outside field domain on axis {i}: [{lo}, {hi}]")


def _diff_axis(f, pts, axis, order, h, lo, hi, periodic, boundary_order):
    """Derivative of order 1 or 2 along one axis with per-point stencil choice."""
    flat = pts.reshape(-1, pts.shape[-1])
    pos = flat[:, axis]
    if periodic:
        kinds = np.zeros(len(flat), dtype=int)
    else:
        kinds = np.where(pos - 2 * h < lo - _BOUNDARY_TOL, 1,
                         np.where(pos + 2 * h > hi + _BOUNDARY_TOL, -1, 0))
    out = None
    for kind in (0, 1, -1):
        mask = kinds == kind
        if not mask.any():
            continue
        if kind == 0:
            offsets, weights = _CENTRAL[order]
        else:
            offsets, weights = _FORWARD[(order, boundary_order)]
            offsets = tuple(kind * o for o in offsets)
            if order == 1:
                weights = kind * weights
        sub = flat[mask]
        if kind != 0 and (np.any(sub[:, axis] + max(offsets, key=abs) * h > hi + _BOUNDARY_TOL)
                          or np.any(sub[:, axis] + max(offsets, key=abs) * h < lo - _BOUNDARY_TOL)):
            raise DomainError(f"axis {axis} too short for a one-sided stencil of step {h}")
        shifted = np.repeat(sub[None], len(offsets), axis=0)
        shifted[:, :, axis] += np.asarray(offsets, dtype=float)[:, None] * h
        vals = np.asarray(f(shifted), dtype=float)
        res = np.tensordot(weights, vals, axes=(0, 0)) / h**order
        if out is None:
            out = np.empty((len(flat),) + res.shape[1:])
        out[mask] = res
    return out.reshape(pts.shape[:-1] + out.shape[1:])


def eval_derivative(field: Field, points, multi_index: Sequence[int], boundary_order: int = 2):
    """Partial derivative ``d^|m| f / dx^m`` of total order at most 2.

    Uses the analytic derivative when the field has one; otherwise order-4
    central differences in the interior and one-sided differences (order
    ``boundary_order``, 2 or 4) where the central stencil would leave the
    domain.
    """
    m = tuple(int(k) for k in multi_index)
    if len(m) != field.ndim:
        raise UnsupportedError(f"multi-index has {len(m)} entries, field has {field.ndim} axes")
    if any(k < 0 for k in m) or sum(m) > 2:
        raise UnsupportedError(f"derivative order {sum(m)} > 2 is not supported")
    pts = np.asarray(points, dtype=float)
    field.check_domain(pts)
    if sum(m) == 0:
        return field(pts)
    if field.derivative is not None:
        return np.asarray(field.derivative(pts, m), dtype=float)

    passes = [(i, k) for i, k in enumerate(m) if k > 0]

    def make(fn, axis, order):
        lo, hi = field.bounds[axis]
        return lambda q: _diff_axis(fn, q, axis, order, field.step(axis), lo, hi,
                                    field.periodic[axis], boundary_order)

    fn = field.func
    for axis, order in passes[1:]:
        fn = make(fn, axis, order)
    axis, order = passes[0]
    return make(fn, axis, order)(pts)


def jacobian(vfield: Field, points, axes: Optional[Sequence[int]] = None, boundary_order: int = 2):
    """Matrix of first derivatives; entry (i, j) is d(component i)/d(axes[j])."""
    if len(vfield.shape) != 1:
        raise UnsupportedError("jacobian needs a vector field")
    axes = range(vfield.ndim) if axes is None else axes
    cols = []
    for j in axes:
        m = [0] * vfield.ndim
        m[j] = 1
        cols.append(eval_derivative(vfield, points, m, boundary_order))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class SampledGrid:
    """Values on a uniform tensor-product grid.

    ``axes`` holds the node coordinates per axis. On periodic axes the last
    node is one spacing short of ``lo + period``.
    """

    axes: tuple
    values: np.ndarray
    periodic: tuple = ()
    periods: tuple = ()

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        per = tuple(self.periodic) or (False,) * len(axes)
        object.__setattr__(self, "periodic", per)
        if not self.periods:
            periods = tuple(
                (a[1] - a[0]) * len(a) if p else 0.0 for a, p in zip(axes, per)
            )
            object.__setattr__(self, "periods", periods)
        if self.values.shape[: len(axes)] != tuple(len(a) for a in axes):
            raise DomainError("grid values do not match the axes")

    @property
    def value_shape(self):
        return self.values.shape[len(self.axes):]

    def __call__(self, query):
        return interpolate_grid(self, query)


def _lagrange_weights(axis_nodes, q):
    n = len(axis_nodes)
    x0, h = axis_nodes[0], axis_nodes[1] - axis_nodes[0]
    tol = 1e-9 * h
    if np.any(q < axis_nodes[0] - tol) or np.any(q > axis_nodes[-1] + tol):
        raise ExtrapolationError(
            f"query outside sampled range [{axis_nodes[0]}, {axis_nodes[-1]}]")
    s = (q - x0) / h
    npts = min(n, 4)
    first = np.clip(np.floor(s).astype(int) - 1, 0, n - npts)
    idx = first[:, None] + np.arange(npts)[None, :]
    t = s[:, None] - idx
    w = np.ones((len(q), npts))
    for j in range(npts):
        for k in range(npts):
            if k != j:
                w[:, j] *= (t[:, k]) / (j - k)
    # t[:, k] is s - node_k; weight_j = prod (s - node_k) / (node_j - node_k)
    return idx, w


def _contract(w, arr):
    """``out[c, ...] = sum_n w[c, n] arr[c, n, ...]`` as a batched matmul."""
    c, n = w.shape
    out = np.matmul(w[:, None, :], arr.reshape(c, n, -1))[:, 0]
    return out.reshape((c,) + arr.shape[2:])


def _periodic_weights(axis_nodes, period, q):
    n = len(axis_nodes)
    delta = 2 * np.pi * (q[:, None] - axis_nodes[None, :]) / period
    half = delta / 2
    s = np.sin(half)
    small = np.abs(s) < 1e-14
    s_safe = np.where(small, 1.0, s)
    if n % 2:
        w = np.sin(n * half) / (n * s_safe)
    else:
        w = np.sin(n * half) * np.cos(half) / (n * s_safe)
    return np.where(small, 1.0, w)


def interpolate_grid(samples: SampledGrid, query):
    """Cubic (4-point Lagrange) interpolation per non-periodic axis and
    trigonometric interpolation per periodic axis."""
    q = np.asarray(query, dtype=float)
    k = len(samples.axes)
    out_shape = q.shape[:-1] + samples.value_shape
    q = q.reshape(-1, k)
    rest = int(np.prod(samples.values.shape[1:])) or 1
    chunk = max(1, int(4e6 // rest))
    pieces = []
    for start in range(0, len(q), chunk):
        pieces.append(_interp_chunk(samples, q[start:start + chunk]))
    if pieces:
        res = np.concatenate(pieces, axis=0)
    else:
        res = np.zeros((0,) + samples.value_shape)
    return res.reshape(out_shape)


def _interp_chunk(samples, q):
    # gather the 4-point stencils of all non-periodic axes at once, then
    # contract the periodic axes with their dense trigonometric weights
    arr = samples.values
    k = len(samples.axes)
    local = [a for a in range(k) if not samples.periodic[a]]
    dense = [a for a in range(k) if samples.periodic[a]]
    c = len(q)
    if local:
        arr = np.moveaxis(arr, local, list(range(len(local))))
        index, weights = [], []
        for j, a in enumerate(local):
            idx, w = _lagrange_weights(samples.axes[a], q[:, a])
            shape = [c] + [1] * len(local)
            shape[1 + j] = idx.shape[1]
            index.append(idx.reshape(shape))
            weights.append(w.reshape(shape))
        arr = arr[tuple(index)]
        wt = weights[0]
        for w in weights[1:]:
            wt = wt * w
        arr = _contract(wt.reshape(c, -1), arr.reshape((c, -1) + arr.shape[1 + len(local):]))
    for j, a in enumerate(dense):
        w = _periodic_weights(samples.axes[a], samples.periods[a], q[:, a])
        arr = np.tensordot(w, arr, axes=(1, 0)) if j == 0 and not local else _contract(w, arr)
    return arr


@functools.lru_cache(maxsize=64)
def _fh_weights(n, d):
    """Floater-Hormann barycentric weights for ``n`` equispaced nodes."""
    d = min(d, n - 1)
    w = np.zeros(n)
    for k in range(n):
        s = 0.0
        for i in range(max(0, k - d), min(k, n - 1 - d) + 1):
            s += math.comb(d, k - i)
        w[k] = (-1) ** (k - d) * s
    return w


def _barycentric_weights(nodes, q, d):
    h = nodes[1] - nodes[0]
    if np.any(q < nodes[0] - 1e-9 * h) or np.any(q > nodes[-1] + 1e-9 * h):
        raise ExtrapolationError(f"query outside sampled range [{nodes[0]}, {nodes[-1]}]")
    w = _fh_weights(len(nodes), d)
    diff = q[:, None] - nodes[None, :]
    hit = diff == 0.0
    terms = w[None, :] / np.where(hit, 1.0, diff)
    out = terms / np.sum(terms, axis=1, keepdims=True)
    rows = np.any(hit, axis=1)
    if np.any(rows):
        out[rows] = hit[rows].astype(float)
    return out


def smooth_interpolate(samples: SampledGrid, query, degree=4):
    """C-infinity interpolation: trigonometric on periodic axes, Floater-Hormann
    rational (blending degree ``degree``) elsewhere.  Slower than
    :func:`interpolate_grid` but free of derivative jumps at the nodes."""
    q = np.asarray(query, dtype=float)
    k = len(samples.axes)
    out_shape = q.shape[:-1] + samples.value_shape
    q = q.reshape(-1, k)
    arr = samples.values
    for a, (nodes, per, period) in enumerate(zip(samples.axes, samples.periodic, samples.periods)):
        # stencil queries repeat coordinate values; weigh each distinct value once
        vals, inv = np.unique(q[:, a], return_inverse=True)
        w = (_periodic_weights(nodes, period, vals) if per
             else _barycentric_weights(nodes, vals, degree))
        arr = np.tensordot(w, arr, axes=(1, 0))[inv] if a == 0 else _contract(w[inv], arr)
    return arr.reshape(out_shape)


def grid_derivative(values, axis, h, periodic=False):
    """Order-4 finite-difference first derivative of uniformly sampled data."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = v.shape[0]
    if periodic:
        d = (np.roll(v, 2, 0) - 8 * np.roll(v, 1, 0) + 8 * np.roll(v, -1, 0) - np.roll(v, -2, 0)) / (12 * h)
        return np.moveaxis(d, 0, axis)
    if n < 5:
        d = np.gradient(v, h, axis=0, edge_order=2 if n > 2 else 1)
        return np.moveaxis(d, 0, axis)
    d = np.empty_like(v)
    d[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    d[0] = (-25 * v[0] + 48 * v[1] - 36 * v[2] + 16 * v[3] - 3 * v[4]) / (12 * h)
    d[1] = (-3 * v[0] - 10 * v[1] + 18 * v[2] - 6 * v[3] + v[4]) / (12 * h)
    d[-1] = (25 * v[-1] - 48 * v[-2] + 36 * v[-3] - 16 * v[-4] + 3 * v[-5]) / (12 * h)
    d[-2] = (3 * v[-1] + 10 * v[-2] - 18 * v[-3] + 6 * v[-4] - v[-5]) / (12 * h)
    return np.moveaxis(d, 0, axis)


# -- coefficient tables -------------------------------------------------------

def spectral_derivative(values, axis, period):
    """First derivative of periodic samples (endpoint excluded) by FFT."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = v.shape[0]
    k = np.fft.fftfreq(n, d=period / (2 * np.pi * n))
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = (n,) + (1,) * (v.ndim - 1)
    d = np.real(np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(v, axis=0), axis=0))
    return np.moveaxis(d, 0, axis)


def axis_derivative(values, axis, h, periodic=False):
    """Spectral on periodic axes, order-4 differences otherwise."""
    if periodic:
        return spectral_derivative(values, axis, h * np.shape(values)[axis])
    return grid_derivative(values, axis, h)


def read_table(path):
    """Parse a coefficient table; returns the values reshaped to the resolution."""
    text = Path(path).read_text().splitlines()
    lines = [ln for ln in text if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DomainError(f"{path}: empty coefficient table")
    header = lines[0].split()
    try:
        if header[0] != "axes:" or header[2] != "resolution:":
            raise ValueError
        n_axes = int(header[1])
        resolution = tuple(int(r) for r in header[3].split(","))
    except (IndexError, ValueError):
        raise DomainError(f"{path}:1: expected 'axes: <n> resolution: <r1,...>'") from None
    if len(resolution) != n_axes:
        raise DomainError(f"{path}:1: {n_axes} axes but {len(resolution)} resolutions")
    values = np.array([float(tok) for ln in lines[1:] for tok in ln.split()])
    if values.size != int(np.prod(resolution)):
        raise DomainError(
            f"{path}: expected {int(np.prod(resolution))} values, found {values.size}")
    return values.reshape(resolution)


def write_table(path, values):
    values = np.asarray(values, dtype=float)
    res = ",".join(str(n) for n in values.shape)
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in values.reshape(-1, values.shape[-1]))
    Path(path).write_text(f"axes: {values.ndim} resolution: {res}\n{body}\n")


def table_field(values, bounds, periodic=None):
    """A scalar Field interpolating tabulated values on uniform axes over ``bounds``."""
    values = np.asarray(values, dtype=float)
    periodic = tuple(periodic) if periodic is not None else (False,) * values.ndim
    axes = []
    for n, (lo, hi), per in zip(values.shape, bounds, periodic):
        axes.append(lo + (hi - lo) * np.arange(n) / n if per else np.linspace(lo, hi, n))
    grid = SampledGrid(tuple(axes), values, periodic)
    return Field(grid, values.ndim, (), tuple(bounds), periodic)
