"""Characteristic scalar initial value problems ``x d_x w = F(x, y, w, d_y w)``.

The solver follows the jet-bundle flow-out: after the substitution
``w = w0 + x (w1 + u)`` the problem becomes ``x d_x u = b(y) u + x G``, whose
Hamiltonian field vanishes on the initial data.  Characteristic integral
curves (see :mod:`edgeform.charflow`) parameterized by ``x`` replace the
usual flow-out, and the solution is read off by inverting ``y0 -> y(x, y0)``
slice by slice.
"""

from __future__ import annotations

import functools
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from . import charflow
from .errors import (EdgeformError, ExtrapolationError, FoldError, GateFailed,
                     IncompatibleData, InternalConsistency, UnsupportedError)
from .fields import (ChartBox, SampledGrid, axis_derivative, grid_derivative, interpolate_grid,
                     mesh_points, smooth_interpolate)

CHUNK = 256          # fan members integrated together; fixed so results do not depend on workers
MAX_ASSEMBLY_DIM = 3
MAX_SERIES_ORDER = 8


def _central(fn, pts, axis, h):
    """Order-4 central first derivative of a vectorized ``fn`` along ``axis``."""
    acc = 0.0
    for k, w in ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)):
        shifted = pts.copy()
        shifted[..., axis] += k * h
        acc = acc + w * fn(shifted)
    return acc / (12 * h)


def _forward4(fn, pts, axis, h):
    acc = 0.0
    for k, w in enumerate((-25.0, 48.0, -36.0, 16.0, -3.0)):
        shifted = pts.copy()
        shifted[..., axis] += k * h
        acc = acc + w * fn(shifted)
    return acc / (12 * h)


def _base_steps(box, fd_step):
    return [fd_step * (hi - lo) for lo, hi in box.bounds[1:]]


@dataclass(frozen=True)
class SingularIVP:
    """``x d_x w = F(x, y, w, d_y w)`` with ``w(0, y) = omega0(y)``.

    ``F(x, y, w, q)`` takes ``x`` and ``w`` of shape ``(...)`` and ``y``, ``q``
    of shape ``(..., n_y)``; the base coordinates are the non-x axes of ``box``.
    """

    F: Callable
    omega0: Callable
    box: ChartBox
    compat_tol: float = 1e-8
    margin: float = 0.05
    fd_step: float = 1e-4
    domega0: Optional[Callable] = None
    Fw: Optional[Callable] = None      # analytic F_w on the boundary data, if known
    layer_frac: float = 1e-2           # G is extrapolated below layer_frac * x_max

    @property
    def n_y(self):
        return self.box.base_dim


def _zero(y):
    return np.zeros(np.shape(y)[:-1])


def _zero_vec(y):
    return np.zeros(np.shape(y))


@dataclass(frozen=True)
class ReducedIVP:
    """``x d_x u = b(y) u + x G(x, y, u, d_y u)``, ``u(0, y) = 0``.

    ``omega0``, ``omega1`` and their y-gradients reconstruct
    ``w = omega0 + x (omega1 + u)``; they default to zero when the problem is
    posed directly in reduced form.  ``G_grad`` optionally returns the tuple
    ``(G, G_x, G_y, G_u, G_q)``.
    """

    b: Callable
    G: Callable
    box: ChartBox
    b_y: Optional[Callable] = None
    G_grad: Optional[Callable] = None
    omega0: Callable = _zero
    omega1: Callable = _zero
    domega0: Callable = _zero_vec
    domega1: Callable = _zero_vec
    Fw0: Optional[Callable] = None
    compat: dict = dc_field(default_factory=dict)
    fd_step: float = 1e-4
    source: Optional[SingularIVP] = None

    @property
    def n_y(self):
        return self.box.base_dim

    def db(self, y):
        if self.b_y is not None:
            return np.asarray(self.b_y(y), dtype=float)
        y = np.asarray(y, dtype=float)
        steps = _base_steps(self.box, self.fd_step)
        return np.stack([_central(self.b, y, i, steps[i]) for i in range(self.n_y)], axis=-1)

    def grad(self, x, y, u, q):
        """``(G, G_x, G_y, G_u, G_q)`` at the given jet points."""
        if self.G_grad is not None:
            return tuple(np.asarray(v, dtype=float) for v in self.G_grad(x, y, u, q))
        n = self.n_y
        x = np.asarray(x, dtype=float)
        P = np.concatenate([x[..., None], y, np.asarray(u)[..., None], q], axis=-1)

        def g(P):
            return self.G(P[..., 0], P[..., 1:1 + n], P[..., 1 + n], P[..., 2 + n:])

        hx = self.fd_step * self.box.x_max
        steps = [hx] + _base_steps(self.box, self.fd_step) + [self.fd_step] * (n + 1)
        # all stencil points go through G in one stacked call
        near0 = x < 2 * hx
        offs = np.where(near0[..., None], np.arange(5.0), np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))
        wx = np.where(near0[..., None], np.array([-25.0, 48.0, -36.0, 16.0, -3.0]),
                      np.array([1.0, -8.0, 0.0, 8.0, -1.0]))
        d = P.shape[-1]
        stack = [P]
        for k in range(5):
            S = P.copy()
            S[..., 0] += offs[..., k] * hx
            stack.append(S)
        for j in range(1, d):
            for k in (-2, -1, 1, 2):
                S = P.copy()
                S[..., j] += k * steps[j]
                stack.append(S)
        vals = g(np.stack(stack))
        G0 = vals[0]
        Gx = np.sum(wx * np.moveaxis(vals[1:6], 0, -1), axis=-1) / (12 * hx)
        cw = np.array([1.0, -8.0, 8.0, -1.0])
        rest = vals[6:].reshape((d - 1, 4) + vals.shape[1:])
        D = np.einsum("k,jk...->j...", cw, rest) / (12 * np.array(steps[1:]).reshape((-1,) + (1,) * x.ndim))
        Gy = np.moveaxis(D[:n], 0, -1)
        Gu = D[n]
        Gq = np.moveaxis(D[n + 1:], 0, -1)
        return G0, Gx, Gy, Gu, Gq


def _padded_axes(box, pad_frac):
    """Base axes of ``box`` extended on non-periodic axes by ``pad_frac`` of their length."""
    axes, periodic = [], []
    for i in range(1, box.ndim):
        nodes = box.axis_nodes(i)
        per = box.periodic[i]
        if not per and pad_frac > 0:
            h = nodes[1] - nodes[0]
            extra = max(2, int(math.ceil(pad_frac * (len(nodes) - 1))))
            nodes = np.concatenate([nodes[0] - h * np.arange(extra, 0, -1), nodes,
                                    nodes[-1] + h * np.arange(1, extra + 1)])
        axes.append(nodes)
        periodic.append(per)
    return tuple(axes), tuple(periodic)


class _YCache:
    """Small memo for y-only boundary data, keyed by the exact y array."""

    def __init__(self, func, size=24):
        self.func = func
        self.size = size
        self.store = OrderedDict()

    def _dedup(self, y):
        # stacked stencils repeat whole leading slices; evaluate each distinct one once
        if y.ndim < 3 or y.shape[0] < 2:
            return self.func(y)
        seen, reps, owner = {}, [], []
        for k in range(y.shape[0]):
            key = y[k].tobytes()
            if key not in seen:
                seen[key] = len(reps)
                reps.append(k)
            owner.append(seen[key])
        if len(reps) == y.shape[0]:
            return self.func(y)
        val = self.func(y[reps])
        owner = np.array(owner)

        def back(v):
            return np.asarray(v)[owner]

        return tuple(back(v) for v in val) if isinstance(val, tuple) else back(val)

    def __call__(self, y):
        y = np.ascontiguousarray(y, dtype=float)
        key = (y.shape, y.tobytes())
        hit = self.store.get(key)
        if hit is not None:
            self.store.move_to_end(key)
            return hit
        val = self._dedup(y)
        self.store[key] = val
        if len(self.store) > self.size:
            self.store.popitem(last=False)
        return val


def compatibility_gate(ivp: SingularIVP, pad_frac=0.25) -> ReducedIVP:
    """Check the boundary compatibility conditions and build the reduced problem.

    Raises :class:`IncompatibleData` when ``F`` or ``F_q`` do not vanish on the
    initial data at some node and :class:`GateFailed` (condition ``(second)``)
    when ``F_w >= 1 - margin``.
    """
    box = ivp.box
    n = ivp.n_y
    F = ivp.F
    h = ivp.fd_step
    hx = h * box.x_max
    steps = _base_steps(box, h)

    def q0_of(y):
        if ivp.domega0 is not None:
            return np.asarray(ivp.domega0(y), dtype=float)
        if n == 0:
            return np.zeros(y.shape)
        return np.stack([_central(ivp.omega0, y, i, steps[i]) for i in range(n)], axis=-1)

    def packed(y):
        w0 = np.asarray(ivp.omega0(y), dtype=float)
        q0 = q0_of(y)
        return np.concatenate([np.zeros(w0.shape + (1,)), y, w0[..., None], q0], axis=-1)

    def Fp(P):
        return np.asarray(F(P[..., 0], P[..., 1:1 + n], P[..., 1 + n], P[..., 2 + n:]), dtype=float)

    def boundary_data(y):
        P = packed(y)
        Fw = (np.broadcast_to(np.asarray(ivp.Fw(y), dtype=float), P.shape[:-1]) if ivp.Fw is not None
              else _central(Fp, P, 1 + n, h))
        Fx = _forward4(Fp, P, 0, hx)
        return P[..., 1 + n], P[..., 2 + n:], Fw, Fx / (1.0 - Fw)

    data = _YCache(boundary_data)

    nodes = mesh_points(box.boundary_axes()).reshape(-1, n) if n else np.zeros((1, 0))
    P = packed(nodes)
    F0 = Fp(P)
    Fq0 = (np.stack([_central(Fp, P, 2 + n + i, h) for i in range(n)], axis=-1)
           if n else np.zeros((len(nodes), 0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        _, _, Fw0, w1 = data(nodes)
    compat = {"nodes": nodes, "F0": F0, "Fq0": Fq0, "Fw0": Fw0}
    bad = np.abs(F0) > ivp.compat_tol
    if np.any(bad):
        i = int(np.argmax(np.abs(F0)))
        raise IncompatibleData(
            f"(first) violated: F(0, y, w0, dw0) = {F0[i]:.3g} at node y = {nodes[i].tolist()}")
    if n and np.any(np.abs(Fq0) > ivp.compat_tol):
        i = int(np.argmax(np.max(np.abs(Fq0), axis=-1)))
        raise IncompatibleData(
            f"(first) violated: F_q = {Fq0[i].tolist()} at node y = {nodes[i].tolist()}")
    if np.any(Fw0 > 1.0 - ivp.margin):
        i = int(np.argmax(Fw0))
        raise GateFailed(
            f"(second) violated: linearization eigenvalue F_w = {Fw0[i]:.6g} is not below "
            f"1 - margin = {1 - ivp.margin:.6g} at node y = {nodes[i].tolist()}",
            condition="(second)")

    # omega1, F_w and d_y omega1 are sampled once on a refined padded grid and
    # evaluated through a C-infinity interpolant: pointwise one-sided differences
    # carry ~1e-11 of noise that G divides by x and G_y differentiates
    if n:
        axes, periodic = _padded_axes(box, pad_frac + 0.25)
        pad_nodes = mesh_points(axes)
        _, _, Fw_s, w1_s = data(pad_nodes)
        dw1 = np.stack([_central(lambda v: data(v)[3], pad_nodes, i, 10 * steps[i])
                        for i in range(n)], axis=-1)
        dFw = np.stack([_central(lambda v: data(v)[2], pad_nodes, i, 10 * steps[i])
                        for i in range(n)], axis=-1)
        stacked = np.concatenate([w1_s[..., None], Fw_s[..., None], dw1, dFw], axis=-1)
        smooth_grid = SampledGrid(axes, stacked, periodic)
        smooth = _YCache(lambda y: smooth_interpolate(smooth_grid, y, degree=6))

        def omega1(y):
            return smooth(y)[..., 0]

        def Fw_of(y):
            return smooth(y)[..., 1]

        def domega1(y):
            return smooth(y)[..., 2:2 + n]

        def b_y(y):
            return smooth(y)[..., 2 + n:]
    else:
        b_y = None
        omega1 = lambda y: data(y)[3]  # noqa: E731
        Fw_of = lambda y: data(y)[2]  # noqa: E731
        domega1 = _zero_vec

    def w0q0(y):
        return np.asarray(ivp.omega0(y), dtype=float), q0_of(y)

    base = _YCache(w0q0)

    # G is a difference quotient of order x^-2; below x_layer it is replaced by
    # the cubic through its values at x_layer * (1, 2, 3, 4), where roundoff is small
    x_layer = ivp.layer_frac * box.x_max
    nodes_l = x_layer * np.arange(1.0, 5.0)

    def ydata(y):
        w0, q0 = base(y)
        return w0, q0, omega1(y), Fw_of(y), domega1(y)

    def G_raw(x, y, u, q, yd):
        w0, q0, w1, Fw, dw1 = yd
        W = w0 + x * (w1 + u)
        Q = q0 + x[..., None] * (dw1 + q)
        return (Fp(np.concatenate([x[..., None], y, W[..., None], Q], axis=-1)) / x - w1 - Fw * u) / x

    def G(x, y, u, q):
        x, u = np.asarray(x, float), np.asarray(u, float)
        y, q = np.asarray(y, float), np.asarray(q, float)
        shape = np.broadcast_shapes(x.shape, u.shape, y.shape[:-1], q.shape[:-1])
        x, u = np.broadcast_to(x, shape), np.broadcast_to(u, shape)
        y, q = np.broadcast_to(y, shape + (n,)), np.broadcast_to(q, shape + (n,))
        yd = ydata(y)
        small = x < x_layer
        if not np.any(small):
            return G_raw(x, y, u, q, yd)
        if np.all(small) and len(shape) >= 2:
            # keep the stencil layout so repeated positions stay recognisable
            def lay(v):
                v = np.broadcast_to(v, (4,) + np.shape(v))
                return v.reshape((4 * shape[0],) + v.shape[2:])

            X = np.broadcast_to(nodes_l.reshape((4,) + (1,) * len(shape)), (4,) + shape)
            X = X.reshape((4 * shape[0],) + shape[1:])
            vals = G_raw(X, lay(y), lay(u), lay(q), tuple(lay(v) for v in yd)).reshape((4,) + shape)
            basis = np.ones((4,) + shape)
            for k in range(4):
                for j in range(4):
                    if j != k:
                        basis[k] *= (x - nodes_l[j]) / (nodes_l[k] - nodes_l[j])
            return np.sum(basis * vals, axis=0)
        out = np.array(G_raw(np.maximum(x, x_layer), y, u, q, yd))
        xs = x[small]
        m = len(xs)

        def rep(v):
            v = np.broadcast_to(v, shape + np.shape(v)[len(shape):])[small]
            return np.concatenate([v] * 4, axis=0)

        vals = G_raw(np.repeat(nodes_l, m), rep(y), rep(u), rep(q),
                     tuple(rep(v) for v in yd)).reshape(4, m)
        basis = np.ones((4, m))
        for k in range(4):
            for j in range(4):
                if j != k:
                    basis[k] *= (xs - nodes_l[j]) / (nodes_l[k] - nodes_l[j])
        out[small] = np.sum(basis * vals, axis=0)
        return out

    return ReducedIVP(
        b=lambda y: Fw_of(y) - 1.0,
        b_y=b_y,
        G=G,
        box=box,
        omega0=lambda y: base(y)[0],
        omega1=omega1,
        domega0=lambda y: base(y)[1],
        domega1=domega1,
        Fw0=Fw_of,
        compat=compat,
        fd_step=h,
        source=ivp,
    )


@dataclass(frozen=True)
class JetPoint:
    x: float
    y: np.ndarray
    u: float
    p: float
    q: np.ndarray


def initial_jet(reduced: ReducedIVP, y0) -> JetPoint:
    """Point ``(0, y0, 0, p0(y0), 0)`` of the initial submanifold."""
    y0 = np.asarray(y0, dtype=float)
    p0 = initial_p(reduced, y0[None])[0]
    return JetPoint(0.0, y0, 0.0, float(p0), np.zeros_like(y0))


def initial_p(reduced, Y0):
    zeros = np.zeros(Y0.shape[:-1])
    G0 = reduced.G(zeros, Y0, zeros, np.zeros_like(Y0))
    return G0 / (1.0 - reduced.b(Y0))


def jet_vector_field(reduced: ReducedIVP):
    """Right-hand side of the x-parameterized Hamiltonian system, state ``(y, u, p, q)``."""
    n = reduced.n_y

    def V(t, S):
        S = np.asarray(S, dtype=float)
        x = np.broadcast_to(np.asarray(t, dtype=float), S.shape[:-1])
        y, u, p, q = S[..., :n], S[..., n], S[..., n + 1], S[..., n + 2:]
        G, Gx, Gy, Gu, Gq = reduced.grad(x, y, u, q)
        b = reduced.b(y)
        by = reduced.db(y) if n else np.zeros_like(y)
        xv = x[..., None]
        dy = -xv * Gq
        du = x * (p - np.sum(q * Gq, axis=-1))
        dp = p * (b - 1.0) + G + x * (Gx + p * Gu)
        dq = by * u[..., None] + b[..., None] * q + xv * (Gy + q * Gu[..., None])
        return np.concatenate([dy, du[..., None], dp[..., None], dq], axis=-1)

    return V


def expected_spectrum(b0, n):
    return np.sort(np.concatenate([np.zeros(n + 1), [b0 - 1.0], np.full(n, b0)]))


@dataclass
class JetFan:
    y0_axes: tuple
    periodic: tuple
    x_grid: np.ndarray
    states: np.ndarray        # (n_x, *fan_shape, 2 n_y + 2)
    reduced: ReducedIVP
    spectra: Optional[np.ndarray] = None
    tols: dict = dc_field(default_factory=dict)

    @property
    def n_y(self):
        return self.reduced.n_y

    @property
    def fan_shape(self):
        return self.states.shape[1:-1]

    def part(self, name):
        n = self.n_y
        sl = {"y": slice(0, n), "u": n, "p": n + 1, "q": slice(n + 2, 2 * n + 2)}[name]
        return self.states[..., sl]


def _jet_problem(reduced, Y0, x_max, tols):
    p0 = initial_p(reduced, Y0)
    n = reduced.n_y
    S0 = np.concatenate([Y0, np.zeros(p0.shape + (1,)), p0[..., None], np.zeros_like(Y0)], axis=-1)
    return charflow.CharCurveProblem(jet_vector_field(reduced), S0, x_max, **tols)


def integrate_jet_curve(reduced: ReducedIVP, y0, x_max, x_grid=None, spec_tol=1e-6, **tols):
    """Characteristic curves for one base point ``y0`` (shape ``(n_y,)``) or a
    batch ``(m, n_y)``; returns ``(CharCurve, eigenvalues)``.

    The linearization spectrum at ``x = 0`` must be ``{0 (n_y + 1 times),
    b - 1, b (n_y times)}``; any other spectrum means G or its derivatives
    are inconsistent and raises :class:`InternalConsistency`.
    """
    Y0 = np.asarray(y0, dtype=float)
    single = Y0.ndim == 1
    Y0 = Y0[None] if single else Y0
    n = reduced.n_y
    prob = _jet_problem(reduced, Y0, x_max, tols)
    report = charflow.linearization_gate(prob)
    eig = np.atleast_2d(report.eigenvalues)
    b0 = reduced.b(Y0)
    for k in range(len(Y0)):
        want = expected_spectrum(b0[k], n)
        got = np.sort(eig[k].real)
        if np.max(np.abs(got - want)) > spec_tol or np.max(np.abs(eig[k].imag)) > spec_tol:
            raise InternalConsistency(
                f"jet linearization spectrum {np.round(got, 8).tolist()} != expected "
                f"{want.tolist()} at y0 = {Y0[k].tolist()}")
    if not report.passed:
        raise GateFailed(f"jet linearization gate failed: {report}", report, condition="(second)")
    curve = charflow.integrate_char_curve(prob, x_grid)
    if single:
        eig = eig[0]
        curve = charflow.CharCurve(curve.t_samples, curve.gamma_samples[:, 0], curve.gamma1[0],
                                   curve.sigma_samples[:, 0], curve.t_start)
    return curve, eig


def integrate_fan(reduced: ReducedIVP, x_grid, pad_frac=0.25, workers=1, spec_tol=1e-6, **tols):
    """Characteristic curves from every node of the (padded) base grid."""
    box = reduced.box
    axes, periodic = _padded_axes(box, pad_frac)
    n = reduced.n_y
    if n:
        Y0 = mesh_points(axes).reshape(-1, n)
        fan_shape = tuple(len(a) for a in axes)
    else:
        Y0 = np.zeros((1, 0))
        fan_shape = ()
    x_grid = np.asarray(x_grid, dtype=float)
    x_max = float(x_grid[-1])
    chunks = [Y0[i:i + CHUNK] for i in range(0, len(Y0), CHUNK)]

    def run(chunk):
        curve, eig = integrate_jet_curve(reduced, chunk, x_max, x_grid, spec_tol, **tols)
        return curve.gamma_samples, eig

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    states = np.concatenate([r[0] for r in results], axis=1)
    spectra = np.concatenate([r[1] for r in results], axis=0)
    states = states.reshape((len(x_grid),) + fan_shape + (2 * n + 2,))
    return JetFan(axes, periodic, x_grid, states, reduced, spectra, dict(tols, spec_tol=spec_tol))


@dataclass
class SolutionField:
    """Assembled solution on the box grid; ``omega = omega0 + x (omega1 + u)``."""

    x_grid: np.ndarray
    y_axes: tuple
    periodic: tuple
    u_grid: np.ndarray
    p_grid: np.ndarray
    q_grid: np.ndarray
    omega_grid: np.ndarray
    reduced: ReducedIVP
    metadata: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        n = len(self.y_axes)
        stacked = np.concatenate([self.u_grid[..., None], self.p_grid[..., None], self.q_grid], axis=-1)
        self._grid = SampledGrid((self.x_grid,) + tuple(self.y_axes), stacked,
                                 (False,) + tuple(self.periodic))
        self._n = n

    def jet(self, points):
        """Interpolated ``(u, p, q)`` at chart points ``(..., 1 + n_y)``."""
        v = interpolate_grid(self._grid, points)
        return v[..., 0], v[..., 1], v[..., 2:]

    def omega(self, points):
        pts = np.asarray(points, dtype=float)
        u, _, _ = self.jet(pts)
        x, y = pts[..., 0], pts[..., 1:]
        r = self.reduced
        return r.omega0(y) + x * (r.omega1(y) + u)

    def omega_derivatives(self, points):
        """``(w, d_x w, d_y w)`` built from the transported jet values."""
        pts = np.asarray(points, dtype=float)
        u, p, q = self.jet(pts)
        x, y = pts[..., 0], pts[..., 1:]
        r = self.reduced
        w1 = r.omega1(y)
        w = r.omega0(y) + x * (w1 + u)
        wx = w1 + u + x * p
        wy = r.domega0(y) + x[..., None] * (r.domega1(y) + q)
        return w, wx, wy


def _newton_preimage(grid, target, start, periodic, max_iter=40, tol=1e-13):
    """Solve ``y0 + D(y0) = target`` where ``D`` interpolates the displacement."""
    n = target.shape[-1]
    y0 = start.copy()
    spacing = np.array([a[1] - a[0] for a in grid.axes])
    eps = 1e-2 * spacing
    for _ in range(max_iter):
        r = y0 + interpolate_grid(grid, y0)[..., :n] - target
        if np.max(np.abs(r)) < tol:
            break
        J = np.empty(y0.shape + (n,))
        for j in range(n):
            e = np.zeros(n)
            e[j] = eps[j]
            dp = interpolate_grid(grid, y0 + e)[..., :n]
            dm = interpolate_grid(grid, y0 - e)[..., :n]
            J[..., j] = (dp - dm) / (2 * eps[j])
        J += np.eye(n)
        y0 = y0 - np.linalg.solve(J, r[..., None])[..., 0]
    return y0


def assemble_solution(fan: JetFan, fold_tol=0.05) -> SolutionField:
    """Invert ``y0 -> y(x, y0)`` on each x-slice and resample onto the box grid."""
    reduced = fan.reduced
    box = reduced.box
    n = fan.n_y
    if n > MAX_ASSEMBLY_DIM:
        raise UnsupportedError(f"assembly supports at most {MAX_ASSEMBLY_DIM} base dimensions")
    y_axes = box.boundary_axes()
    out_shape = tuple(len(a) for a in y_axes)
    nx = len(fan.x_grid)
    u = np.empty((nx,) + out_shape)
    p = np.empty((nx,) + out_shape)
    q = np.empty((nx,) + out_shape + (n,))
    if n == 0:
        u[:] = fan.part("u")
        p[:] = fan.part("p")
        q[:] = fan.part("q")
    else:
        target = mesh_points(y_axes).reshape(-1, n)
        Y0mesh = mesh_points(fan.y0_axes)
        spacing = [a[1] - a[0] for a in fan.y0_axes]
        pre = target.copy()
        for ix in range(nx):
            Y = fan.part("y")[ix]
            disp = Y - Y0mesh
            # fold detection: det of d y / d y0 on the fan grid
            J = np.empty(fan.fan_shape + (n, n))
            for j in range(n):
                J[..., :, j] = grid_derivative(disp, j, spacing[j], fan.periodic[j])
            J += np.eye(n)
            det = np.linalg.det(J)
            if np.min(det) <= fold_tol:
                raise FoldError(
                    f"characteristics fold on slice x = {fan.x_grid[ix]:.6g} "
                    f"(min det {np.min(det):.3g}); reduce x_max")
            vals = np.concatenate([disp, fan.part("u")[ix][..., None], fan.part("p")[ix][..., None],
                                   fan.part("q")[ix]], axis=-1)
            grid = SampledGrid(fan.y0_axes, vals, fan.periodic)
            try:
                pre = _newton_preimage(grid, target, pre, fan.periodic)
                res = interpolate_grid(grid, pre)
            except ExtrapolationError as exc:
                raise FoldError(
                    f"fan does not cover the box on slice x = {fan.x_grid[ix]:.6g}; "
                    f"increase pad_frac ({exc})") from None
            u[ix] = res[:, n].reshape(out_shape)
            p[ix] = res[:, n + 1].reshape(out_shape)
            q[ix] = res[:, n + 2:].reshape(out_shape + (n,))
    X = fan.x_grid.reshape((-1,) + (1,) * n)
    if n:
        Ymesh = mesh_points(y_axes)
        w0 = reduced.omega0(Ymesh)
        w1 = reduced.omega1(Ymesh)
    else:
        w0 = reduced.omega0(np.zeros((0,)))
        w1 = reduced.omega1(np.zeros((0,)))
    omega = w0 + X * (w1 + u)
    return SolutionField(fan.x_grid, y_axes, box.periodic[1:], u, p, q, omega, reduced)


def hamiltonian(reduced, x, y, u, p, q):
    """``H = x p - b(y) u - x G(x, y, u, q)``."""
    return x * p - reduced.b(y) * u - x * reduced.G(x, y, u, q)


def jet_diagnostics(fan: JetFan, reduced: ReducedIVP = None, solution: SolutionField = None,
                    probe=16, delta=1e-3):
    """Hamiltonian and contact-form residuals on the fan; jet consistency on the grid.

    ``theta_i`` uses curves launched at ``y0 +- k delta L_i`` around up to
    ``probe`` fan nodes, so its stencil error stays far below the ODE tolerance.
    """
    reduced = reduced or fan.reduced
    n = fan.n_y
    xg = fan.x_grid
    X = np.broadcast_to(xg.reshape((-1,) + (1,) * n), fan.states.shape[:-1])
    y, u, p, q = fan.part("y"), fan.part("u"), fan.part("p"), fan.part("q")
    H = hamiltonian(reduced, X, y, u, p, q)
    hx = xg[1] - xg[0]
    half = xg <= xg[-1] / 2 + 1e-14
    theta0 = grid_derivative(u, 0, hx) - p - np.sum(q * grid_derivative(y, 0, hx), axis=-1)
    report = {
        "max_H": float(np.max(np.abs(H))),
        "max_p": float(np.max(np.abs(p))),
        "max_theta0": float(np.max(np.abs(theta0[half]))),
        "max_theta_i": 0.0,
    }
    if n:
        report["max_theta_i"] = _probe_theta(fan, reduced, probe, delta)
    if solution is not None:
        report.update(jet_consistency(solution))
    return report


def _probe_theta(fan, reduced, probe, delta):
    n = fan.n_y
    base = mesh_points(fan.y0_axes).reshape(-1, n)
    idx = np.unique(np.linspace(0, len(base) - 1, min(probe, len(base))).round().astype(int))
    centers = base[idx]
    lengths = np.array([a[-1] - a[0] for a in fan.y0_axes])
    offsets = [(-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)]
    starts = [centers] + [centers + k * delta * lengths[i] * np.eye(n)[i]
                          for i in range(n) for k, _ in offsets]
    curve, _ = integrate_jet_curve(reduced, np.concatenate(starts), fan.x_grid[-1], fan.x_grid,
                                   **fan.tols)
    S = curve.gamma_samples.reshape(len(fan.x_grid), 1 + n * len(offsets), len(centers), -1)
    q_mid = S[:, 0, ..., n + 2:]
    S = S[:, 1:].reshape(len(fan.x_grid), n, len(offsets), len(centers), -1)
    half = fan.x_grid <= fan.x_grid[-1] / 2 + 1e-14
    worst = 0.0
    for i in range(n):
        h = delta * lengths[i]
        dS = sum(w * S[:, i, j] for j, (_, w) in enumerate(offsets)) / (12 * h)
        th = dS[..., n] - np.sum(q_mid * dS[..., :n], axis=-1)
        worst = max(worst, float(np.max(np.abs(th[half]))))
    return worst


def jet_consistency(sol: SolutionField):
    hx = sol.x_grid[1] - sol.x_grid[0]
    rep = {"max_p_minus_ux": float(np.max(np.abs(sol.p_grid - grid_derivative(sol.u_grid, 0, hx))))}
    worst = 0.0
    for i, (ax, per) in enumerate(zip(sol.y_axes, sol.periodic)):
        du = axis_derivative(sol.u_grid, 1 + i, ax[1] - ax[0], per)
        worst = max(worst, float(np.max(np.abs(sol.q_grid[..., i] - du))))
    rep["max_q_minus_uy"] = worst
    return rep


def pde_residual(ivp: SingularIVP, sol: SolutionField):
    """``max |x d_x w - F(x, y, w, d_y w)| / (1 + |w|)`` over interior x nodes,
    with derivatives of the assembled ``omega_grid`` by finite differences."""
    w = sol.omega_grid
    hx = sol.x_grid[1] - sol.x_grid[0]
    n = len(sol.y_axes)
    wx = grid_derivative(w, 0, hx)
    wy = [axis_derivative(w, 1 + i, ax[1] - ax[0], per)
          for i, (ax, per) in enumerate(zip(sol.y_axes, sol.periodic))]
    wy = np.stack(wy, axis=-1) if n else np.zeros(w.shape + (0,))
    X = np.broadcast_to(sol.x_grid.reshape((-1,) + (1,) * n), w.shape)
    Y = np.broadcast_to(mesh_points(sol.y_axes), w.shape + (n,)) if n else np.zeros(w.shape + (0,))
    res = np.abs(X * wx - ivp.F(X, Y, w, wy)) / (1.0 + np.abs(w))
    return float(np.max(res[1:]))


# -- formal series oracle ------------------------------------------------------

@dataclass
class SeriesOracle:
    """Coefficients ``u_k`` (k = 1..K) of the formal x-expansion on the base grid."""

    coefficients: np.ndarray     # (K, *grid_shape)
    y_axes: tuple
    periodic: tuple

    @property
    def K(self):
        return len(self.coefficients)

    def __call__(self, x):
        """Truncated series ``sum_k u_k(y) x^k`` at every grid node, shape ``(len(x), *grid)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        powers = x[:, None] ** np.arange(1, self.K + 1)[None, :]
        return np.tensordot(powers, self.coefficients, axes=(1, 0))


def _grad_on_grid(values, axes, periodic):
    out = []
    for i, (ax, per) in enumerate(zip(axes, periodic)):
        h = ax[1] - ax[0]
        out.append(axis_derivative(values, i, h, per))
    return np.stack(out, axis=-1) if out else np.zeros(values.shape + (0,))


@functools.lru_cache(maxsize=8)
def _stirling_table(L):
    """``S[k, m] = s(m, k) / m!`` (signed Stirling numbers of the first kind):
    maps forward differences at 0 to monomial coefficients in ``j``."""
    s = [[Fraction(1)]]
    for m in range(L):
        prev = s[-1] + [Fraction(0)]
        s.append([(prev[k - 1] if k else 0) - m * prev[k] for k in range(m + 2)])
    S = np.zeros((L + 1, L + 1))
    for m, row in enumerate(s):
        for k, v in enumerate(row):
            S[k, m] = float(v / math.factorial(m))
    return S


def series_oracle(reduced: ReducedIVP, K: int, step: float = 0.01, y_axes=None, periodic=None, extra=2):
    """Recursive formal solution ``(k - b) u_k = [x^k] x G(x, y, U_<k, dU_<k)``.

    x-Taylor coefficients come from polynomial interpolation of ``x G`` at
    ``x = j h``, ``j = 0..K + extra``, in Newton forward-difference form;
    ``h`` is the power of two just below ``step * x_max`` so the nodes are exact.  Noise in G still grows like
    ``h**-k`` in the k-th coefficient, hence the cap on ``K``.
    """
    if K > MAX_SERIES_ORDER:
        raise UnsupportedError(f"series order {K} > {MAX_SERIES_ORDER} is not supported")
    box = reduced.box
    n = reduced.n_y
    if y_axes is None:
        y_axes, periodic = box.boundary_axes(), box.periodic[1:]
    Y = mesh_points(y_axes) if n else np.zeros((0,))
    grid_shape = Y.shape[:-1] if n else ()
    b = reduced.b(Y)
    hx = 2.0 ** math.floor(math.log2(step * box.x_max))
    L = K + extra
    xs = hx * np.arange(L + 1)
    stirling = _stirling_table(L)
    coefs = np.zeros((K,) + grid_shape)
    grads = np.zeros((K,) + grid_shape + (n,))
    expand = (-1,) + (1,) * len(grid_shape)
    for k in range(1, K + 1):
        pw = xs[:, None] ** np.arange(1, K + 1)[None, :]
        U = np.tensordot(pw, coefs, axes=(1, 0))
        Q = np.tensordot(pw, grads, axes=(1, 0))
        X = np.broadcast_to(xs.reshape(expand), U.shape)
        Yb = np.broadcast_to(Y, U.shape + (n,)) if n else np.zeros(U.shape + (0,))
        samples = X * reduced.G(X, Yb, U, Q)
        diffs = [samples.reshape(L + 1, -1)]
        for _ in range(L):
            diffs.append(np.diff(diffs[-1], axis=0))
        c = stirling[k] @ np.stack([d[0] for d in diffs]) / hx**k
        coefs[k - 1] = c.reshape(grid_shape) / (k - b)
        grads[k - 1] = _grad_on_grid(coefs[k - 1], y_axes, periodic)
    return SeriesOracle(coefs, tuple(y_axes), tuple(periodic))


# -- driver ---------------------------------------------------------------------

def _staged(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except EdgeformError as exc:
        raise exc.tagged(stage)


def solve_reduced(reduced: ReducedIVP, x_grid=None, pad_frac=0.25, workers=1, series_K=6,
                  fold_tol=0.05, spec_tol=1e-6, **tols):
    """Fan, assembly, diagnostics and series comparison for a reduced problem."""
    box = reduced.box
    if x_grid is None:
        x_grid = box.axis_nodes(0)
    fan = _staged("fan", integrate_fan, reduced, x_grid, pad_frac, workers, spec_tol, **tols)
    sol = _staged("assembly", assemble_solution, fan, fold_tol)
    sol.metadata["fan"] = fan
    sol.metadata["diagnostics"] = jet_diagnostics(fan, reduced, sol)
    if series_K:
        try:
            oracle = series_oracle(reduced, series_K)
            sol.metadata["series"] = oracle
            sel = sol.x_grid <= sol.x_grid[-1] / 2 + 1e-14
            gap = np.abs(sol.u_grid[sel] - oracle(sol.x_grid[sel]))
            sol.metadata["series_gap"] = gap.reshape(gap.shape[0], -1).max(axis=1)
        except EdgeformError:
            pass
    return sol


def solve_sivp(ivp: SingularIVP, x_grid=None, **kw) -> SolutionField:
    """Gate, reduce, integrate the jet fan and assemble the solution."""
    reduced = _staged("compatibility", compatibility_gate, ivp, kw.get("pad_frac", 0.25))
    sol = solve_reduced(reduced, x_grid, **kw)
    sol.metadata["pde_residual"] = pde_residual(ivp, sol)
    return sol
