"""Normal form of an edge metric: eikonal solve, flow along N, pull back, verify.

The eikonal equation ``|dxhat/xhat|^2 = 1`` is written for ``xhat = e^w x``
as a scalar quadratic in ``p = x d_x w``; its small root is the ``F`` of a
singular IVP solved by :mod:`edgeform.sivp`.  The vector field
``N = xhat^{-1} Eval(X_xhat)`` satisfies ``N xhat = 1`` and its flow from the
boundary defines the normalizing map ``psi``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .edgegeom import (EdgeMetric, alpha_form, gnormalized_check, horizontal_check,
                       invert_edge_metric, make_g_related)
from .errors import (AmbiguousRoot, BoxExit, ConsistencyError, EdgeformError, NoRealRoot,
                     NotGRelated, NotNormalized, StiffnessError)
from .fields import ChartBox, SampledGrid, axis_derivative, interpolate_grid, mesh_points
from .sivp import SingularIVP, SolutionField, solve_sivp

LINEAR_FALLBACK = 1e-10
FLOW_CHUNK = 256


def _branch(Ginv, x, w, p_prev, branch_tol):
    """Small root of ``a p^2 + beta p + gamma = 0``; ``w`` are edge components of d_base w."""
    a = Ginv[..., 0, 0]
    g0w = np.einsum("...i,...i->...", Ginv[..., 0, 1:], w)
    beta = 2 * (a + g0w)
    gamma = np.einsum("...i,...ij,...j->...", w, Ginv[..., 1:, 1:], w) + 2 * g0w + a - 1
    disc = beta ** 2 - 4 * a * gamma
    if np.any(disc < 0):
        i = np.unravel_index(np.argmin(disc), disc.shape)
        xb = np.broadcast_to(x, disc.shape)
        raise NoRealRoot(f"eikonal quadratic has discriminant {disc[i]:.3g} < 0 at x = {xb[i]:.6g}; "
                         "the point lies outside the validity neighborhood")
    sq = np.sqrt(disc)
    s = np.where(beta >= 0, 1.0, -1.0)
    qq = -0.5 * (beta + s * sq)
    flat = np.abs(a) < LINEAR_FALLBACK
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(flat, np.inf, qq / np.where(flat, 1.0, a))
        r2 = np.where(qq != 0, gamma / np.where(qq != 0, qq, 1.0), r1)
        lin = -gamma / beta
    d1, d2 = np.abs(r1 - p_prev), np.abs(r2 - p_prev)
    tie = ~flat & (r1 != r2) & (np.abs(d1 - d2) <= 1e-12 * (1 + d1 + d2))
    if np.any(tie):
        raise AmbiguousRoot("both eikonal roots are equidistant from the continuation seed")
    p = np.where(flat, lin, np.where(d1 <= d2, r1, r2))
    resid = np.abs(a * p ** 2 + beta * p + gamma)
    if np.max(resid, initial=0.0) > branch_tol:
        raise ConsistencyError(f"eikonal root residual {np.max(resid):.3g} > {branch_tol}")
    return p, flat


def _edge_w(x, q_y, q_z):
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[..., None] * q_y, q_z], axis=-1)


def eikonal_branch_solve(g: EdgeMetric, point, q_y, q_z, p_prev=0.0, branch_tol=1e-6,
                         return_flags=False, check=True):
    """``p = x d_x w`` on the branch through the origin.

    ``q_y``, ``q_z`` are the coordinate derivatives of ``w`` along y and z.
    With ``return_flags`` also returns the mask of samples where the leading
    coefficient vanished and the linear root was used.
    """
    P = np.asarray(point, dtype=float)
    shape = P.shape[:-1]
    q_y = np.broadcast_to(np.asarray(q_y, dtype=float), shape + (g.box.n_y,))
    q_z = np.broadcast_to(np.asarray(q_z, dtype=float), shape + (g.box.n_z,))
    p, flat = _branch(invert_edge_metric(g, P, check), P[..., 0], _edge_w(P[..., 0], q_y, q_z),
                      p_prev, branch_tol)
    return (p, flat) if return_flags else p


def _slice_dedup(func, P):
    # derivative stencils stack copies of the same positions along axis 0
    if P.ndim < 3 or P.shape[0] < 2:
        return func(P)
    P = np.ascontiguousarray(P)
    seen, reps, owner = {}, [], []
    for k in range(P.shape[0]):
        key = P[k].tobytes()
        if key not in seen:
            seen[key] = len(reps)
            reps.append(k)
        owner.append(seen[key])
    if len(reps) == P.shape[0]:
        return func(P)
    return func(P[reps])[np.array(owner)]


@dataclass
class EikonalProblem:
    g: EdgeMetric
    ivp: SingularIVP
    branch_tol: float = 1e-6
    flagged: list = dc_field(default_factory=list)


def eikonal_problem(g: EdgeMetric, branch_tol=1e-6, **ivp_kw) -> EikonalProblem:
    n_y = g.box.n_y
    flagged = []

    def F(x, y, w, q):
        x, y, q = np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(q, dtype=float)
        shape = np.broadcast_shapes(x.shape, y.shape[:-1], q.shape[:-1])
        x = np.broadcast_to(x, shape)
        P = np.concatenate([x[..., None], np.broadcast_to(y, shape + y.shape[-1:])], axis=-1)
        q = np.broadcast_to(q, shape + q.shape[-1:])
        Ginv = _slice_dedup(lambda Q: invert_edge_metric(g, Q, False), P)
        p, flat = _branch(Ginv, x, _edge_w(x, q[..., :n_y], q[..., n_y:]), 0.0, branch_tol)
        if np.any(flat):
            flagged.append(int(np.sum(flat)))
        return p

    def zero(y):
        return np.zeros(np.shape(y)[:-1])

    # F does not depend on w, so F_w = 0 and condition (second) holds trivially
    ivp = SingularIVP(F, zero, g.box, domega0=lambda y: np.zeros(np.shape(y)), Fw=zero, **ivp_kw)
    return EikonalProblem(g, ivp, branch_tol, flagged)


def metric_gates(g: EdgeMetric, norm_tol=1e-8, rel_tol=1e-8):
    """horizontal -> normalized -> g-related -> g-normalized (asserted)."""
    h = horizontal_check(g, norm_tol)
    if not h.is_normalized:
        raise NotNormalized(f"normalized violated: |C - 1| = {h.max_deviation:.3g} > {norm_tol}")
    defect = alpha_form(g).g_related_defect
    if defect > rel_tol:
        raise NotGRelated(f"g-related violated: |gbar^0B| = {defect:.3g} > {rel_tol}; "
                          "rescale with make_g_related first")
    gn = gnormalized_check(g, norm_tol)
    if not gn.is_gnormalized:
        raise ConsistencyError(f"g-related and normalized but |gbar^00 - 1| = {gn.max_deviation:.3g}")
    return h, gn


@dataclass
class EikonalSolution:
    """``xhat = e^w x`` with ``w`` from the singular IVP solution."""

    problem: EikonalProblem
    solution: SolutionField

    @property
    def g(self):
        return self.problem.g

    def pieces(self, points):
        """``(w, d_x w, r)`` with ``r = d_base w / x`` (smooth through ``x = 0``)."""
        P = np.asarray(points, dtype=float)
        x, Y = P[..., 0], P[..., 1:]
        u, p, q = self.solution.jet(P)
        red = self.solution.reduced
        w1 = red.omega1(Y)
        return x * (w1 + u), w1 + u + x * p, red.domega1(Y) + q

    def omega(self, points):
        return self.pieces(points)[0]

    def xhat(self, points):
        P = np.asarray(points, dtype=float)
        return P[..., 0] * np.exp(self.omega(P))

    def eikonal_defect(self, points):
        """``| |dxhat/xhat|^2 - 1 |`` from the interpolated jet."""
        P = np.asarray(points, dtype=float)
        x = P[..., 0]
        w, wx, r = self.pieces(P)
        xi = np.concatenate([(1 + x * wx)[..., None], (x * x)[..., None] * r[..., :self.g.box.n_y],
                             x[..., None] * r[..., self.g.box.n_y:]], axis=-1)
        Ginv = invert_edge_metric(self.g, P)
        return np.abs(np.einsum("...i,...ij,...j->...", xi, Ginv, xi) - 1)


def solve_eikonal(g: EdgeMetric, x_grid=None, gate=True, branch_tol=1e-6, norm_tol=1e-8,
                  rel_tol=1e-8, workers=1, **sivp_kw) -> EikonalSolution:
    """Solve ``|dxhat/xhat|^2 = 1`` with ``xhat = x + O(x^2)`` over ``g.box``."""
    if gate:
        metric_gates(g, norm_tol, rel_tol)
    prob = eikonal_problem(g, branch_tol)
    sol = solve_sivp(prob.ivp, x_grid, workers=workers, **sivp_kw)
    sol.metadata["linear_fallback_samples"] = sum(prob.flagged)
    return EikonalSolution(prob, sol)


def _forward4(vals, h):
    return (-25 * vals[0] + 48 * vals[1] - 36 * vals[2] + 16 * vals[3] - 3 * vals[4]) / (12 * h)


class NField:
    """``N = e^{-w} (V^0, V^y, V^z / x)`` with ``V = gbar^{-1} xi`` in coordinate components."""

    def __init__(self, eik: EikonalSolution, fill_frac=1e-3):
        self.eik = eik
        self.g = eik.g
        self.box = self.g.box
        self.x_fill = fill_frac * self.box.x_max

    def _z0_quotient(self, P):
        """``gbar^{B0}(x) / x`` with the (vanishing) boundary value removed."""
        g, nz = self.g, self.box.n_z
        zi = g.z_index
        x = P[..., 0]
        base = P.copy()
        base[..., 0] = 0.0

        def col(xs):
            Q = P.copy()
            Q[..., 0] = xs
            return invert_edge_metric(g, Q)[..., zi, 0]

        g0 = col(np.zeros_like(x))
        hf = self.x_fill
        out = np.empty(P.shape[:-1] + (nz,))
        far = x >= hf
        with np.errstate(divide="ignore", invalid="ignore"):
            out[far] = ((col(x) - g0) / x[..., None])[far]
        near = ~far
        if np.any(near):
            Pn = P[near]
            c = [invert_edge_metric(g, np.concatenate([np.full(Pn.shape[:-1] + (1,), k * hf),
                                                       Pn[..., 1:]], -1))[..., zi, 0]
                 for k in range(5)]
            d0 = _forward4(c, hf)
            d1 = (c[1] - c[0]) / hf
            d2 = (c[2] - c[0]) / (2 * hf)
            s = (x[near] / hf)[..., None]
            # quadratic through (0, d0), (hf, d1), (2hf, d2)
            out[near] = d0 + s * (-1.5 * d0 + 2 * d1 - 0.5 * d2) + s * s * (0.5 * d0 - d1 + 0.5 * d2)
        return out

    def __call__(self, points):
        P = np.asarray(points, dtype=float)
        g = self.g
        ny = self.box.n_y
        yi, zi = g.y_index, g.z_index
        x = P[..., 0]
        w, wx, r = self.eik.pieces(P)
        ry, rz = r[..., :ny], r[..., ny:]
        Ginv = invert_edge_metric(g, P)
        xi0 = 1 + x * wx
        xy = (x * x)[..., None] * ry        # edge component along dy/x
        xz = x[..., None] * rz              # edge component along dz

        def contract(rows):
            return (Ginv[..., rows, 0] * xi0[..., None]
                    + np.einsum("...ij,...j->...i", Ginv[..., rows, yi], xy)
                    + np.einsum("...ij,...j->...i", Ginv[..., rows, zi], xz))

        V0 = contract(slice(0, 1))[..., 0]
        Vy = contract(yi)
        Vz_x = (self._z0_quotient(P) * xi0[..., None]
                + np.einsum("...ij,...j->...i", Ginv[..., zi, yi], x[..., None] * ry)
                + np.einsum("...ij,...j->...i", Ginv[..., zi, zi], rz))
        return np.exp(-w)[..., None] * np.concatenate([V0[..., None], Vy, Vz_x], axis=-1)

    def xhat_gradient(self, points):
        """Coordinate gradient of ``xhat``."""
        P = np.asarray(points, dtype=float)
        x = P[..., 0]
        w, wx, r = self.eik.pieces(P)
        e = np.exp(w)
        return np.concatenate([(e * (1 + x * wx))[..., None], (x * x * e)[..., None] * r], axis=-1)

    def transversality(self, points):
        """``N xhat`` at ``points``; equals 1 for an exact eikonal solution."""
        return np.einsum("...i,...i->...", self(points), self.xhat_gradient(points))


def n_field(g: EdgeMetric, eik: EikonalSolution, n_tol=1e-6, samples=None) -> NField:
    """Build ``N`` and check ``N xhat = 1`` on the box grid (or ``samples``)."""
    N = NField(eik)
    pts = mesh_points(g.box.grid_axes()) if samples is None else np.asarray(samples, dtype=float)
    defect = np.max(np.abs(N.transversality(pts) - 1))
    if defect > n_tol:
        raise ConsistencyError(f"N xhat deviates from 1 by {defect:.3g} > {n_tol}")
    N.defect = float(defect)
    return N


# ---------------------------------------------------------------- flows

def _flow_batch(N, box, starts, times, t_eval_unit, ode_tol):
    """Integrate ``dY/ds = t N(Y)`` for ``s`` in [0, 1] from ``(0, p)``."""
    m, d = starts.shape
    times = np.asarray(times, dtype=float)

    def rhs(s, Yf):
        Y = Yf.reshape(m, d)
        inside = box.contains(Y)
        if not np.all(inside):
            i = int(np.argmin(inside))
            raise BoxExit(f"flow from boundary node {starts[i, 1:].tolist()} left the chart box "
                          f"at {Y[i].tolist()}; shrink x_max")
        return (times[:, None] * N(Y)).ravel()

    res = solve_ivp(rhs, (0.0, 1.0), starts.ravel(), method="DOP853", rtol=ode_tol,
                    atol=ode_tol * 1e-2, t_eval=t_eval_unit)
    if res.status != 0:
        raise StiffnessError(f"flow integration failed: {res.message}", res.t[-1] if res.t.size else None)
    return res.y.T.reshape(len(t_eval_unit), m, d)


def flow_points(N, box, points, ode_tol=1e-11, workers=1):
    """``psi`` at arbitrary chart points ``(x, p)``: flow of N from ``(0, p)`` for time x."""
    P = np.asarray(points, dtype=float)
    flat = P.reshape(-1, P.shape[-1])
    starts = flat.copy()
    starts[:, 0] = 0.0
    chunks = [slice(i, i + FLOW_CHUNK) for i in range(0, len(flat), FLOW_CHUNK)]

    def run(sl):
        return _flow_batch(N, box, starts[sl], flat[sl, 0], np.array([1.0]), ode_tol)[-1]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        parts = list(ex.map(run, chunks))
    return np.concatenate(parts, axis=0).reshape(P.shape)


@dataclass
class DiffeoMap:
    """``psi(x, p)`` sampled on ``x_grid x base grid`` with Jacobians."""

    box: ChartBox                 # domain of psi
    samples: np.ndarray           # (n_x, *base_shape, dim)
    jacobians: np.ndarray         # (n_x, *base_shape, dim, dim)
    flow: Optional[Callable] = None
    metadata: dict = dc_field(default_factory=dict)

    @property
    def x_grid(self):
        return self.box.axis_nodes(0)

    def nodes(self):
        return mesh_points(self.box.grid_axes())

    def __call__(self, points):
        if self.flow is not None:
            return self.flow(points)
        grid = SampledGrid(self.box.grid_axes(), self.samples, (False,) + self.box.periodic[1:])
        return interpolate_grid(grid, points)

    def deviation_from_identity(self):
        return float(np.max(np.abs(self.samples - self.nodes())))

    @classmethod
    def from_function(cls, box: ChartBox, func):
        nodes = mesh_points(box.grid_axes())
        samples = np.asarray(func(nodes), dtype=float)
        samples[0] = nodes[0]
        return cls(box, samples, _grid_jacobians(box, nodes, samples), flow=func)

    @classmethod
    def identity(cls, box: ChartBox):
        return cls.from_function(box, lambda P: np.array(P, dtype=float))


def _grid_jacobians(box, nodes, samples, x_column=None):
    """``I + D(psi - id)``; spectral along periodic axes, order-4 differences otherwise."""
    dev = samples - nodes
    d = box.ndim
    J = np.empty(samples.shape + (d,))
    for j in range(d):
        if j == 0 and x_column is not None:
            J[..., :, 0] = x_column - np.eye(d)[0]
            continue
        ax = box.axis_nodes(j)
        h = ax[1] - ax[0]
        J[..., :, j] = axis_derivative(dev, j, h, box.periodic[j])
    J += np.eye(d)
    return J


def verification_box(g: EdgeMetric, flow_frac=0.8, margin=0.15, resolution=None):
    b = g.box
    ys = tuple((lo + margin * (hi - lo), hi - margin * (hi - lo)) for lo, hi in b.y_ranges)
    res = resolution or b.resolution
    return ChartBox(flow_frac * b.x_max, ys, b.z_ranges, b.z_periodic, res)


def build_diffeo(g: EdgeMetric, N: NField, vbox: Optional[ChartBox] = None, flow_tol=1e-6,
                 ode_tol=1e-11, workers=1) -> DiffeoMap:
    """Flow ``N`` from every boundary node of ``vbox`` over its x-grid."""
    vbox = vbox or verification_box(g)
    axes = vbox.grid_axes()
    x_grid = axes[0]
    nodes = mesh_points(axes)
    base = nodes[0].reshape(-1, vbox.ndim)
    chunks = [slice(i, i + FLOW_CHUNK) for i in range(0, len(base), FLOW_CHUNK)]
    T = x_grid[-1]

    def run(sl):
        starts = base[sl]
        return _flow_batch(N, g.box, starts, np.full(len(starts), T), x_grid / T, ode_tol)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        parts = list(ex.map(run, chunks))
    samples = np.concatenate(parts, axis=1).reshape(nodes.shape)
    samples[0] = nodes[0]
    J = _grid_jacobians(vbox, nodes, samples, x_column=N(samples))

    xh = N.eik.xhat(samples)
    xhat_defect = float(np.max(np.abs(xh - nodes[..., 0])))
    if xhat_defect > flow_tol:
        raise ConsistencyError(f"psi^* xhat deviates from x by {xhat_defect:.3g} > {flow_tol}")

    psi = DiffeoMap(vbox, samples, J,
                    flow=lambda P: flow_points(N, g.box, P, ode_tol, workers))
    psi.metadata.update(xhat_defect=xhat_defect, orthogonality=_orthogonality(g, N, psi))
    return psi


def _orthogonality(g, N, psi):
    """``max |g(N, v)| xhat^2`` over level-set tangents ``v`` (columns 1.. of the Jacobian).

    The weight removes the ``1/xhat^2`` growth of the coordinate components.
    """
    Q = psi.samples[1:]
    J = psi.jacobians[1:]
    ny = g.box.n_y
    xq = Q[..., 0]
    scale = np.ones(Q.shape)
    scale[..., 1 + ny:] = xq[..., None]
    # xhat E applied to coordinate vectors: (v^0, v^y, xhat v^z) up to xhat/x ~ 1
    n = N(Q) * scale
    v = J[..., :, 1:] * scale[..., None]
    val = np.einsum("...i,...ij,...jk->...k", n, g(Q), v)
    return float(np.max(np.abs(val), initial=0.0))


# ---------------------------------------------------------------- pullback and verification

def _sampled_metric(box, values, name, info):
    grid = SampledGrid(box.grid_axes(), values, (False,) + box.periodic[1:])

    def gbar(P):
        return interpolate_grid(grid, P)

    meta = {"samples": values}
    meta.update(info)
    return EdgeMetric(box, gbar, None, name, meta)


def pullback_metric(g: EdgeMetric, psi: DiffeoMap) -> EdgeMetric:
    """``psi^* g`` in the edge coframe of the canonical x, sampled on ``psi``'s grid."""
    vbox = psi.box
    ny = vbox.n_y
    d = vbox.ndim
    x_grid = psi.x_grid
    if len(x_grid) < 4:
        raise ConsistencyError("pullback needs at least four x-slices")
    dx = np.diff(x_grid)
    if np.max(np.abs(dx - dx[0])) > 1e-12 * x_grid[-1]:
        raise ConsistencyError("boundary extension assumes a uniform x-grid")
    Q = psi.samples[1:]
    J = psi.jacobians[1:]
    xs = x_grid[1:].reshape((-1,) + (1,) * (Q.ndim - 1))
    eq = np.ones(Q.shape)
    eq[..., :1 + ny] = 1.0 / Q[..., 0:1]
    ep = np.ones(Q.shape)
    ep[..., :1 + ny] = xs
    L = eq[..., :, None] * J * ep[..., None, :]
    inner = np.swapaxes(L, -1, -2) @ g(Q) @ L
    out = np.empty(psi.samples.shape + (d,))
    out[1:] = inner
    out[0] = 3 * inner[0] - 3 * inner[1] + inner[2]
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return _sampled_metric(vbox, out, f"pullback({g.name})", {"source": g})


@dataclass
class NormalFormReport:
    max_00: float
    max_0y: float
    max_0z: float
    nf_tol: float

    @property
    def passed(self):
        return max(self.max_00, self.max_0y, self.max_0z) <= self.nf_tol

    def lines(self):
        return [f"max |gbar_00 - 1|   = {self.max_00:.6e}",
                f"max |gbar_0y|       = {self.max_0y:.6e}",
                f"max |gbar_0z|       = {self.max_0z:.6e}",
                f"normal form         = {'PASS' if self.passed else 'FAIL'} (nf_tol {self.nf_tol:g})"]


def verify_normal_form(g: EdgeMetric, nf_tol=1e-6, points=None) -> NormalFormReport:
    """Deviation of the first row of ``gbar`` from ``(1, 0, ..., 0)``."""
    if points is None and "samples" in g.info:
        G = g.info["samples"]
    else:
        pts = mesh_points(g.box.grid_axes()) if points is None else np.asarray(points, dtype=float)
        G = g(pts)

    def mx(a):
        return float(np.max(np.abs(a), initial=0.0))

    return NormalFormReport(mx(G[..., 0, 0] - 1), mx(G[..., 0, g.y_index]), mx(G[..., 0, g.z_index]),
                            nf_tol)


def boundary_slope(psi: DiffeoMap, n_fit=5):
    """x-slope of ``x0 o psi`` at the boundary, per boundary node (degree-3 fit)."""
    xs = psi.x_grid[:n_fit]
    vals = psi.samples[:n_fit, ..., 0].reshape(n_fit, -1)
    V = np.vander(xs, 4, increasing=True)
    coef = np.linalg.lstsq(V, vals, rcond=None)[0]
    return coef[1].reshape(psi.samples.shape[1:-1])


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except EdgeformError as exc:
        raise exc.tagged(name)


def normalize(g: EdgeMetric, nf_tol=1e-6, n_tol=1e-6, flow_tol=1e-6, branch_tol=1e-6, fit_tol=1e-4,
              norm_tol=1e-8, exact_tol=1e-8, rel_tol=1e-8, flow_frac=0.8, margin=0.15,
              ode_tol=1e-11, workers=1, **sivp_kw):
    """Full pipeline; returns ``(psi, psi^* g, report)``.

    Gates run in the order horizontal, normalized, exact/g-related, so a
    metric with ``C != 1`` is rejected before any solve.
    """
    h = _stage("horizontal", horizontal_check, g, norm_tol)
    if not h.is_normalized:
        raise NotNormalized(f"normalized violated: |C - 1| = {h.max_deviation:.3g} > {norm_tol}").tagged(
            "normalized")
    gm, a = _stage("exact", make_g_related, g, exact_tol, rel_tol)
    _stage("g-normalized", metric_gates, gm, norm_tol, rel_tol)
    eik = _stage("eikonal", solve_eikonal, gm, gate=False, branch_tol=branch_tol, workers=workers,
                 **sivp_kw)
    N = _stage("n-field", n_field, gm, eik, n_tol)
    vbox = verification_box(gm, flow_frac, margin)
    psi = _stage("flow", build_diffeo, gm, N, vbox, flow_tol, ode_tol, workers)
    nf = _stage("pullback", pullback_metric, gm, psi)
    report = verify_normal_form(nf, nf_tol)
    slope = boundary_slope(psi)
    slope_dev = float(np.max(np.abs(slope - 1)))
    if slope_dev > fit_tol:
        raise ConsistencyError(f"psi^* x0 has boundary slope off 1 by {slope_dev:.3g}").tagged("verify")
    psi.metadata.update(eikonal=eik, n_field=N, rescaled=gm is not g, rescale_factor=a,
                        metric=gm, slope_deviation=slope_dev, n_defect=N.defect,
                        horizontal=h.max_deviation)
    return psi, nf, report
