"""Edge metrics in the coframe ``(dx/x, dy/x, dz)`` and their boundary structure.

A metric is stored only through its matrix ``gbar`` of components in that
coframe.  Index 0 is ``dx/x``, the next ``n_y`` indices are ``dy/x`` and the
last ``n_z`` are ``dz``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import (ConsistencyError, DomainError, HorizontallyDegenerate, NearSingular,
                     NotExact, NotGRelated)
from .fields import ChartBox, Field, eval_derivative, mesh_points

COND_LIMIT = 1e12


@dataclass(frozen=True)
class EdgeMetric:
    box: ChartBox
    gbar: Callable
    signature_hint: Optional[tuple] = None
    name: str = ""
    info: dict = dc_field(default_factory=dict, compare=False, repr=False)

    @property
    def dim(self):
        return self.box.ndim

    @property
    def y_index(self):
        return slice(1, 1 + self.box.n_y)

    @property
    def z_index(self):
        return slice(1 + self.box.n_y, self.dim)

    def __call__(self, points):
        G = np.asarray(self.gbar(np.asarray(points, dtype=float)), dtype=float)
        return 0.5 * (G + np.swapaxes(G, -1, -2))

    def boundary_grid(self):
        """Boundary nodes shaped like the boundary grid, ``(*shape, dim)``."""
        base = mesh_points(self.box.boundary_axes())
        if self.box.base_dim == 0:
            return np.zeros((1, 1))
        return np.concatenate([np.zeros(base.shape[:-1] + (1,)), base], axis=-1)

    def flipped(self):
        """``-g``; normalization notions for indefinite metrics use this."""
        return EdgeMetric(self.box, lambda P: -self.gbar(P), None, f"-{self.name}")


def _small_inverse(G):
    """Batched inverse; explicit cofactors for 2x2 and 3x3 (much cheaper than LAPACK calls)."""
    n = G.shape[-1]
    if n == 2:
        a, b, c, d = G[..., 0, 0], G[..., 0, 1], G[..., 1, 0], G[..., 1, 1]
        det = a * d - b * c
        inv = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2)
        return inv / det[..., None, None]
    if n == 3:
        C = np.empty_like(G)
        for i in range(3):
            for j in range(3):
                r = [k for k in range(3) if k != i]
                s = [k for k in range(3) if k != j]
                C[..., j, i] = (-1) ** (i + j) * (G[..., r[0], s[0]] * G[..., r[1], s[1]]
                                                  - G[..., r[0], s[1]] * G[..., r[1], s[0]])
        det = np.einsum("...j,...j->...", G[..., 0, :], C[..., :, 0])
        return C / det[..., None, None]
    try:
        return np.linalg.inv(G)
    except np.linalg.LinAlgError:
        return np.full_like(G, np.inf)


def invert_edge_metric(g: EdgeMetric, points, check=True):
    """Full inverse ``gbar^{ij}`` at ``points``; raises :class:`NearSingular`
    when the 1-norm condition number exceeds 1e12 (``check=False`` only
    rejects non-finite inverses)."""
    G = g(points)
    with np.errstate(all="ignore"):
        Ginv = _small_inverse(G)
    if not check:
        if not np.all(np.isfinite(Ginv)):
            raise NearSingular("edge metric is singular at some sample")
        return 0.5 * (Ginv + np.swapaxes(Ginv, -1, -2))
    with np.errstate(all="ignore"):
        cond = (np.max(np.sum(np.abs(G), axis=-2), axis=-1)
                * np.max(np.sum(np.abs(Ginv), axis=-2), axis=-1))
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        bad = np.unravel_index(np.argmax(np.where(np.isfinite(cond), cond, np.inf)), cond.shape)
        raise NearSingular(f"edge metric condition number {cond[bad]:.3g} at "
                           f"{np.asarray(points)[bad].tolist()}")
    return 0.5 * (Ginv + np.swapaxes(Ginv, -1, -2))


@dataclass
class HorizontalReport:
    points: np.ndarray
    C: np.ndarray
    is_normalized: bool
    max_deviation: float


def horizontal_check(g: EdgeMetric, norm_tol=1e-8, points=None) -> HorizontalReport:
    """``C = (T^{-1})_{00}`` for the horizontal block ``T`` at boundary nodes."""
    pts = g.boundary_grid() if points is None else np.asarray(points, dtype=float)
    h = 1 + g.box.n_y
    T = g(pts)[..., :h, :h]
    cond = np.linalg.cond(T)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if np.any(bad):
        i = np.unravel_index(np.argmax(bad), bad.shape)
        raise HorizontallyDegenerate(f"horizontal block singular at node {pts[i].tolist()}")
    C = np.linalg.inv(T)[..., 0, 0]
    dev = float(np.max(np.abs(C - 1.0)))
    return HorizontalReport(pts, C, dev <= norm_tol, dev)


@dataclass
class GNormReport:
    points: np.ndarray
    g00: np.ndarray
    is_gnormalized: bool
    max_deviation: float


def gnormalized_check(g: EdgeMetric, norm_tol=1e-8, points=None) -> GNormReport:
    pts = g.boundary_grid() if points is None else np.asarray(points, dtype=float)
    g00 = invert_edge_metric(g, pts)[..., 0, 0]
    dev = float(np.max(np.abs(g00 - 1.0)))
    return GNormReport(pts, g00, dev <= norm_tol, dev)


def fiber_metric(g: EdgeMetric, points=None):
    """``g_F = (gbar^{AB})^{-1}`` at boundary points, shape ``(..., n_z, n_z)``."""
    pts = g.boundary_grid() if points is None else np.asarray(points, dtype=float)
    horizontal_check(g, points=pts)
    zi = g.z_index
    return np.linalg.inv(invert_edge_metric(g, pts)[..., zi, zi])


def _alpha_at(g, pts):
    zi = g.z_index
    Ginv = invert_edge_metric(g, pts)
    gF = np.linalg.inv(Ginv[..., zi, zi])
    return np.einsum("...ab,...b->...a", gF, Ginv[..., zi, 0]), Ginv[..., zi, 0]


@dataclass
class BoundaryOneForm:
    """Fiber 1-form ``a_A dz^A`` on the boundary; ``evaluate`` takes base points ``(y, z)``."""

    box: ChartBox
    evaluate: Callable
    points: np.ndarray            # boundary grid nodes (*shape, dim)
    components: np.ndarray        # (*shape, n_z)
    g0B: Optional[np.ndarray] = None

    @property
    def max_norm(self):
        return float(np.max(np.abs(self.components))) if self.components.size else 0.0

    @property
    def g_related_defect(self):
        return float(np.max(np.abs(self.g0B))) if self.g0B is not None and self.g0B.size else 0.0


def alpha_form(g: EdgeMetric) -> BoundaryOneForm:
    """``alpha_A = (g_F)_{AB} gbar^{B0}`` at ``x = 0``."""
    pts = g.boundary_grid()
    horizontal_check(g, points=pts)
    comps, g0B = _alpha_at(g, pts)

    def evaluate(base):
        base = np.asarray(base, dtype=float)
        P = np.concatenate([np.zeros(base.shape[:-1] + (1,)), base], axis=-1)
        return _alpha_at(g, P)[0]

    return BoundaryOneForm(g.box, evaluate, pts, comps, g0B)


def one_form(box: ChartBox, func) -> BoundaryOneForm:
    """Wrap a fiber 1-form given as a callable on base points ``(y, z)``."""
    base = mesh_points(box.boundary_axes())
    pts = np.concatenate([np.zeros(base.shape[:-1] + (1,)), base], axis=-1)
    return BoundaryOneForm(box, func, pts, np.asarray(func(base), dtype=float))


@dataclass
class ExactnessReport:
    verdict: str                   # "Exact" or "NotExact"
    potential: Optional[Callable]  # f(base points) when exact
    witness: Optional[float]
    curl_norm: float
    periods: dict
    residual: float = 0.0

    @property
    def exact(self):
        return self.verdict == "Exact"


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_PANELS = 8


def _segment_integral(alpha, base, axis, start):
    """``int_start^{base[axis]} alpha_axis`` along the fiber coordinate ``axis``."""
    n_y = alpha.box.n_y
    end = base[..., n_y + axis]
    edges = np.linspace(0.0, 1.0, _PANELS + 1)
    s = ((edges[:-1, None] + edges[1:, None]) / 2 + (edges[1:, None] - edges[:-1, None]) / 2
         * _GL_NODES[None, :]).ravel()
    w = np.repeat(np.diff(edges), len(_GL_NODES)) * np.tile(_GL_WEIGHTS, _PANELS) / 2
    pts = np.repeat(base[None], len(s), axis=0)
    pts[..., n_y + axis] = start + s.reshape((-1,) + (1,) * (base.ndim - 1)) * (end - start)
    vals = alpha.evaluate(pts)[..., axis]
    return (end - start) * np.tensordot(w, vals, axes=(0, 0))


def _potential(alpha):
    box = alpha.box
    n_y, n_z = box.n_y, box.n_z
    corner = np.array([lo for lo, _ in box.z_ranges])

    def f(base):
        base = np.asarray(base, dtype=float)
        total = np.zeros(base.shape[:-1])
        for A in range(n_z):
            path = base.copy()
            path[..., n_y + A + 1:] = corner[A + 1:]
            total = total + _segment_integral(alpha, path, A, corner[A])
        return total

    return f


def exactness_test(form, exact_tol=1e-8) -> ExactnessReport:
    """Closedness along the fibers plus vanishing periods on periodic fiber axes.

    ``form`` is an :class:`EdgeMetric` (its alpha-form is used) or a
    :class:`BoundaryOneForm`.  On success the potential is normalized by
    ``f = 0`` at the fiber-coordinate corner.
    """
    alpha = alpha_form(form) if isinstance(form, EdgeMetric) else form
    box = alpha.box
    n_y, n_z = box.n_y, box.n_z
    base_bounds, base_periodic = box.base_box()
    base = alpha.points[..., 1:]
    curl = 0.0
    if n_z > 1:
        fld = Field(alpha.evaluate, box.base_dim, (n_z,), base_bounds, base_periodic)
        for A in range(n_z):
            for B in range(A + 1, n_z):
                mA = [0] * box.base_dim
                mB = [0] * box.base_dim
                mA[n_y + A] = 1
                mB[n_y + B] = 1
                dA = eval_derivative(fld, base, mA, boundary_order=4)[..., B]
                dB = eval_derivative(fld, base, mB, boundary_order=4)[..., A]
                curl = max(curl, float(np.max(np.abs(dA - dB))))
    periods = {}
    witness = None
    for A in range(n_z):
        if not box.z_periodic[A]:
            continue
        lo, hi = box.z_ranges[A]
        ax = n_y + A
        per = (hi - lo) * np.mean(alpha.components[..., A], axis=ax)
        periods[A] = per
        k = np.argmax(np.abs(per))
        if abs(per.flat[k]) > exact_tol and (witness is None or abs(per.flat[k]) > abs(witness)):
            witness = float(per.flat[k])
    if curl > exact_tol or witness is not None:
        return ExactnessReport("NotExact", None, witness if witness is not None else curl,
                               curl, periods)
    f = _potential(alpha)
    residual = 0.0
    if n_z:
        fld = Field(f, box.base_dim, (), base_bounds, base_periodic)
        for A in range(n_z):
            m = [0] * box.base_dim
            m[n_y + A] = 1
            dfA = eval_derivative(fld, base, m, boundary_order=4)
            residual = max(residual, float(np.max(np.abs(dfA - alpha.components[..., A]))))
    return ExactnessReport("Exact", f, None, curl, periods, residual)


class Rescaling:
    """Change of defining function ``xhat = a x``; ``gbar`` gives the new matrix."""

    def __init__(self, g: EdgeMetric, a: Callable, a_log_grad: Optional[Callable] = None,
                 box: Optional[ChartBox] = None, fp_tol=1e-15, fp_iter=100):
        self.source = g
        self.a = a
        self.fp_tol = fp_tol
        self.fp_iter = fp_iter
        bounds = ((0.0, np.inf),) + g.box.bounds[1:]
        scales = (g.box.x_max,) + tuple(hi - lo for lo, hi in g.box.bounds[1:])
        self._log_a = Field(lambda P: np.log(a(P)), g.box.ndim, (), bounds, g.box.periodic,
                            scales=scales)
        self._grad = a_log_grad
        nodes = mesh_points(g.box.grid_axes())
        vals = np.asarray(a(nodes), dtype=float)
        if np.any(~(vals > 0)):
            raise DomainError("rescaling factor must be positive on the closed box")
        if box is None:
            box = ChartBox(g.box.x_max * float(np.min(vals)), g.box.y_ranges, g.box.z_ranges,
                           g.box.z_periodic, g.box.resolution)
        self.box = box

    def old_points(self, points):
        """Solve ``x a(x, y, z) = xhat`` for the original chart point."""
        P = np.array(points, dtype=float)
        xhat = P[..., 0].copy()
        x = xhat / np.asarray(self.a(P), dtype=float)
        for _ in range(self.fp_iter):
            P[..., 0] = x
            new = xhat / np.asarray(self.a(P), dtype=float)
            if np.max(np.abs(new - x), initial=0.0) <= self.fp_tol * (1 + np.max(np.abs(x), initial=0.0)):
                x = new
                break
            x = new
        else:
            raise ConsistencyError("x-recovery for the rescaled chart did not converge")
        P[..., 0] = x
        return P

    def log_gradient(self, old):
        if self._grad is not None:
            return np.asarray(self._grad(old), dtype=float)
        cols = []
        for j in range(self.source.dim):
            m = [0] * self.source.dim
            m[j] = 1
            cols.append(eval_derivative(self._log_a, old, m, boundary_order=4))
        return np.stack(cols, axis=-1)

    def coframe_matrix(self, old):
        """``M`` with ``e_old = M e_new``."""
        n = self.source.dim
        ny = self.source.box.n_y
        a = np.asarray(self.a(old), dtype=float)
        dl = self.log_gradient(old)
        x = old[..., 0]
        denom = 1.0 + x * dl[..., 0]
        M = np.zeros(old.shape[:-1] + (n, n))
        M[..., 0, 0] = 1.0 / denom
        M[..., 0, 1:1 + ny] = -(a * x / denom)[..., None] * dl[..., 1:1 + ny]
        M[..., 0, 1 + ny:] = -dl[..., 1 + ny:] / denom[..., None]
        idx = np.arange(1, 1 + ny)
        M[..., idx, idx] = a[..., None]
        idz = np.arange(1 + ny, n)
        M[..., idz, idz] = 1.0
        return M

    def gbar(self, points):
        old = self.old_points(points)
        M = self.coframe_matrix(old)
        return np.swapaxes(M, -1, -2) @ self.source(old) @ M

    def inverse_factor(self):
        """``1 / a`` as a function on the new chart; rescaling by it undoes this one."""
        return lambda P: 1.0 / np.asarray(self.a(self.old_points(P)), dtype=float)


def rescale_defining_function(g: EdgeMetric, a: Callable, a_log_grad=None, box=None) -> EdgeMetric:
    """gbar-matrix of ``g`` in the edge coframe of ``xhat = a x``.

    ``a`` is evaluated on chart points of ``g``; ``a_log_grad`` optionally
    gives ``d log a`` analytically.  The returned metric's
    ``info["rescaling"]`` maps points back and supplies the inverse factor.
    """
    r = Rescaling(g, a, a_log_grad, box)
    return EdgeMetric(r.box, r.gbar, g.signature_hint, f"rescaled({g.name})", {"rescaling": r})


def make_g_related(g: EdgeMetric, exact_tol=1e-8, rel_tol=1e-8):
    """Rescale by ``a = exp(-f)`` so that ``gbar^{0B} = 0`` at the boundary.

    Returns ``(metric, a)``; a metric that is already g-related is returned
    unchanged with ``a = 1``.
    """
    alpha = alpha_form(g)
    if alpha.g_related_defect <= rel_tol:
        return g, (lambda P: np.ones(np.shape(P)[:-1]))
    rep = exactness_test(alpha, exact_tol)
    if not rep.exact:
        raise NotExact(f"alpha-form is not exact; period witness {rep.witness:.10g}", rep.witness)
    f = rep.potential

    def a(P):
        return np.exp(-f(np.asarray(P, dtype=float)[..., 1:]))

    out = rescale_defining_function(g, a)
    defect = alpha_form(out).g_related_defect
    if defect > rel_tol:
        raise ConsistencyError(f"rescaled metric still has |gbar^0B| = {defect:.3g} > {rel_tol}")
    return out, a


def normlem_check(g: EdgeMetric, rel_tol=1e-8, points=None):
    """``max |C - gbar^{00}|`` over boundary nodes of a g-related metric."""
    pts = g.boundary_grid() if points is None else np.asarray(points, dtype=float)
    Ginv = invert_edge_metric(g, pts)
    g0B = Ginv[..., g.z_index, 0]
    if g0B.size and np.max(np.abs(g0B)) > rel_tol:
        raise NotGRelated(f"|gbar^0B| = {np.max(np.abs(g0B)):.3g} > {rel_tol} at the boundary")
    C = horizontal_check(g, points=pts).C
    return float(np.max(np.abs(C - Ginv[..., 0, 0])))
