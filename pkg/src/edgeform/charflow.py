"""Characteristic integral curves ``t gamma'(t) = V(t, gamma(t))`` from a zero of V.

Two independent routes compute the same curve:

* :func:`integrate_char_curve` launches an adaptive Runge-Kutta integration of
  ``gamma' = V / t`` slightly off ``t = 0`` from a Taylor model;
* :func:`fixed_point_sigma` solves the equivalent Volterra-type integral
  equation for the remainder ``sigma`` by Picard iteration.

All routines accept a batch of initial points: ``p0`` of shape ``(d,)`` or
``(m, d)``, and ``V(t, P)`` must broadcast over the leading axes of ``P``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .errors import DomainError, GateFailed, NonContraction, NotVanishing, StiffnessError
from .fields import SampledGrid, interpolate_grid

QUAD_NODES = 32
# s = r**_SUBST concentrates quadrature nodes where s**A is least smooth
_SUBST = 4


@dataclass(frozen=True)
class CharCurveProblem:
    V: Callable
    p0: np.ndarray
    t_max: float
    eigen_margin: float = 0.05
    zero_tol: float = 1e-9
    ode_tol: float = 1e-10
    atol: Optional[object] = None     # scalar or per-component (d,)
    fixpoint_tol: float = 1e-11
    max_iter: int = 200
    launch_frac: float = 1e-3
    fd_step: float = 1e-4
    n_t: int = 257
    DV: Optional[Callable] = None     # analytic d/dp V(0, p), shape (..., d, d)
    V_t: Optional[Callable] = None    # analytic d/dt V(0, p)

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float))
        if not self.t_max > 0:
            raise DomainError("t_max must be positive")

    @property
    def batched(self):
        return self.p0.ndim == 2

    @property
    def dim(self):
        return self.p0.shape[-1]

    def P0(self):
        return self.p0 if self.batched else self.p0[None]

    def Vb(self, t, P):
        return np.asarray(self.V(t, P), dtype=float)


@dataclass(frozen=True)
class SpectrumReport:
    DV0: np.ndarray
    eigenvalues: np.ndarray
    passed: bool
    margin_found: float
    reason: str = ""

    def __str__(self):
        ev = ", ".join(f"{complex(l):.6g}" for l in np.ravel(self.eigenvalues)[:12])
        status = "pass" if self.passed else f"fail ({self.reason})"
        return f"spectrum {status}; eigenvalues [{ev}]; min(1 - Re lambda) = {self.margin_found:.6g}"


@dataclass(frozen=True)
class ReducedSigmaProblem:
    """``t sigma' + A sigma = t G(t, sigma)``, ``sigma(0) = 0`` (batched)."""

    A: np.ndarray          # (m, d, d)
    G: Callable            # G(t, S) with S (..., m, d)
    t_max: float
    gamma1: np.ndarray     # (m, d)
    problem: Optional[CharCurveProblem] = None


@dataclass(frozen=True)
class CharCurve:
    t_samples: np.ndarray
    gamma_samples: np.ndarray   # (n_t, d) or (n_t, m, d)
    gamma1: np.ndarray
    sigma_samples: np.ndarray
    t_start: float = 0.0


def _dv0(problem, P0):
    if problem.DV is not None:
        return np.asarray(problem.DV(P0), dtype=float)
    d = problem.dim
    h = problem.fd_step
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        f = [problem.Vb(0.0, P0 + k * e) for k in (-2, -1, 1, 2)]
        cols.append((f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h))
    return np.stack(cols, axis=-1)


def _vt0(problem, P0):
    if problem.V_t is not None:
        return np.asarray(problem.V_t(P0), dtype=float)
    h = problem.fd_step * problem.t_max
    f = [problem.Vb(k * h, P0) for k in range(5)]
    return (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * h)


def linearization_gate(problem: CharCurveProblem) -> SpectrumReport:
    """Eigenvalue test ``Re lambda <= 1 - eigen_margin`` for ``DV(0, p0)``.

    For a batch the report holds one row of eigenvalues per member and passes
    only when every member passes.
    """
    P0 = problem.P0()
    v0 = problem.Vb(0.0, P0)
    worst = float(np.max(np.abs(v0))) if v0.size else 0.0
    if worst > problem.zero_tol:
        raise NotVanishing(f"|V(0, p0)| = {worst:.3g} exceeds zero_tol {problem.zero_tol:.3g}")
    DV0 = _dv0(problem, P0)
    eig = np.linalg.eigvals(DV0)
    margin = float(np.min(1.0 - eig.real)) if eig.size else 1.0
    passed = margin >= problem.eigen_margin
    reason = ""
    if not passed:
        reason = "margin" if margin > 0 else "eigenvalue >= 1"
    if not problem.batched:
        DV0, eig = DV0[0], eig[0]
    return SpectrumReport(DV0, eig, passed, margin, reason)


def require_gate(problem):
    report = linearization_gate(problem)
    if not report.passed:
        raise GateFailed(f"linearization gate failed: {report}", report)
    return report


def matrix_power(A, s):
    """``s**A = exp(A log s)`` for ``0 < s <= 1``; ``A`` may carry batch axes."""
    s = float(s)
    if not s > 0:
        raise DomainError(f"matrix_power needs s > 0, got {s}")
    A = np.asarray(A, dtype=float)
    if s == 1.0:
        return np.broadcast_to(np.eye(A.shape[-1]), A.shape).copy()
    return expm(A * np.log(s))


def reduce_to_sigma(problem: CharCurveProblem):
    """Return the reduced problem for ``gamma = p0 + t (gamma1 + sigma)``."""
    report = require_gate(problem)
    P0 = problem.P0()
    DV0 = report.DV0 if problem.batched else report.DV0[None]
    d = problem.dim
    A = np.eye(d)[None] - DV0
    gamma1 = np.linalg.solve(A, _vt0(problem, P0)[..., None])[..., 0]
    t_floor = problem.fd_step * problem.t_max

    def raw(t, S):
        # t broadcasts against S[..., 0]
        tv = t[..., None]
        gam = P0 + tv * (gamma1 + S)
        lin = np.einsum("mij,...mj->...mi", DV0, S)
        return (problem.Vb(t, gam) / tv - gamma1 - lin) / tv

    def G(t, S):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)[..., None] * np.ones(S.shape[-2])
        out = raw(np.maximum(t, t_floor), S)
        small = t < t_floor
        if np.any(small):
            # removable singularity at t = 0: second-order one-sided fill
            g1 = raw(np.full_like(t, t_floor), S)
            g2 = raw(np.full_like(t, 2 * t_floor), S)
            fill = g1 + ((t - t_floor) / t_floor)[..., None] * (g2 - g1)
            out = np.where(small[..., None], fill, out)
        return out

    return ReducedSigmaProblem(A, G, problem.t_max, gamma1, problem)


def _quadrature(A):
    r, w = leggauss(QUAD_NODES)
    r = 0.5 * (r + 1.0)
    w = 0.5 * w
    s = r**_SUBST
    ws = w * _SUBST * r ** (_SUBST - 1)
    powers = np.stack([matrix_power(A, si) for si in s])   # (q, m, d, d)
    return s, ws, powers


def _apply_T(reduced, quad, t_grid, sigma_at):
    s, ws, powers = quad
    pts = t_grid[:, None] * s[None, :]                   # (n_t, q)
    S = sigma_at(pts)                                    # (n_t, q, m, d)
    g = reduced.G(pts, S)
    integrand = np.einsum("qmij,tqmj->tqmi", powers, g)
    return t_grid[:, None, None] * np.einsum("q,tqmi->tmi", ws, integrand)


def fixed_point_sigma(reduced: ReducedSigmaProblem, t_grid=None, tol=None, max_iter=None):
    """Picard iteration for ``sigma(t) = t int_0^1 s^A G(st, sigma(st)) ds``.

    Returns ``(t_grid, sigma)`` with sigma of shape ``(n_t, m, d)``.
    """
    prob = reduced.problem
    tol = tol if tol is not None else (prob.fixpoint_tol if prob else 1e-11)
    max_iter = max_iter if max_iter is not None else (prob.max_iter if prob else 200)
    if t_grid is None:
        n_t = prob.n_t if prob else 257
        t_grid = np.linspace(0.0, reduced.t_max, n_t)
    t_grid = np.asarray(t_grid, dtype=float)
    eig = np.linalg.eigvals(reduced.A)
    if np.any(eig.real <= 0):
        raise GateFailed("A has an eigenvalue with non-positive real part")
    m, d = reduced.gamma1.shape
    quad = _quadrature(reduced.A)
    sigma = np.zeros((len(t_grid), m, d))
    diffs = []
    growth = 0
    for _ in range(max_iter):
        grid = SampledGrid((t_grid,), sigma)
        new = _apply_T(reduced, quad, t_grid, lambda pts: interpolate_grid(grid, pts[..., None]))
        diff = float(np.max(np.abs(new - sigma)))
        sigma = new
        if diff < tol:
            return t_grid, sigma
        if diffs and diff > diffs[-1]:
            growth += 1
            if growth >= 5:
                raise NonContraction(
                    f"Picard residual grew 5 times in a row (last {diff:.3g}); "
                    f"shrink t_max below {reduced.t_max}")
        else:
            growth = 0
        diffs.append(diff)
    raise NonContraction(
        f"no convergence after {max_iter} iterations (residual {diffs[-1]:.3g}); "
        f"shrink t_max below {reduced.t_max}")


def one_sweep_sigma(reduced: ReducedSigmaProblem, t):
    """First Picard iterate ``T(0)`` at the times ``t`` (shape ``(n,)``)."""
    quad = _quadrature(reduced.A)
    m, d = reduced.gamma1.shape
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return _apply_T(reduced, quad, t, lambda pts: np.zeros(pts.shape + (m, d)))


def launch_sigma(reduced: ReducedSigmaProblem, t_start, sweeps=3):
    """sigma(t_start) from a few Picard sweeps over the linear profile
    ``sigma(s) ~ (s / t_start) sigma(t_start)``; each sweep gains one power of t."""
    quad = _quadrature(reduced.A)
    t = np.array([float(t_start)])
    sig = one_sweep_sigma(reduced, t)[0]
    for _ in range(sweeps - 1):
        prev = sig
        sig = _apply_T(reduced, quad, t, lambda pts: pts[..., None, None] / t_start * prev)[0]
    return sig


def fixed_point_curve(problem: CharCurveProblem, t_grid=None):
    """Curve ``p0 + t (gamma1 + sigma)`` from the integral-equation route."""
    reduced = reduce_to_sigma(problem)
    t_grid, sigma = fixed_point_sigma(reduced, t_grid)
    gam = problem.P0()[None] + t_grid[:, None, None] * (reduced.gamma1[None] + sigma)
    if not problem.batched:
        gam, sigma, g1 = gam[:, 0], sigma[:, 0], reduced.gamma1[0]
    else:
        g1 = reduced.gamma1
    return CharCurve(t_grid, gam, g1, sigma)


def integrate_char_curve(problem: CharCurveProblem, t_grid=None, reduced=None) -> CharCurve:
    """ODE route: Taylor launch at ``launch_frac * t_max``, then DOP853."""
    if reduced is None:
        reduced = reduce_to_sigma(problem)
    P0 = problem.P0()
    m, d = P0.shape
    if t_grid is None:
        t_grid = np.linspace(0.0, problem.t_max, problem.n_t)
    t_grid = np.asarray(t_grid, dtype=float)
    t_start = problem.launch_frac * problem.t_max

    early = t_grid[t_grid < t_start]
    late = t_grid[t_grid >= t_start]
    sig_start = launch_sigma(reduced, t_start)
    y0 = P0 + t_start * (reduced.gamma1 + sig_start)

    def rhs(t, y):
        return (problem.Vb(t, y.reshape(m, d)) / t).ravel()

    # run tighter than ode_tol: the sample residual check differentiates the
    # dense output, which amplifies the step-scale interpolation error
    atol = problem.atol if problem.atol is not None else problem.ode_tol
    if np.ndim(atol):
        atol = np.tile(np.asarray(atol, dtype=float), m)
    sol = solve_ivp(rhs, (t_start, problem.t_max), y0.ravel(), method="DOP853",
                    rtol=0.1 * problem.ode_tol, atol=0.1 * atol, dense_output=True,
                    max_step=problem.t_max / 64)
    if sol.status != 0:
        raise StiffnessError(f"integration failed at t = {sol.t[-1]:.6g}: {sol.message}",
                             t=float(sol.t[-1]))
    gam = np.empty((len(t_grid), m, d))
    n_early = len(early)
    if n_early:
        sig = one_sweep_sigma(reduced, early)
        gam[:n_early] = P0[None] + early[:, None, None] * (reduced.gamma1[None] + sig)
    if len(late):
        gam[n_early:] = sol.sol(late).T.reshape(len(late), m, d)
    sigma = np.zeros_like(gam)
    pos = t_grid > 0
    sigma[pos] = (gam[pos] - P0[None]) / t_grid[pos, None, None] - reduced.gamma1[None]
    g1 = reduced.gamma1
    if not problem.batched:
        gam, sigma, g1 = gam[:, 0], sigma[:, 0], g1[0]
    return CharCurve(t_grid, gam, g1, sigma, t_start)


def curve_residual(problem: CharCurveProblem, curve: CharCurve):
    """``max |t gamma' - V(t, gamma)| / (1 + |gamma|)`` for ``t >= t_start``.

    ``gamma'`` comes from order-4 differences of the samples, so this is an
    independent check of the returned samples, not of the integrator state.
    """
    from .fields import grid_derivative
    t = curve.t_samples
    h = t[1] - t[0]
    gam = curve.gamma_samples
    dg = grid_derivative(gam, 0, h)
    tt = t.reshape((-1,) + (1,) * (gam.ndim - 2))
    res = np.abs(tt[..., None] * dg - problem.Vb(tt, gam))
    mask = t >= curve.t_start
    return float(np.max(res[mask] / (1.0 + np.abs(gam[mask]))))


def with_overrides(problem: CharCurveProblem, **kw):
    return replace(problem, **kw)
