"""Built-in problems: metrics, singular IVPs and characteristic-curve problems.

Every entry is a factory registered under a name with a parameter
signature; ``make(text)`` accepts strings such as ``"linear(b=-1,c=1)"`` or
``"b_metric_cross(0.4)"``.
"""

from __future__ import annotations

import ast
import inspect
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .charflow import CharCurveProblem
from .edgegeom import EdgeMetric
from .errors import ConfigError
from .fields import ChartBox, read_table, table_field
from .sivp import ReducedIVP, SingularIVP

TWO_PI = 2 * np.pi


@dataclass
class Builtin:
    name: str
    kind: str          # "metric", "ivp" or "char"
    factory: Callable
    summary: str

    @property
    def signature(self):
        params = inspect.signature(self.factory).parameters
        return f"{self.name}({', '.join(params)})" if params else self.name


REGISTRY: dict = {}


def register(kind, summary):
    def deco(fn):
        REGISTRY[fn.__name__] = Builtin(fn.__name__, kind, fn, summary)
        return fn
    return deco


def parse_problem(text: str):
    """``"name(a, k=v)"`` -> ``(name, args, kwargs)`` with literal values."""
    m = re.fullmatch(r"\s*([A-Za-z_]\w*)\s*(?:\((.*)\))?\s*", text)
    if not m:
        raise ConfigError(f"malformed problem {text!r}")
    name, body = m.group(1), m.group(2)
    if name not in REGISTRY:
        raise ConfigError(f"unknown built-in {name!r}")
    if not body or not body.strip():
        return name, (), {}
    try:
        call = ast.parse(f"f({body})", mode="eval").body
        args = tuple(ast.literal_eval(a) for a in call.args)
        kwargs = {k.arg: ast.literal_eval(k.value) for k in call.keywords}
    except (SyntaxError, ValueError) as exc:
        raise ConfigError(f"malformed arguments in {text!r}: {exc}") from None
    return name, args, kwargs


def make(text: str, **extra):
    """Instantiate a built-in from its text form; ``extra`` fills unset parameters."""
    name, args, kwargs = parse_problem(text)
    b = REGISTRY[name]
    params = inspect.signature(b.factory).parameters
    bound = inspect.signature(b.factory).bind_partial(*args, **kwargs)
    for k, v in extra.items():
        if k in params and k not in bound.arguments:
            bound.arguments[k] = v
    try:
        return b.factory(*bound.args, **bound.kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None


def kind_of(text: str):
    return REGISTRY[parse_problem(text)[0]].kind


def list_builtins():
    lines = []
    for b in REGISTRY.values():
        lines.append(f"{b.signature:<42} [{b.kind}] {b.summary}")
    return "\n".join(lines)


# ---------------------------------------------------------------- metrics

def _base_box(x_max=0.5, resolution=(33, 17, 16)):
    return ChartBox(x_max, ((0.0, 1.0),), ((0.0, TWO_PI),), (True,), resolution)


def _block(k_yy, k_yz, k_zz, shape):
    G = np.zeros(shape + (3, 3))
    G[..., 0, 0] = 1.0
    G[..., 1, 1] = k_yy
    G[..., 1, 2] = G[..., 2, 1] = k_yz
    G[..., 2, 2] = k_zz
    return G


def seeded_k(seed):
    """A smooth positive-definite fiber block ``k(x, y, z)`` drawn from ``seed``."""
    c = np.random.default_rng(seed).uniform(-1, 1, size=(3, 4))

    def k(P):
        x, y, z = P[..., 0], P[..., 1], P[..., 2]
        modes = np.stack([np.cos(z), np.sin(z), np.sin(y), x * np.cos(z + y)], axis=-1)
        s = modes @ c.T / 4
        return 1 + 0.15 * s[..., 0], 0.1 * s[..., 1], 1 + 0.15 * s[..., 2]

    return k


def normal_form_metric(seed=0, box=None, name=None):
    k = seeded_k(seed)
    box = box or _base_box()

    def gbar(P):
        return _block(*k(P), P.shape[:-1])

    return EdgeMetric(box, gbar, None, name or f"normal_form({seed})")


def pulled_back_normal(phi, L, seed, box=None, name="", info=None):
    """``phi^* g_N`` where ``g_N`` is the seeded normal form.

    ``phi`` maps chart points, ``L`` is the analytic edge-coframe Jacobian
    ``E(phi) J_phi E^{-1}``, smooth up to ``x = 0``.
    """
    gN = normal_form_metric(seed)
    box = box or _base_box()

    def gbar(P):
        P = np.asarray(P, dtype=float)
        M = L(P)
        return np.swapaxes(M, -1, -2) @ gN(phi(P)) @ M

    meta = {"phi": phi, "normal_form": gN, "seed": seed}
    meta.update(info or {})
    return EdgeMetric(box, gbar, None, name, meta)


@register("metric", "normal form dx^2/x^2 + h(y,z), x-independent")
def product():
    def gbar(P):
        y, z = P[..., 1], P[..., 2]
        return _block(1 + 0.3 * np.sin(z) * np.cos(y), 0.1 * np.sin(z), 1 + 0.2 * np.cos(np.pi * y),
                      P.shape[:-1])

    return EdgeMetric(_base_box(), gbar, None, "product")


@register("metric", "seeded normal form with x-dependent fiber block")
def normal_form(seed=0):
    return normal_form_metric(seed)


@register("metric", "b-metric [[1,c],[c,1]] on a circle fiber; not exact for c != 0")
def b_metric_cross(c=0.4):
    box = ChartBox(0.5, (), ((0.0, TWO_PI),), (True,), (33, 32))

    def gbar(P):
        G = np.empty(P.shape[:-1] + (2, 2))
        G[..., 0, 0] = G[..., 1, 1] = 1.0
        G[..., 0, 1] = G[..., 1, 0] = c
        return G

    return EdgeMetric(box, gbar, None, f"b_metric_cross({c})", {"witness": -TWO_PI * c})


@register("metric", "b-metric [[1,c cos z],[c cos z,1]]; exact, not g-related")
def b_metric_exact(c=0.3):
    box = ChartBox(0.5, (), ((0.0, TWO_PI),), (True,), (33, 32))

    def gbar(P):
        G = np.empty(P.shape[:-1] + (2, 2))
        G[..., 0, 0] = G[..., 1, 1] = 1.0
        G[..., 0, 1] = G[..., 1, 0] = c * np.cos(P[..., 1])
        return G

    return EdgeMetric(box, gbar, None, f"b_metric_exact({c})")


@register("metric", "b-metric diag(1, 1+x) with an O(x) cross term eps*x*sin z")
def b_perturbed(eps=0.3):
    box = ChartBox(0.5, (), ((0.0, TWO_PI),), (True,), (33, 32))

    def gbar(P):
        x, z = P[..., 0], P[..., 1]
        G = np.empty(P.shape[:-1] + (2, 2))
        G[..., 0, 0] = 1.0
        G[..., 1, 1] = 1 + x
        G[..., 0, 1] = G[..., 1, 0] = eps * x * np.sin(z)
        return G

    return EdgeMetric(box, gbar, None, f"b_perturbed({eps})")


@register("metric", "product metric with gbar_00 = s (so C = 1/s)")
def scaled_product(s=2.0):
    base = product()

    def gbar(P):
        G = base.gbar(P)
        G[..., 0, 0] = s
        return G

    return EdgeMetric(base.box, gbar, None, f"scaled_product({s})")


def shear_map(amplitude):
    """``Phi0(x, y, z) = (x exp(2A x sin y), y + A x^2, z)`` and its edge Jacobian."""
    A = amplitude

    def phi(P):
        x, y = P[..., 0], P[..., 1]
        Q = np.array(P, dtype=float)
        Q[..., 0] = x * np.exp(2 * A * x * np.sin(y))
        Q[..., 1] = y + A * x ** 2
        return Q

    def L(P):
        x, y = P[..., 0], P[..., 1]
        h = 2 * A * x * np.sin(y)
        M = np.zeros(P.shape[:-1] + (3, 3))
        M[..., 0, 0] = 1 + h
        M[..., 0, 1] = 2 * A * x ** 2 * np.cos(y)
        M[..., 1, 0] = 2 * A * x * np.exp(-h)
        M[..., 1, 1] = np.exp(-h)
        M[..., 2, 2] = 1.0
        return M

    return phi, L


@register("metric", "seeded normal form pulled back by (x e^{2A x sin y}, y + A x^2, z)")
def perturbed_normal(seed=7, amplitude=0.05):
    phi, L = shear_map(amplitude)
    A = amplitude
    return pulled_back_normal(
        phi, L, seed, name=f"perturbed_normal({seed}, {amplitude})",
        info={"omega": lambda P: 2 * A * P[..., 0] * np.sin(P[..., 1])})


@register("metric", "seeded normal form relabeled by xhat = x e^{c x}")
def relabeled(c=0.3, seed=0):
    def phi(P):
        Q = np.array(P, dtype=float)
        Q[..., 0] = P[..., 0] * np.exp(c * P[..., 0])
        return Q

    def L(P):
        x = P[..., 0]
        M = np.zeros(P.shape[:-1] + (3, 3))
        M[..., 0, 0] = 1 + c * x
        M[..., 1, 1] = np.exp(-c * x)
        M[..., 2, 2] = 1.0
        return M

    return pulled_back_normal(phi, L, seed, name=f"relabeled({c}, {seed})",
                              info={"omega": lambda P: c * P[..., 0]})


@register("metric", "random smooth metric with gbar^{0B} = 0 on the boundary")
def random_g_related(seed=0):
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1, 1, size=(3, 3, 3))
    box = _base_box()

    def gbar(P):
        x, y, z = P[..., 0], P[..., 1], P[..., 2]
        modes = np.stack([np.cos(z + c[0, 0, 0]), np.sin(y + z), x * np.cos(2 * z)], axis=-1)
        S = np.einsum("...m,ijm->...ij", modes, c) / 6
        S = 0.5 * (S + np.swapaxes(S, -1, -2))
        H = np.eye(3) + S
        H[..., 0, 2] *= x
        H[..., 2, 0] *= x
        return np.linalg.inv(H)

    return EdgeMetric(box, gbar, None, f"random_g_related({seed})")


# ---------------------------------------------------------------- singular IVPs

def _attach(obj, **attrs):
    # problem dataclasses are frozen; oracles ride along as extra attributes
    for k, v in attrs.items():
        object.__setattr__(obj, k, v)
    return obj


def _zeros(y):
    return np.zeros(np.shape(y)[:-1])


@register("ivp", "x w_x = b w + c x (no base); w = c x/(1-b) for b < 1")
def linear(b=-1.0, c=1.0):
    box = ChartBox(0.5, resolution=(33,))
    ivp = SingularIVP(lambda x, y, w, q: b * w + c * x, _zeros, box)
    k = c / (1 - b) if b < 1 else None
    label = None if k is None else ("x/2" if k == 0.5 else f"{k:.12g}*x")
    return _attach(ivp, exact=(lambda P: k * P[..., 0]) if b < 1 else None, exact_label=label)


@register("ivp", "x w_x = b w + c x sin y on y in [0, 2pi]")
def sine(b=-1.0, c=1.0):
    box = ChartBox(0.5, ((0.0, TWO_PI),), resolution=(33, 33))
    ivp = SingularIVP(lambda x, y, w, q: b * w + c * x * np.sin(y[..., 0]), _zeros, box)
    return _attach(ivp, exact=(lambda P: c * P[..., 0] * np.sin(P[..., 1]) / (1 - b)) if b < 1 else None)


@register("ivp", "nonlinear transport x w_x = -w + x sin y + w^2/2 + x w q + 0.3 x cos y q")
def transport():
    box = ChartBox(0.5, ((0.0, TWO_PI),), resolution=(33, 33))

    def F(x, y, w, q):
        y, q = y[..., 0], q[..., 0]
        return -w + x * np.sin(y) + 0.5 * w ** 2 + x * w * q + 0.3 * x * np.cos(y) * q

    ivp = SingularIVP(F, _zeros, box)
    return _attach(ivp, exact=None)


def _trig(c, s, y, d=0):
    k = np.arange(1, 4)
    ph = k * y[..., None] + d * np.pi / 2
    return np.sum((c * np.cos(ph) + s * np.sin(ph)) * k ** d, axis=-1) + (1.0 if d == 0 else 0.0)


@register("ivp", "reduced problem b = -1 with known solution u = x^6 phi + x^7 psi (seeded)")
def manufactured(seed=11, resolution=33):
    """Nonlinear reduced problem whose exact solution starts at order 6."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3))
    bb = rng.normal(size=(2, 3))

    def phi(y, d=0):
        return _trig(a[0], bb[0], y, d)

    def psi(y, d=0):
        return 0.5 * _trig(a[1], bb[1], y, d)

    c1, c2, kap = 0.7, -0.4, 0.6

    def grad(x, y, u, q):
        x = np.asarray(x, dtype=float)
        y, q = y[..., 0], q[..., 0]
        us = x ** 6 * phi(y) + x ** 7 * psi(y)
        usx = 6 * x ** 5 * phi(y) + 7 * x ** 6 * psi(y)
        usy = x ** 6 * phi(y, 1) + x ** 7 * psi(y, 1)
        usyy = x ** 6 * phi(y, 2) + x ** 7 * psi(y, 2)
        usxy = 6 * x ** 5 * phi(y, 1) + 7 * x ** 6 * psi(y, 1)
        g = 7 * x ** 5 * phi(y) + 8 * x ** 6 * psi(y)
        gx = 35 * x ** 4 * phi(y) + 48 * x ** 5 * psi(y)
        gy = 7 * x ** 5 * phi(y, 1) + 8 * x ** 6 * psi(y, 1)
        du, dq = u - us, q - usy
        G = g + c1 * du ** 2 + c2 * du * dq + kap * dq
        Gx = gx - 2 * c1 * du * usx - c2 * (usx * dq + du * usxy) - kap * usxy
        Gy = gy - 2 * c1 * du * usy - c2 * (usy * dq + du * usyy) - kap * usyy
        Gu = 2 * c1 * du + c2 * dq
        Gq = c2 * du + kap
        return G, Gx, Gy[..., None], Gu, Gq[..., None]

    box = ChartBox(0.5, z_ranges=((0.0, TWO_PI),), z_periodic=(True,), resolution=(resolution, 32))
    R = ReducedIVP(b=lambda y: np.full(np.shape(y)[:-1], -1.0), G=lambda *s: grad(*s)[0], box=box,
                   b_y=lambda y: np.zeros(np.shape(y)), G_grad=grad)
    return _attach(R, exact_u=lambda x, y: x ** 6 * phi(y) + x ** 7 * psi(y), leading=phi)


@register("ivp", "x w_x = b w + x c(y) with c(y) read from a periodic table")
def tabulated(path="", b=-1.0):
    c = table_field(read_table(path), ((0.0, TWO_PI),), (True,))
    n = c.func.values.shape[0] if hasattr(c.func, "values") else 32
    box = ChartBox(0.5, z_ranges=((0.0, TWO_PI),), z_periodic=(True,), resolution=(33, n))
    ivp = SingularIVP(lambda x, y, w, q: b * w + x * c(y), _zeros, box)
    return _attach(ivp, exact=(lambda P: P[..., 0] * c(P[..., 1:]) / (1 - b)) if b < 1 else None)


# ---------------------------------------------------------------- characteristic curves

@register("char", "t g' = alpha g + t (d = 1); smooth iff alpha < 1")
def scalar(alpha=0.5):
    prob = CharCurveProblem(V=lambda t, P: alpha * P + np.asarray(t)[..., None], p0=np.zeros(1),
                            t_max=0.5)
    return _attach(prob, exact=(lambda t: np.asarray(t)[..., None] / (1 - alpha)) if alpha < 1 else None)


@register("char", "seeded gated field A p + t c + 0.3 tanh(p)^2 (d <= 4)")
def random_field(seed=0, dim=3):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(-1.0, 0.6, size=dim)
    Q = np.eye(dim) + 0.3 * rng.normal(size=(dim, dim))
    A = Q @ np.diag(lam) @ np.linalg.inv(Q)
    cvec = rng.normal(size=dim)
    B = 0.3 * rng.normal(size=(dim, dim))

    def V(t, P):
        t = np.asarray(t)[..., None]
        return P @ A.T + t * cvec + np.tanh(P) ** 2 @ B.T + 0.2 * t * np.sin(P)

    prob = CharCurveProblem(V=V, p0=np.zeros(dim), t_max=0.4)
    return _attach(prob, exact=None)
