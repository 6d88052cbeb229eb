import numpy as np
import pytest

from edgeform import builtins
from edgeform import edgegeom as eg
from edgeform.errors import NotExact, NotGRelated
from edgeform.fields import ChartBox

TWO_PI = 2 * np.pi
BOX3 = ChartBox(0.5, y_ranges=((0, 1),), z_ranges=((0, TWO_PI),), z_periodic=(True,),
                resolution=(9, 9, 16))
CIRCLE = ChartBox(0.5, z_ranges=((0, TWO_PI),), z_periodic=(True,), resolution=(9, 32))


def _const(M, box):
    M = np.asarray(M, float)
    return eg.EdgeMetric(box, lambda P: np.broadcast_to(M, P.shape[:-1] + M.shape).copy())


def _cross(c):
    return _const([[1, c], [c, 1]], CIRCLE)


def _block_metric():
    def gbar(P):
        x, y, z = P[..., 0], P[..., 1], P[..., 2]
        G = np.zeros(P.shape[:-1] + (3, 3))
        G[..., 0, 0] = 1
        G[..., 1, 1] = 1 + 0.3 * x * np.cos(y)
        G[..., 2, 2] = 1 + 0.3 * np.sin(z)
        G[..., 1, 2] = G[..., 2, 1] = 0.1 * x
        return G
    return eg.EdgeMetric(BOX3, gbar, name="block")


PTS = np.random.default_rng(0).uniform([0, 0, 0], [0.5, 1, TWO_PI], (40, 3))


def test_inverse_identity():
    g = _const(np.eye(3), BOX3)
    assert np.allclose(eg.invert_edge_metric(g, PTS), np.eye(3), atol=1e-15)


def test_inverse_diagonal():
    g = eg.EdgeMetric(BOX3, lambda P: np.stack([
        np.stack([np.ones(P.shape[:-1]), 0 * P[..., 0], 0 * P[..., 0]], -1),
        np.stack([0 * P[..., 0], 2 + 0 * P[..., 0], 0 * P[..., 0]], -1),
        np.stack([0 * P[..., 0], 0 * P[..., 0], 1 + P[..., 0]], -1)], -2))
    inv = eg.invert_edge_metric(g, PTS)
    assert np.allclose(inv[:, 1, 1], 0.5) and np.allclose(inv[:, 2, 2], 1 / (1 + PTS[:, 0]))


def test_inverse_cross():
    c = 0.4
    inv = eg.invert_edge_metric(_cross(c), np.array([[0.0, 1.0]]))[0]
    assert np.allclose(inv, np.array([[1, -c], [-c, 1]]) / (1 - c * c), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_inverse_consistency(seed):
    g = builtins.make(f"random_g_related({seed})")
    G = g(PTS)
    assert np.max(np.abs(G @ eg.invert_edge_metric(g, PTS) - np.eye(3))) <= 1e-11


def test_horizontal_identity():
    rep = eg.horizontal_check(_const(np.eye(3), BOX3))
    assert rep.is_normalized and np.allclose(rep.C, 1)


def test_horizontal_scaled():
    rep = eg.horizontal_check(_const(np.diag([4.0, 1, 1]), BOX3))
    assert not rep.is_normalized and np.allclose(rep.C, 0.25)


def test_horizontal_block():
    def gbar(P):
        G = np.zeros(P.shape[:-1] + (3, 3))
        G[..., 0, 0] = 1
        G[..., 1, 1] = 2 + np.sin(P[..., 1])
        G[..., 2, 2] = 1
        return G
    rep = eg.horizontal_check(eg.EdgeMetric(BOX3, gbar))
    assert np.max(np.abs(rep.C - 1)) < 1e-14


def test_gnormalized():
    assert np.allclose(eg.gnormalized_check(_const(np.eye(3), BOX3)).g00, 1)
    rep = eg.gnormalized_check(_cross(0.3))
    assert not rep.is_gnormalized and np.allclose(rep.g00, 1 / (1 - 0.09))


def test_fiber_metric():
    assert np.allclose(eg.fiber_metric(_const(np.eye(3), BOX3)), np.eye(1))
    assert np.allclose(eg.fiber_metric(_cross(0.3))[..., 0, 0], 1 - 0.09)
    g = builtins.make("product")
    pts = g.boundary_grid()
    G = g(pts)
    schur = G[..., 2, 2] - G[..., 1, 2] ** 2 / G[..., 1, 1]
    assert np.allclose(eg.fiber_metric(g)[..., 0, 0], schur, atol=1e-13)


def test_alpha_zero_for_block():
    assert eg.alpha_form(_block_metric()).max_norm < 1e-14


def test_alpha_cross():
    assert np.allclose(eg.alpha_form(_cross(0.4)).components[..., 0], -0.4, atol=1e-14)


def test_alpha_from_rescale():
    h = eg.rescale_defining_function(_block_metric(), lambda P: np.exp(np.sin(P[..., 2])))
    al = eg.alpha_form(h)
    assert np.max(np.abs(al.components[..., 0] - np.cos(al.points[..., 2]))) < 1e-8


def test_exact_zero():
    rep = eg.exactness_test(_block_metric())
    assert rep.exact
    assert np.max(np.abs(rep.potential(BOX3.boundary_points()[:, 1:]))) < 1e-12


def test_not_exact_witness():
    c = 0.4
    rep = eg.exactness_test(_cross(c))
    assert not rep.exact
    assert abs(rep.witness - (-TWO_PI * c)) <= 1e-6 * TWO_PI * c


def test_exact_sine_potential():
    form = eg.one_form(CIRCLE, lambda B: np.cos(B[..., -1:]))
    rep = eg.exactness_test(form)
    z = np.linspace(0, 6, 13)[:, None]
    f = rep.potential(z)
    assert np.max(np.abs(f - np.sin(z[:, 0]))) < 1e-8


def test_rescale_identity():
    g = _block_metric()
    h = eg.rescale_defining_function(g, lambda P: np.ones(P.shape[:-1]))
    assert np.max(np.abs(h(PTS) - g(PTS))) < 1e-14


def test_rescale_constant_keeps_alpha():
    g = eg.rescale_defining_function(_block_metric(), lambda P: np.exp(np.sin(P[..., 2])))
    h = eg.rescale_defining_function(g, lambda P: np.full(P.shape[:-1], 2.0))
    a0, a1 = eg.alpha_form(g).components, eg.alpha_form(h).components
    assert np.max(np.abs(a0 - a1)) < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_alpha_law(seed):
    rng = np.random.default_rng(seed)
    k = rng.uniform(-0.5, 0.5, 4)

    def loga(P):
        x, y, z = P[..., 0], P[..., 1], P[..., 2]
        return k[0] * np.sin(z) + k[1] * np.cos(2 * z + y) + k[2] * x * y + k[3] * y

    g = builtins.make(f"random_g_related({seed})")
    h = eg.rescale_defining_function(g, lambda P: np.exp(loga(P)))
    a0, a1 = eg.alpha_form(g), eg.alpha_form(h)
    z, y = a1.points[..., 2], a1.points[..., 1]
    dz = k[0] * np.cos(z) - 2 * k[1] * np.sin(2 * z + y)
    assert np.max(np.abs(a1.components[..., 0] - a0.components[..., 0] - dz)) <= 1e-8


def test_rescale_roundtrip():
    g = _block_metric()
    a = lambda P: np.exp(np.sin(P[..., 2]) + 0.2 * P[..., 1] * P[..., 0] + 0.1 * P[..., 1])
    h = eg.rescale_defining_function(g, a)
    back = eg.rescale_defining_function(h, h.info["rescaling"].inverse_factor())
    P = np.random.default_rng(0).uniform([0, 0, 0], [0.3, 1, 6], (50, 3))
    assert np.max(np.abs(back(P) - g(P))) <= 1e-10


def test_make_g_related_noop():
    g = _block_metric()
    out, a = eg.make_g_related(g)
    assert out is g and np.allclose(a(PTS), 1)


def test_make_g_related_roundtrip():
    h = eg.rescale_defining_function(_block_metric(), lambda P: np.exp(np.sin(P[..., 2])))
    out, a = eg.make_g_related(h)
    assert eg.alpha_form(out).max_norm < 1e-8
    pts = h.boundary_grid()
    # fiber block recovered up to a constant factor
    ratio = out(pts)[..., 2, 2] / _block_metric()(pts)[..., 2, 2]
    assert np.ptp(ratio) < 1e-8


def test_make_g_related_not_exact():
    with pytest.raises(NotExact) as info:
        eg.make_g_related(_cross(0.4))
    assert info.value.witness == pytest.approx(-TWO_PI * 0.4, rel=1e-6)


def test_normlem_block():
    assert eg.normlem_check(_block_metric()) <= 1e-12


def test_normlem_random():
    worst = max(eg.normlem_check(builtins.make(f"random_g_related({s})")) for s in range(10))
    assert worst <= 1e-10


def test_normlem_rejects():
    with pytest.raises(NotGRelated):
        eg.normlem_check(_cross(0.3))


def test_g_related_iff_alpha_zero():
    for name in ["product", "normal_form(seed=1)", "random_g_related(3)", "b_metric_cross(0.4)",
                 "b_metric_exact(0.3)", "b_perturbed(0.3)"]:
        g = builtins.make(name)
        pts = g.boundary_grid()
        inv = eg.invert_edge_metric(g, pts)[..., g.z_index, 0]
        assert (eg.alpha_form(g).max_norm <= 1e-8) == (np.max(np.abs(inv)) <= 1e-8), name
