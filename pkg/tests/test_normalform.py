import numpy as np
import pytest

from edgeform import builtins
from edgeform import normalform as nf
from edgeform.edgegeom import EdgeMetric
from edgeform.errors import NoRealRoot, NotExact, NotNormalized
from edgeform.fields import ChartBox, mesh_points

SMALL = ChartBox(0.5, ((0.0, 1.0),), ((0.0, 2 * np.pi),), (True,), (17, 9, 8))
C_REL = 0.3


def _const(M, box=SMALL):
    M = np.asarray(M, float)
    return EdgeMetric(box, lambda P: np.broadcast_to(M, P.shape[:-1] + M.shape).copy())


def _relabel(P):
    Q = np.array(P, dtype=float)
    Q[..., 0] = P[..., 0] * np.exp(C_REL * P[..., 0])
    return Q


def _relabel_L(P):
    x = P[..., 0]
    M = np.zeros(P.shape[:-1] + (3, 3))
    M[..., 0, 0] = 1 + C_REL * x
    M[..., 1, 1] = np.exp(-C_REL * x)
    M[..., 2, 2] = 1.0
    return M


@pytest.fixture(scope="module")
def normal_run():
    g = builtins.normal_form_metric(1, SMALL)
    return g, nf.normalize(g)


@pytest.fixture(scope="module")
def relabeled_run():
    g = builtins.pulled_back_normal(_relabel, _relabel_L, 1, box=SMALL)
    return g, nf.normalize(g)


def test_branch_identity_boundary():
    g = _const(np.eye(3))
    assert nf.eikonal_branch_solve(g, [0.0, 0.5, 1.0], [0.0], [0.0]) == 0.0


@pytest.mark.parametrize("eps", [1e-3, 0.05, 0.2])
def test_branch_small_root(eps):
    g = _const(np.eye(3))
    p = nf.eikonal_branch_solve(g, [0.0, 0.5, 1.0], [0.0], [eps])
    assert p == pytest.approx(-1 + np.sqrt(1 - eps * eps), abs=1e-15)
    assert abs(p + eps ** 2 / 2) < eps ** 4


def test_branch_product_zero():
    g = builtins.make("product")
    P = np.random.default_rng(2).uniform([0, 0, 0], [0.5, 1, 6], (30, 3))
    assert np.all(nf.eikonal_branch_solve(g, P, np.zeros(1), np.zeros(1)) == 0)


def test_branch_no_real_root():
    with pytest.raises(NoRealRoot):
        nf.eikonal_branch_solve(_const(np.eye(3)), [0.0, 0.5, 1.0], [0.0], [2.0])


def test_verify_product():
    rep = nf.verify_normal_form(builtins.make("product"))
    assert rep.passed and max(rep.max_00, rep.max_0y, rep.max_0z) <= 1e-12


def test_verify_cross():
    rep = nf.verify_normal_form(builtins.make("b_metric_cross(0.3)"))
    assert not rep.passed
    assert rep.max_0z == pytest.approx(0.3) and rep.max_00 < 1e-15


def test_pullback_identity():
    g = builtins.normal_form_metric(2)
    box = ChartBox(0.3, ((0.0, 1.0),), ((0.0, 2 * np.pi),), (True,), (9, 5, 8))
    out = nf.pullback_metric(g, nf.DiffeoMap.identity(box))
    P = mesh_points(box.grid_axes())
    assert np.max(np.abs(out.info["samples"] - g(P))) <= 1e-12


def test_pullback_constant_scale():
    g = builtins.normal_form_metric(2)
    box = ChartBox(0.2, ((0.0, 1.0),), ((0.0, 2 * np.pi),), (True,), (9, 5, 8))
    psi = nf.DiffeoMap.from_function(box, lambda P: P * np.array([2.0, 1.0, 1.0]))
    rep = nf.verify_normal_form(nf.pullback_metric(g, psi))
    assert max(rep.max_00, rep.max_0y, rep.max_0z) <= 1e-10


def test_normal_form_is_fixed(normal_run):
    g, (psi, out, rep) = normal_run
    assert psi.deviation_from_identity() <= 1e-8
    assert rep.passed and max(rep.max_00, rep.max_0y, rep.max_0z) <= 1e-10
    eik = psi.metadata["eikonal"]
    P = mesh_points(g.box.grid_axes())
    assert np.max(np.abs(eik.omega(P))) <= 1e-10


def test_n_field_is_dx(normal_run):
    g, (psi, _, _) = normal_run
    P = mesh_points(SMALL.grid_axes())
    N = psi.metadata["n_field"](P)
    assert np.max(np.abs(N - np.array([1.0, 0, 0]))) <= 1e-10


def test_relabeled_omega(relabeled_run):
    g, (psi, out, rep) = relabeled_run
    P = mesh_points(g.box.grid_axes())
    assert np.max(np.abs(psi.metadata["eikonal"].omega(P) - C_REL * P[..., 0])) <= 1e-6
    assert rep.passed


def test_relabeled_level_sets(relabeled_run):
    g, (psi, _, _) = relabeled_run
    x = psi.samples[..., 0]
    assert np.max(np.abs(x * np.exp(C_REL * x) - psi.nodes()[..., 0])) <= 1e-8
    # fibers are carried along x only
    assert np.max(np.abs(psi.samples[..., 1:] - psi.nodes()[..., 1:])) <= 1e-8


def test_relabeled_diagnostics(relabeled_run):
    _, (psi, _, _) = relabeled_run
    md = psi.metadata
    assert md["xhat_defect"] <= 1e-6 and md["orthogonality"] <= 1e-6
    assert md["slope_deviation"] <= 1e-4


def test_not_exact_witness():
    with pytest.raises(NotExact) as info:
        nf.normalize(builtins.make("b_metric_cross(0.4)"))
    assert info.value.witness == pytest.approx(-0.8 * np.pi, rel=1e-6)
    assert info.value.stage == "exact"


def test_gate_order():
    with pytest.raises(NotNormalized) as info:
        nf.normalize(_const(np.diag([4.0, 1.0, 1.0])))
    assert info.value.stage == "normalized"
