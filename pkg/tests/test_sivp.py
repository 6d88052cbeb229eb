import numpy as np
import pytest

from edgeform import builtins, sivp
from edgeform.errors import GateFailed, IncompatibleData
from edgeform.fields import ChartBox

BOX = ChartBox(0.5, y_ranges=((0.0, 1.0),))
Y = np.linspace(0, 1, 5)[:, None]


def _zero(y):
    return np.zeros(np.shape(y)[:-1])


def _reduced(b, G, box=BOX):
    return sivp.ReducedIVP(b=lambda y: np.full(np.shape(y)[:-1], b), G=G, box=box)


def _ones(x, y, u, q):
    return np.ones(np.shape(u))


def test_gate_rejects_eigenvalue_one():
    with pytest.raises(GateFailed) as info:
        sivp.compatibility_gate(sivp.SingularIVP(lambda x, y, w, q: w + x, _zero, BOX))
    assert info.value.condition == "(second)"


def test_gate_alpha_half():
    r = sivp.compatibility_gate(sivp.SingularIVP(lambda x, y, w, q: 0.5 * w, _zero, BOX))
    assert np.allclose(r.omega1(Y), 0, atol=1e-12)
    assert np.allclose(r.b(Y), -0.5, atol=1e-10)


def test_gate_omega1_formula():
    F = lambda x, y, w, q: -w + x * np.sin(y[..., 0])
    r = sivp.compatibility_gate(sivp.SingularIVP(F, _zero, BOX))
    assert np.max(np.abs(r.omega1(Y) - np.sin(Y[:, 0]) / 2)) < 1e-8
    assert np.allclose(r.b(Y), -2.0, atol=1e-10)


def test_gate_first_condition():
    F = lambda x, y, w, q: -w + 1.0
    with pytest.raises(IncompatibleData):
        sivp.compatibility_gate(sivp.SingularIVP(F, _zero, BOX))


def test_initial_jet_zero():
    jp = sivp.initial_jet(_reduced(-1.0, lambda x, y, u, q: np.zeros(np.shape(u))), [0.3])
    assert jp.p == 0 and jp.u == 0 and jp.x == 0


def test_initial_jet_half():
    assert sivp.initial_jet(_reduced(-1.0, _ones), [0.3]).p == pytest.approx(0.5, abs=1e-12)


def test_initial_jet_cos():
    R = sivp.ReducedIVP(b=lambda y: np.full(np.shape(y)[:-1], -2.0),
                        G=lambda x, y, u, q: np.cos(y[..., 0]) + 0 * u, box=BOX)
    for y0 in (0.1, 0.7):
        assert sivp.initial_jet(R, [y0]).p == pytest.approx(np.cos(y0) / 3, abs=1e-12)


def test_curve_fixed_point():
    c, _ = sivp.integrate_jet_curve(_reduced(-1.0, lambda x, y, u, q: np.zeros(np.shape(u))), [0.3], 0.5)
    assert np.max(np.abs(c.gamma_samples - np.array([0.3, 0, 0, 0]))) < 1e-14


def test_curve_closed_form():
    c, _ = sivp.integrate_jet_curve(_reduced(-1.0, _ones), [0.3], 0.5)
    x, g = c.t_samples, c.gamma_samples
    assert np.max(np.abs(g[:, 1] - x / 2)) < 1e-8
    assert np.max(np.abs(g[:, 2] - 0.5)) < 1e-6
    assert np.max(np.abs(g[:, 3])) < 1e-12


def test_d_spectrum():
    box = ChartBox(0.5, y_ranges=((0.0, 1.0), (0.0, 1.0)), resolution=9)
    R = sivp.ReducedIVP(b=lambda y: np.full(np.shape(y)[:-1], -0.5),
                        G=lambda x, y, u, q: np.sin(y[..., 0]) * x + u * q[..., 1], box=box)
    _, eig = sivp.integrate_jet_curve(R, [0.3, 0.2], 0.5)
    assert np.allclose(np.sort(eig.real), [-1.5, -0.5, -0.5, 0, 0, 0], atol=1e-6)
    assert np.allclose(sivp.expected_spectrum(-0.5, 2), np.sort([0, 0, 0, -1.5, -0.5, -0.5]))


def test_assembly_zero_fan():
    F = lambda x, y, w, q: -(w - np.sin(y[..., 0]))
    sol = sivp.solve_sivp(sivp.SingularIVP(F, lambda y: np.sin(y[..., 0]), BOX), series_K=0)
    assert np.max(np.abs(sol.u_grid)) < 1e-12
    expect = np.sin(sol.y_axes[0])[None, :] + 0 * sol.x_grid[:, None]
    assert np.max(np.abs(sol.omega_grid - expect)) < 1e-10


def test_assembly_closed_form():
    sol = sivp.solve_reduced(_reduced(-1.0, _ones), series_K=0)
    assert np.max(np.abs(sol.u_grid - sol.x_grid[:, None] / 2)) < 1e-8
    d = sol.metadata["diagnostics"]
    assert d["max_H"] <= 1e-8 and d["max_p_minus_ux"] <= 1e-4


def test_boundary_slice_exact():
    prob = builtins.make("sine(b=-1, c=1)")
    sol = sivp.solve_sivp(prob, series_K=0)
    assert np.all(sol.u_grid[0] == 0)
    assert np.array_equal(sol.omega_grid[0], prob.omega0(sol.y_axes[0][:, None]))


def test_diagnostics_zero_fan():
    sol = sivp.solve_reduced(_reduced(-1.0, lambda x, y, u, q: np.zeros(np.shape(u))), series_K=0)
    assert sol.metadata["diagnostics"]["max_H"] <= 1e-12


def test_series_closed_form():
    orc = sivp.series_oracle(_reduced(-1.0, _ones), 6)
    assert np.allclose(orc.coefficients[0], 0.5, atol=1e-10)
    assert np.max(np.abs(orc.coefficients[1:])) < 1e-8


def test_series_zero():
    orc = sivp.series_oracle(_reduced(-1.0, lambda x, y, u, q: np.zeros(np.shape(u))), 6)
    assert np.max(np.abs(orc.coefficients)) == 0


def test_series_recursion_from_zero():
    orc = sivp.series_oracle(_reduced(-1.0, lambda x, y, u, q: np.asarray(u, float)), 6)
    assert np.max(np.abs(orc.coefficients)) == 0


def test_solve_alpha_half():
    sol = sivp.solve_sivp(sivp.SingularIVP(lambda x, y, w, q: 0.5 * w, _zero, BOX))
    assert np.max(np.abs(sol.omega_grid)) <= 1e-10


def test_solve_closed_form():
    sol = sivp.solve_sivp(builtins.make("linear(b=-1, c=1)"))
    assert np.max(np.abs(sol.omega_grid - sol.x_grid / 2)) <= 1e-8


def test_solve_gate():
    with pytest.raises(GateFailed):
        sivp.solve_sivp(sivp.SingularIVP(lambda x, y, w, q: w + x, _zero, BOX))


@pytest.fixture(scope="module")
def transport():
    return sivp.solve_sivp(builtins.make("transport"))


def test_transport_diagnostics(transport):
    d = transport.metadata["diagnostics"]
    assert d["max_H"] <= 1e-8 * (1 + d["max_p"])
    assert d["max_theta0"] <= 1e-6 and d["max_theta_i"] <= 1e-6
    assert d["max_p_minus_ux"] <= 1e-4 and d["max_q_minus_uy"] <= 1e-4


def test_transport_workers_identical(transport):
    other = sivp.solve_sivp(builtins.make("transport"), workers=2)
    assert other.omega_grid.tobytes() == transport.omega_grid.tobytes()


def test_manufactured_series_slope():
    R = builtins.make("manufactured")
    xg = np.concatenate([[0], np.logspace(-3, -1, 9)])
    fan = sivp.integrate_fan(R, xg, atol=np.array([1e-12, 1e-60, 1e-60, 1e-60]))
    sol = sivp.assemble_solution(fan)
    gap = np.max(np.abs(sol.u_grid - sivp.series_oracle(R, 6)(xg)), axis=1)[1:]
    assert np.polyfit(np.log(xg[1:]), np.log(gap), 1)[0] >= 6.5
