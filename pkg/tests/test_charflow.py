import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgeform import builtins
from edgeform.charflow import (CharCurveProblem, ReducedSigmaProblem, curve_residual,
                               fixed_point_curve, fixed_point_sigma, integrate_char_curve,
                               linearization_gate, matrix_power, reduce_to_sigma, with_overrides)
from edgeform.errors import GateFailed, NotVanishing


def _linear(alpha, shift=0.0, d=1):
    return CharCurveProblem(V=lambda t, P: alpha * P + shift * np.asarray(t)[..., None],
                            p0=np.zeros(d), t_max=0.5)


def test_gate_half():
    rep = linearization_gate(_linear(0.5))
    assert rep.passed and np.allclose(rep.eigenvalues, [0.5], atol=1e-8)


def test_gate_eigenvalue_one():
    rep = linearization_gate(_linear(1.0, 1.0))
    assert not rep.passed
    assert np.allclose(rep.eigenvalues, [1.0], atol=1e-8)


def test_gate_diagonal():
    prob = CharCurveProblem(V=lambda t, P: P * np.array([-1.0, 0.3]), p0=np.zeros(2), t_max=0.5)
    rep = linearization_gate(prob)
    assert rep.passed
    assert np.allclose(np.sort(rep.eigenvalues.real), [-1.0, 0.3], atol=1e-8)


def test_gate_margin():
    rep = linearization_gate(_linear(0.97))
    assert not rep.passed and rep.reason == "margin"


def test_gate_requires_zero():
    prob = CharCurveProblem(V=lambda t, P: P + 1.0, p0=np.zeros(1), t_max=0.5)
    with pytest.raises(NotVanishing):
        linearization_gate(prob)


def test_reduce_hand_computed():
    red = reduce_to_sigma(_linear(-1.0, 1.0))
    assert np.allclose(red.A, 2.0) and np.allclose(red.gamma1, 0.5)


def test_reduce_zero_field():
    prob = CharCurveProblem(V=lambda t, P: 0 * P, p0=np.zeros(2), t_max=0.5)
    red = reduce_to_sigma(prob)
    assert np.allclose(red.A, np.eye(2)) and np.allclose(red.gamma1, 0)
    S = np.zeros((3, 1, 2))
    assert np.allclose(red.G(np.array([0.1, 0.2, 0.3]), S), 0)


def test_reduce_alpha():
    red = reduce_to_sigma(_linear(0.5))
    assert np.allclose(red.A, 0.5) and np.allclose(red.gamma1, 0)


def test_matrix_power_identity():
    assert np.allclose(matrix_power(np.eye(2), 0.25), 0.25 * np.eye(2))


def test_matrix_power_diagonal():
    assert np.allclose(matrix_power(np.diag([1.0, 2.0]), 0.5), np.diag([0.5, 0.25]))


def test_matrix_power_jordan():
    J = np.array([[1.0, 1.0], [0.0, 1.0]])
    expect = np.exp(-1) * np.array([[1.0, -1.0], [0.0, 1.0]])
    assert np.max(np.abs(matrix_power(J, np.exp(-1)) - expect)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_matrix_power_group_law(seed, s, r):
    A = np.random.default_rng(seed).normal(size=(3, 3))
    lhs = matrix_power(A, s) @ matrix_power(A, r)
    assert np.max(np.abs(lhs - matrix_power(A, s * r))) <= 1e-10 * max(1.0, np.abs(lhs).max())


def _const_reduced(A, G0, t_max=0.5):
    A = np.asarray(A, float)
    d = A.shape[-1]
    return ReducedSigmaProblem(A=A[None], G=lambda t, S: np.broadcast_to(G0, np.shape(S)),
                               t_max=t_max, gamma1=np.zeros((1, d)))


def test_sigma_constant_G():
    A = np.array([[2.0, 0.5], [0.0, 1.0]])
    G0 = np.array([1.0, -0.5])
    t, sigma = fixed_point_sigma(_const_reduced(A, G0))
    expect = t[:, None] * np.linalg.solve(A + np.eye(2), G0)
    assert np.max(np.abs(sigma[:, 0] - expect)) < 1e-10


def test_sigma_zero_G():
    t, sigma = fixed_point_sigma(_const_reduced(np.eye(2), np.zeros(2)))
    assert np.max(np.abs(sigma)) == 0


def test_sigma_scalar():
    t, sigma = fixed_point_sigma(_const_reduced([[2.0]], np.ones(1)))
    assert np.max(np.abs(sigma[:, 0, 0] - t / 3)) < 1e-10


def test_curve_alpha_half_is_zero():
    c = integrate_char_curve(_linear(0.5))
    assert np.max(np.abs(c.gamma_samples)) <= 1e-10


def test_curve_closed_form():
    c = integrate_char_curve(_linear(-1.0, 1.0))
    assert np.max(np.abs(c.gamma_samples[:, 0] - c.t_samples / 2)) <= 1e-8


def test_curve_gate_failure():
    with pytest.raises(GateFailed):
        integrate_char_curve(_linear(1.0, 1.0))


def test_curve_structure():
    prob = builtins.make("random_field(seed=2, dim=2)")
    c = integrate_char_curve(prob)
    t = c.t_samples
    assert t[0] == 0 and np.all(np.diff(t) > 0)
    assert np.array_equal(c.gamma_samples[0], prob.p0)
    rebuilt = prob.p0 + t[:, None] * (c.gamma1 + c.sigma_samples)
    assert np.max(np.abs(rebuilt - c.gamma_samples)) < 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_residual_and_oracle(seed):
    prob = builtins.make(f"random_field(seed={seed}, dim=3)")
    ode = integrate_char_curve(prob)
    assert curve_residual(prob, ode) <= 10 * prob.ode_tol
    fp = fixed_point_curve(prob, t_grid=ode.t_samples)
    gap = np.max(np.abs(ode.gamma_samples - fp.gamma_samples))
    assert gap <= 100 * max(prob.ode_tol, prob.fixpoint_tol)


def test_launch_refinement():
    prob = builtins.make("random_field(seed=4, dim=2)")
    a = integrate_char_curve(prob)
    b = integrate_char_curve(with_overrides(prob, launch_frac=prob.launch_frac / 2), t_grid=a.t_samples)
    assert np.max(np.abs(a.gamma_samples - b.gamma_samples)) <= 10 * prob.ode_tol


def test_smooth_dependence_on_p0():
    base = _linear(-1.0, 1.0)
    c0 = integrate_char_curve(base).gamma_samples
    prob = CharCurveProblem(V=lambda t, P: -(P - 1e-3) + np.asarray(t)[..., None],
                            p0=np.full(1, 1e-3), t_max=0.5)
    c1 = integrate_char_curve(prob).gamma_samples
    assert np.max(np.abs(c1 - c0)) < 2e-3
