"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""

import numpy as np
import pytest

from edgeform import builtins, cli, sivp
from edgeform import edgegeom as eg
from edgeform import normalform as nf
from edgeform.charflow import fixed_point_curve, integrate_char_curve
from edgeform.errors import GateFailed, NotExact
from edgeform.fields import ChartBox, mesh_points

LINE = ChartBox(0.5, resolution=(33,))
COARSE = (17, 9, 8)


def _zero(y):
    return np.zeros(np.shape(y)[:-1])


def _report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _shear_inverse(V, A=0.05):
    """Exact inverse of (x e^{2Ax sin y}, y + A x^2, z) by Newton in x."""
    x = V[..., 0].copy()
    for _ in range(40):
        y = V[..., 1] - A * x * x
        e = np.exp(2 * A * x * np.sin(y))
        f = x * e - V[..., 0]
        df = e + x * e * 2 * A * (np.sin(y) - 2 * A * x * x * np.cos(y))
        x = x - f / df
    return np.stack([x, V[..., 1] - A * x * x, V[..., 2]], axis=-1)


@pytest.fixture(scope="module")
def round_trip():
    g = builtins.make("perturbed_normal(seed=7, amplitude=0.05)")
    return g, nf.normalize(g)


def test_c1_counterexample_gates(capsys):
    with pytest.raises(GateFailed) as info:
        sivp.solve_sivp(sivp.SingularIVP(lambda x, y, w, q: w + x, _zero, LINE))
    msg = str(info.value)
    rejected = "eigenvalue" in msg and "F_w = 1 " in msg
    sol = sivp.solve_sivp(sivp.SingularIVP(lambda x, y, w, q: 0.5 * w, _zero, LINE))
    mx = float(np.max(np.abs(sol.omega_grid)))
    _report(capsys, 1, rejected and mx <= 1e-10,
            f"w+x rejected ({info.value.condition}, eigenvalue 1); max|w| for 0.5w = {mx:.2e}")


def test_c2_closed_form(capsys):
    sol = sivp.solve_sivp(sivp.SingularIVP(lambda x, y, w, q: -w + x, _zero, LINE))
    err = float(np.max(np.abs(sol.omega_grid - sol.x_grid / 2)))
    _report(capsys, 2, err <= 1e-8, f"max|w - x/2| = {err:.2e}")


def test_c3_curve_oracle(capsys):
    gaps = []
    for seed in range(5):
        prob = builtins.make(f"random_field(seed={seed}, dim={2 + seed % 3})")
        ode = integrate_char_curve(prob)
        fp = fixed_point_curve(prob, t_grid=ode.t_samples)
        gaps.append(float(np.max(np.abs(ode.gamma_samples - fp.gamma_samples))))
    _report(capsys, 3, max(gaps) <= 1e-6, f"max ODE/fixed-point gap over 5 seeds = {max(gaps):.2e}")


def test_c4_d_spectrum(capsys):
    box = ChartBox(0.5, y_ranges=((0.0, 1.0), (0.0, 1.0)), resolution=9)
    R = sivp.ReducedIVP(b=lambda y: np.full(np.shape(y)[:-1], -0.5),
                        G=lambda x, y, u, q: np.sin(y[..., 0]) * x + u * q[..., 1], box=box)
    _, eig = sivp.integrate_jet_curve(R, [0.3, 0.2], 0.5)
    dev = float(np.max(np.abs(np.sort(eig.real) - np.sort([0, 0, 0, -1.5, -0.5, -0.5]))))
    dev = max(dev, float(np.max(np.abs(eig.imag))))
    _report(capsys, 4, dev <= 1e-6, f"spectrum deviation = {dev:.2e}")


def test_c5_jet_diagnostics(capsys):
    probs = {
        "0.5w": sivp.SingularIVP(lambda x, y, w, q: 0.5 * w, _zero, LINE),
        "linear": builtins.make("linear(b=-1, c=1)"),
        "sine": builtins.make("sine(b=-1, c=1)"),
        "transport": builtins.make("transport"),
    }
    worst, ok = [], True
    for name, prob in probs.items():
        d = sivp.solve_sivp(prob).metadata["diagnostics"]
        ok &= d["max_H"] <= 1e-8 * (1 + d["max_p"])
        ok &= max(d["max_theta0"], d["max_theta_i"]) <= 1e-6
        ok &= max(d["max_p_minus_ux"], d["max_q_minus_uy"]) <= 1e-4
        worst.append(f"{name}: H {d['max_H']:.1e} theta {max(d['max_theta0'], d['max_theta_i']):.1e} "
                     f"fd {max(d['max_p_minus_ux'], d['max_q_minus_uy']):.1e}")
    _report(capsys, 5, bool(ok), "; ".join(worst))


def test_c6_series_slope(capsys):
    R = builtins.make("manufactured")
    xg = np.concatenate([[0], np.logspace(-3, -1, 9)])
    fan = sivp.integrate_fan(R, xg, atol=np.array([1e-12, 1e-60, 1e-60, 1e-60]))
    sol = sivp.assemble_solution(fan)
    gap = np.max(np.abs(sol.u_grid - sivp.series_oracle(R, 6)(xg)), axis=1)[1:]
    slope = float(np.polyfit(np.log(xg[1:]), np.log(gap), 1)[0])
    _report(capsys, 6, slope >= 6.5, f"log-log slope = {slope:.3f}")


def test_c7_geometry(capsys):
    normlem = max(eg.normlem_check(builtins.make(f"random_g_related({s})")) for s in range(10))
    k = np.array([0.3, -0.2, 0.25])

    def loga(P):
        return k[0] * np.sin(P[..., 2]) + k[1] * np.cos(2 * P[..., 2] + P[..., 1]) + k[2] * P[..., 1]

    g = builtins.make("random_g_related(3)")
    h = eg.rescale_defining_function(g, lambda P: np.exp(loga(P)))
    a0, a1 = eg.alpha_form(g), eg.alpha_form(h)
    z, y = a1.points[..., 2], a1.points[..., 1]
    dvf = k[0] * np.cos(z) - 2 * k[1] * np.sin(2 * z + y)
    law = float(np.max(np.abs(a1.components[..., 0] - a0.components[..., 0] - dvf)))
    rel = []
    for c in (0.1, 0.4, -0.7):
        rep = eg.exactness_test(builtins.make(f"b_metric_cross({c})"))
        rel.append(abs(rep.witness + 2 * np.pi * c) / (2 * np.pi * abs(c)))
    ok = normlem <= 1e-10 and law <= 1e-8 and max(rel) <= 1e-6
    _report(capsys, 7, ok, f"normlem {normlem:.2e}; alpha law {law:.2e}; witness rel err {max(rel):.2e}")


def test_c8_product_fixed_point(capsys):
    psi, _, rep = nf.normalize(builtins.make("product"))
    dev = psi.deviation_from_identity()
    worst = max(rep.max_00, rep.max_0y, rep.max_0z)
    _report(capsys, 8, dev <= 1e-8 and rep.passed and worst <= 1e-10,
            f"max|psi - id| = {dev:.2e}; normal-form deviation = {worst:.2e}")


def test_c9_round_trip(capsys, round_trip):
    g, (psi, _, rep) = round_trip
    V = psi.nodes()
    Q = g.info["phi"](V)
    inside = psi.box.contains(Q)
    comp = float(np.max(np.abs(psi(Q[inside]) - V[inside])))
    worst = max(rep.max_00, rep.max_0y, rep.max_0z)
    _report(capsys, 9, worst <= 1e-6 and comp <= 1e-6,
            f"normal-form maxima = {worst:.2e}; max|psi o Phi0 - id| = {comp:.2e} "
            f"on {int(inside.sum())} overlap nodes")


def test_c10_refinement_and_determinism(capsys, tmp_path, round_trip):
    # coarse run through the CLI, twice with different worker counts
    res = ",".join(map(str, COARSE))
    cfg = tmp_path / "rt.cfg"
    cfg.write_text("kind: normal-form\nproblem: perturbed_normal(seed=7, amplitude=0.05)\n"
                   f"grid.resolution: {res}\n")
    blobs = {}
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        assert cli.main(["--config", str(cfg), "--out", str(out), "--workers", str(w)]) == 0
        blobs[w] = {n: (out / n).read_bytes() for n in ("psi.csv", "metric_nf.csv")}
    identical = blobs[1] == blobs[2]

    _, (fine, _, _) = round_trip
    coarse = np.loadtxt(tmp_path / "w1" / "psi.csv", delimiter=",", skiprows=1)[:, 3:]
    coarse = coarse.reshape(fine.samples[::2, ::2, ::2].shape)
    change = float(np.max(np.abs(fine.samples[::2, ::2, ::2] - coarse)))

    # predicted factor: interpolation error of the coarse grid on the exact map
    cbox = ChartBox(fine.box.x_max, fine.box.y_ranges, fine.box.z_ranges, fine.box.z_periodic, COARSE)
    Vc, Vf = mesh_points(cbox.grid_axes()), fine.nodes()
    dev = nf.DiffeoMap(cbox, _shear_inverse(Vc) - Vc, np.zeros(Vc.shape + (3,)))
    predicted = float(np.max(np.abs(dev(Vf) + Vf - _shear_inverse(Vf))))
    ok = identical and change <= 4 * predicted
    _report(capsys, 10, ok, f"refinement change {change:.2e} vs 4x predicted {4 * predicted:.2e}; "
                            f"CSV byte-identical across workers: {identical}")
