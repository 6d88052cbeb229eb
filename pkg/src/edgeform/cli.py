"""Batch front end: ``edgeform --config scenario.cfg --out results/``.

Config files are flat ``key: value`` lines with dotted keys, for example::

    kind: normal-form
    problem: perturbed_normal(seed=7, amplitude=0.05)
    grid.resolution: 33,17,16
    tol.nf: 1e-6

Exit status is 0 on success, 2 when a gate rejects the problem and 1 on
any other error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import traceback
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import builtins
from .charflow import (fixed_point_curve, integrate_char_curve, linearization_gate,
                       with_overrides)
from .edgegeom import (alpha_form, exactness_test, gnormalized_check, horizontal_check,
                       normlem_check)
from .errors import ConfigError, EdgeformError, GateError, NotExact
from .fields import ChartBox, mesh_points
from .normalform import normalize
from .sivp import ReducedIVP, solve_reduced, solve_sivp

log = logging.getLogger("edgeform")

KINDS = ("solve-ivp", "char-curve", "check-metric", "normal-form")

TOL_DEFAULTS = {
    "nf": 1e-6, "n": 1e-6, "flow": 1e-6, "branch": 1e-6, "fit": 1e-4,
    "norm": 1e-8, "exact": 1e-8, "rel": 1e-8,
    "compat": 1e-8, "margin": 0.05, "ode": 1e-10, "spec": 1e-6, "fold": 0.05,
    "eigen_margin": 0.05, "zero": 1e-9, "fixpoint": 1e-11, "flow_ode": 1e-11,
}
GRID_KEYS = ("x_max", "resolution")
TOP_KEYS = ("kind", "problem", "output_dir", "seed", "workers")


@dataclass
class Scenario:
    kind: str
    problem: str
    grid: dict = dc_field(default_factory=dict)
    tol: dict = dc_field(default_factory=lambda: dict(TOL_DEFAULTS))
    overrides: dict = dc_field(default_factory=dict)
    output_dir: str = "out"
    seed: int = None
    workers: int = 1


def _number(key, text, lineno):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects a number, got {text!r}") from None


def parse_config_text(text, source="<config>") -> Scenario:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition(":")
        key, val = key.strip(), val.strip()
        if not sep or not key or " " in key:
            raise ConfigError(f"{source}: line {lineno}: expected 'key: value', got {raw!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key}")
        values[key] = (val, lineno)

    s = Scenario(kind="", problem="")
    for key, (val, lineno) in values.items():
        group, _, name = key.partition(".")
        if key in TOP_KEYS:
            if key in ("seed", "workers"):
                try:
                    setattr(s, key, int(val))
                except ValueError:
                    raise ConfigError(f"line {lineno}: {key} expects an integer") from None
            else:
                setattr(s, key, val)
        elif group == "tol" and name in TOL_DEFAULTS:
            v = _number(key, val, lineno)
            if not v > 0:
                raise ConfigError(f"line {lineno}: tolerance {key} must be positive")
            s.tol[name] = v
            s.overrides[name] = v
        elif group == "grid" and name in GRID_KEYS:
            if name == "resolution":
                try:
                    s.grid[name] = tuple(int(r) for r in val.split(","))
                except ValueError:
                    raise ConfigError(f"line {lineno}: grid.resolution expects integers") from None
            else:
                v = _number(key, val, lineno)
                if not v > 0:
                    raise ConfigError(f"line {lineno}: grid.x_max must be positive")
                s.grid[name] = v
        else:
            raise ConfigError(f"unknown key {key}")
    if s.kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {s.kind!r}")
    if not s.problem:
        raise ConfigError("missing key problem")
    builtins.parse_problem(s.problem)   # validates the name
    return s


def parse_config(path) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(p.read_text(), str(path))


# ---------------------------------------------------------------- output helpers

def write_csv(path, header, rows):
    rows = np.asarray(rows, dtype=float).reshape(-1, len(header))
    np.savetxt(path, rows, fmt="%.17g", delimiter=",", header=",".join(header), comments="")


def _axis_names(box):
    return ([f"y{i + 1}" for i in range(box.n_y)] + [f"z{i + 1}" for i in range(box.n_z)])


def _regrid(box, grid):
    if not grid:
        return box
    return ChartBox(grid.get("x_max", box.x_max), box.y_ranges, box.z_ranges, box.z_periodic,
                    grid.get("resolution", box.resolution))


# ---------------------------------------------------------------- kinds

def _run_ivp(s, out, report):
    prob = builtins.make(s.problem, seed=s.seed) if s.seed is not None else builtins.make(s.problem)
    kw = dict(workers=s.workers, spec_tol=s.tol["spec"], fold_tol=s.tol["fold"],
              ode_tol=s.tol["ode"])
    if isinstance(prob, ReducedIVP):
        prob = dataclasses.replace(prob, box=_regrid(prob.box, s.grid))
        sol = solve_reduced(prob, **kw)
        exact = getattr(prob, "exact_u", None)
        exact_w = None if exact is None else (
            lambda P: P[..., 0] * exact(P[..., 0], P[..., 1]))
        label = "exact"
    else:
        exact_w = getattr(prob, "exact", None)
        label = getattr(prob, "exact_label", None) or "exact"
        prob = dataclasses.replace(prob, box=_regrid(prob.box, s.grid), compat_tol=s.tol["compat"],
                                   margin=s.tol["margin"])
        sol = solve_sivp(prob, **kw)
    P = mesh_points((sol.x_grid,) + tuple(sol.y_axes))
    diag = sol.metadata["diagnostics"]
    for k, v in diag.items():
        report.append(f"{k:<18} = {v:.6e}")
    if "pde_residual" in sol.metadata:
        report.append(f"{'pde_residual':<18} = {sol.metadata['pde_residual']:.6e}")
    if "series_gap" in sol.metadata:
        report.append(f"{'series_gap_max':<18} = {np.max(sol.metadata['series_gap']):.6e}")
    if exact_w is not None:
        err = float(np.max(np.abs(sol.omega_grid - exact_w(P))))
        report.append(f"{'max|omega - ' + label + '|':<18} = {err:.6e}")
    names = ["x"] + [f"y{i + 1}" for i in range(len(sol.y_axes))]
    write_csv(out / "omega.csv", names + ["omega", "u", "p"],
              np.concatenate([P, sol.omega_grid[..., None], sol.u_grid[..., None],
                              sol.p_grid[..., None]], axis=-1))
    return 0


def _run_char(s, out, report):
    prob = builtins.make(s.problem, seed=s.seed) if s.seed is not None else builtins.make(s.problem)
    prob = with_overrides(prob, eigen_margin=s.tol["eigen_margin"], zero_tol=s.tol["zero"],
                          ode_tol=s.tol["ode"], fixpoint_tol=s.tol["fixpoint"])
    rep = linearization_gate(prob)
    report.append(f"eigenvalues        = {np.round(rep.eigenvalues, 12).tolist()}")
    curve = integrate_char_curve(prob)
    fp = fixed_point_curve(prob, curve.t_samples)
    gap = float(np.max(np.abs(curve.gamma_samples - fp.gamma_samples)))
    report.append(f"ode/fixed-point gap = {gap:.6e}")
    exact = getattr(prob, "exact", None)
    if exact is not None:
        report.append(f"max|gamma - exact| = {np.max(np.abs(curve.gamma_samples - exact(curve.t_samples))):.6e}")
    g = curve.gamma_samples.reshape(len(curve.t_samples), -1)
    write_csv(out / "curve.csv", ["t"] + [f"gamma{i + 1}" for i in range(g.shape[1])],
              np.column_stack([curve.t_samples, g]))
    return 0


def _metric(s):
    g = builtins.make(s.problem, seed=s.seed) if s.seed is not None else builtins.make(s.problem)
    return dataclasses.replace(g, box=_regrid(g.box, s.grid)) if s.grid else g


def _run_check(s, out, report):
    g = _metric(s)
    h = horizontal_check(g, s.tol["norm"])
    report.append(f"horizontal         = ok, max|C - 1| = {h.max_deviation:.6e}")
    report.append(f"normalized         = {'yes' if h.is_normalized else 'no'}")
    gn = gnormalized_check(g, s.tol["norm"])
    report.append(f"g-normalized       = {'yes' if gn.is_gnormalized else 'no'} "
                  f"(max|gbar^00 - 1| = {gn.max_deviation:.6e})")
    alpha = alpha_form(g)
    report.append(f"max|alpha|         = {alpha.max_norm:.6e}")
    report.append(f"g-related defect   = {alpha.g_related_defect:.6e}")
    if g.box.n_z:
        ex = exactness_test(alpha, s.tol["exact"])
        wit = "" if ex.witness is None else f" (witness {ex.witness:.10g})"
        report.append(f"exact              = {ex.verdict}{wit}")
    if alpha.g_related_defect <= s.tol["rel"]:
        report.append(f"normlem deviation  = {normlem_check(g, s.tol['rel']):.6e}")
    base = alpha.points
    cols = _axis_names(g.box)
    write_csv(out / "alpha.csv", cols + [f"alpha_{c}" for c in cols[g.box.n_y:]],
              np.concatenate([base.reshape(-1, base.shape[-1])[:, 1:],
                              alpha.components.reshape(-1, g.box.n_z)], axis=-1))
    if g.box.n_z and not ex.exact:
        raise NotExact(f"alpha-form is not exact; period witness {ex.witness:.10g}", ex.witness)
    return 0


def _run_normal_form(s, out, report):
    g = _metric(s)
    t = s.tol
    psi, nf, rep = normalize(g, nf_tol=t["nf"], n_tol=t["n"], flow_tol=t["flow"],
                             branch_tol=t["branch"], fit_tol=t["fit"], norm_tol=t["norm"],
                             exact_tol=t["exact"], rel_tol=t["rel"], ode_tol=t["flow_ode"],
                             workers=s.workers, spec_tol=t["spec"], fold_tol=t["fold"])
    md = psi.metadata
    report.append("gates              = horizontal ok, normalized ok, exact ok, g-related ok")
    report.append(f"rescaled x0        = {'yes' if md['rescaled'] else 'no'}")
    report.append(f"max|N xhat - 1|    = {md['n_defect']:.6e}")
    report.append(f"max|psi*xhat - x|  = {md['xhat_defect']:.6e}")
    report.append(f"orthogonality      = {md['orthogonality']:.6e}")
    report.append(f"boundary slope dev = {md['slope_deviation']:.6e}")
    report.append(f"max|psi - id|      = {psi.deviation_from_identity():.6e}")
    report.extend(rep.lines())
    nodes = psi.nodes()
    d = nodes.shape[-1]
    cols = ["x"] + _axis_names(psi.box)
    write_csv(out / "psi.csv", cols + [f"psi_{c}" for c in cols],
              np.concatenate([nodes, psi.samples], axis=-1).reshape(-1, 2 * d))
    iu = np.triu_indices(d)
    G = nf.info["samples"][..., iu[0], iu[1]]
    write_csv(out / "metric_nf.csv", cols + [f"g{i}{j}" for i, j in zip(*iu)],
              np.concatenate([nodes, G], axis=-1).reshape(-1, d + len(iu[0])))
    return 0 if rep.passed else 1


RUNNERS = {"solve-ivp": _run_ivp, "char-curve": _run_char, "check-metric": _run_check,
           "normal-form": _run_normal_form}


def run_scenario(s: Scenario, out_dir=None) -> int:
    out = Path(out_dir or s.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = [f"kind               = {s.kind}", f"problem            = {s.problem}"]
    for k, v in sorted(s.overrides.items()):
        report.append(f"override tol.{k:<6} = {v:g}")
    try:
        status = RUNNERS[s.kind](s, out, report)
        report.append(f"status             = {'PASS' if status == 0 else 'FAIL'}")
    except GateError as exc:
        status = 2
        report.append(f"GATE FAILED: {type(exc).__name__} ({exc.condition}): {exc}")
        if isinstance(exc, NotExact) and exc.witness is not None:
            report.append(f"period witness     = {exc.witness:.10g}")
    except EdgeformError as exc:
        status = 1
        report.append(f"ERROR: {type(exc).__name__}: {exc}")
    except Exception as exc:  # noqa: BLE001 - any other failure is an internal error
        status = 1
        report.append(f"INTERNAL ERROR: {type(exc).__name__}: {exc}")
        log.debug("%s", traceback.format_exc())
    (out / "report.txt").write_text("\n".join(report) + "\n")
    return status


def list_builtins():
    return builtins.list_builtins()


def _workers(flag):
    if flag is not None:
        return flag
    env = os.environ.get("EDGEFORM_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"EDGEFORM_WORKERS must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="edgeform", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="scenario file (flat key: value lines)")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--workers", type=int, help="worker threads (default: EDGEFORM_WORKERS or 1)")
    ap.add_argument("--seed", type=int, help="seed for seeded built-ins")
    ap.add_argument("--list-builtins", action="store_true", help="print the built-in catalog")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.list_builtins:
        print(list_builtins())
        return 0
    if not args.config:
        ap.error("--config is required unless --list-builtins is given")
    try:
        s = parse_config(args.config)
        w = _workers(args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if w is not None:
        s.workers = w
    if args.seed is not None:
        s.seed = args.seed
    status = run_scenario(s, args.out)
    print((Path(args.out or s.output_dir) / "report.txt").read_text(), end="")
    return status


if __name__ == "__main__":
    sys.exit(main())
