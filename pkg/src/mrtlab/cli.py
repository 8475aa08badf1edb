"""Scenario-driven command line front end.

Every command reads one scenario file, runs one pipeline, and writes
deterministic JSON/CSV reports plus rendered figures into the output
directory. Exit codes: 0 success, 2 configuration error, 3 refusal
(non-simple system, solver preconditions, dimension restrictions),
4 a configured tolerance check failed.
"""

from __future__ import annotations

import argparse
import os
import sys as _sys
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION, geometry as geo, plots
from .albedo import AlbedoOperator, albedo_opnorm_L1, build_albedo, decompose_kernel
from .expressions import ExpressionError, phase_function
from .gauge import apply_gauge, random_smooth_gauge, trial_gauge, _flow_difference
from .inversion import (DimensionError, InversionGrid, extract_ray_transform,
                        invert_ray_transform, ray_matrix,
                        sample_w_configurations, extract_scattering)
from .phase_space import BoundaryFlux, santalo_check
from .scenario import Scenario, ScenarioError
from .stability import stability_experiment
from .transport import SubcriticalError, solve_forward
from .util import dump_csv, dump_json


class CheckFailure(RuntimeError):
    pass


def _report_base(scen: Scenario) -> dict:
    return {"format_version": FORMAT_VERSION, "scenario_hash": scen.hash(),
            "scenario_name": scen.doc.get("name", "")}


def cmd_trace(scen: Scenario, outdir: Path, seed: int) -> None:
    run = scen.run
    sys = scen.build_system()
    start = np.asarray(run.get("start", [-0.9, 0.0, 0.0][:sys.dim]), dtype=float)
    direction = np.asarray(run.get("direction", [1.0, 0.0, 0.0][:sys.dim]), dtype=float)
    p = geo.PhasePoint.make(sys, start, direction)
    path = geo.geodesic_through(sys, p, max_time=float(run.get("max_time", 12.0)))
    drift = float(np.abs(sys.metric_norm(path.x, path.xi) - 1.0).max())
    rep = _report_base(scen)
    rep.update({"tau_minus": path.tau_minus, "tau_plus": path.tau_plus,
                "tau": path.tau, "energy_drift": drift,
                "entry": path.x[0].tolist(), "exit": path.x[-1].tolist()})
    dump_json(rep, outdir / "trace.json")
    every = max(1, len(path.t) // 2000)
    rows = [[path.t[i]] + list(path.x[i]) + list(path.xi[i])
            for i in range(0, len(path.t), every)]
    cols = ["t"] + [f"x{i+1}" for i in range(sys.dim)] \
        + [f"xi{i+1}" for i in range(sys.dim)]
    dump_csv(outdir / "trace.csv", cols, rows)
    plots.plot_trace(path.t, path.x, sys.dim, outdir / "trace.png")


def cmd_santalo(scen: Scenario, outdir: Path, seed: int) -> None:
    sys = scen.build_system()
    grid, bp, bm = scen.build_grids(sys)
    integrands = scen.run.get("integrands", ["1"])
    qs = float(scen.run.get("quad_step", 0.01))
    rows = []
    for text in integrands:
        f = phase_function(str(text))
        rpt = santalo_check(sys, grid, bp, bm, f, quad_step=qs)
        rows.append({"integrand": str(text), "lhs": rpt.lhs,
                     "rhs_plus": rpt.rhs_plus, "rhs_minus": rpt.rhs_minus,
                     "discrepancies": rpt.discrepancies})
    rep = _report_base(scen)
    rep["results"] = rows
    dump_json(rep, outdir / "santalo.json")
    dump_csv(outdir / "santalo.csv",
             ["integrand", "lhs", "rhs_plus", "rhs_minus", "max_discrepancy"],
             [[r["integrand"], r["lhs"], r["rhs_plus"], r["rhs_minus"],
               max(r["discrepancies"].values())] for r in rows])
    plots.plot_santalo(rows, outdir / "santalo.png")
    tol = scen.run.get("tolerance")
    if tol is not None:
        worst = max(max(r["discrepancies"].values()) for r in rows)
        if worst > float(tol):
            raise CheckFailure(
                f"identity discrepancy {worst:.3g} exceeds tolerance {tol}")


def cmd_forward(scen: Scenario, outdir: Path, seed: int) -> None:
    sys = scen.build_system()
    ws = scen.build_workspace(sys)
    pair = scen.build_pair()
    ctx = ws.context(pair)
    uplus = phase_function(str(scen.run.get("u_plus", "1")))
    mode = scen.run.get("mode", "auto")
    u, srep = solve_forward(ctx, lambda x, v: uplus(x, v), mode=mode)
    rep = _report_base(scen)
    rep.update({"mode": srep.mode, "terms": srep.terms,
                "residual_winv_l1": srep.residual_winv,
                "truncation_bound": srep.truncation_bound,
                "solution_l1": u.l1_norm(),
                "solution_min": float(u.values.min()),
                "solution_max": float(u.values.max()),
                "subcritical": ctx.subcritical().as_dict()})
    dump_json(rep, outdir / "forward.json")
    X, V = ws.grid.phase_nodes()
    vals = u.values.ravel()
    rows = [[i] + list(X[i]) + list(V[i]) + [vals[i]]
            for i in range(0, len(vals), max(1, len(vals) // 5000))]
    cols = ["node"] + [f"x{i+1}" for i in range(sys.dim)] \
        + [f"xi{i+1}" for i in range(sys.dim)] + ["u"]
    dump_csv(outdir / "forward.csv", cols, rows)
    if sys.dim == 2:
        plots.plot_field2d(ws.grid, u.values, outdir / "forward.png",
                           title="transport solution, fiber average")


def cmd_albedo(scen: Scenario, outdir: Path, seed: int) -> None:
    sys = scen.build_system()
    ws = scen.build_workspace(sys)
    pair = scen.build_pair()
    op = build_albedo(ws, pair, mode=scen.run.get("mode", "delta"),
                      solver_mode=scen.run.get("solver_mode", "direct"),
                      scenario_hash=scen.hash())
    op.save(outdir / "albedo.npz")
    cm = op.column_masses()
    rep = _report_base(scen)
    rep.update({"n_in": op.bgrid_in.n_nodes, "n_out": op.bgrid_out.n_nodes,
                "operator_norm_l1": albedo_opnorm_L1(op),
                "column_mass_min": float(cm.min()),
                "column_mass_max": float(cm.max()),
                "grid_fingerprint": op.meta["grid_fingerprint"]})
    dump_json(rep, outdir / "albedo.json")
    plots.plot_matrix(op.matrix, outdir / "albedo.png")


def cmd_decompose(scen: Scenario, outdir: Path, seed: int) -> None:
    sys = scen.build_system()
    ws = scen.build_workspace(sys)
    pair = scen.build_pair()
    op = build_albedo(ws, pair, scenario_hash=scen.hash())
    dec = decompose_kernel(op)
    w_out = op.bgrid_out.mu_w.ravel()
    w_in = op.bgrid_in.mu_w.ravel()

    def part_norm(M):
        return float(((w_out[:, None] * np.abs(M)).sum(axis=0) / w_in).max())

    rep = _report_base(scen)
    rep.update({"alpha1_norm": part_norm(dec.A1), "alpha2_norm": part_norm(dec.A2),
                "alpha3_col_sup": dec.alpha3_col_sup})
    dump_json(rep, outdir / "decompose.json")
    dump_csv(outdir / "decompose.csv", ["column", "alpha3_col_norm"],
             [[j, v] for j, v in enumerate(dec.col_norms)])
    plots.plot_columns(dec.col_norms, outdir / "decompose.png")
    budget = scen.run.get("alpha3_budget")
    if budget is not None and dec.alpha3_col_sup > float(budget):
        raise CheckFailure(
            f"alpha3 column norm {dec.alpha3_col_sup:.3g} exceeds budget {budget}")


def cmd_invert(scen: Scenario, outdir: Path, seed: int) -> None:
    sys = scen.build_system()
    ws = scen.build_workspace(sys)
    pair = scen.build_pair()
    artifact = scen.run.get("artifact")
    if artifact:
        op = AlbedoOperator.load(artifact, ws.bgrid_in, ws.bgrid_out)
        if op.meta.get("scenario_hash") not in ("", scen.hash()):
            raise ScenarioError(
                "albedo artifact was produced by a different scenario "
                f"({op.meta.get('scenario_hash')} != {scen.hash()})")
    else:
        op = build_albedo(ws, pair, scenario_hash=scen.hash())
    eps_list = tuple(scen.run.get("eps_list", (0.4, 0.3, 0.2)))
    data = extract_ray_transform(op, eps_list=eps_list)
    inv_shape = tuple(scen.run.get("inversion_grid",
                                   (12, 30) if sys.dim == 2 else (5, 4, 8)))
    inv_grid = InversionGrid.build(sys, inv_shape)
    lam = float(scen.run.get("regularization", 1e-3))
    result = invert_ray_transform(data, sys, op, inv_grid, lam=lam)
    X, V = ws.grid.phase_nodes()
    a_true = pair.a_values(inv_grid.x, np.zeros_like(inv_grid.x))
    num = np.sqrt((inv_grid.w * (result.values - a_true) ** 2).sum())
    den = max(np.sqrt((inv_grid.w * a_true ** 2).sum()), 1e-300)
    rel_l2 = float(num / den)
    rep = _report_base(scen)
    rep.update({"rays_used": result.rays_used, "flagged": int(data.flagged.sum()),
                "cg_iterations": result.iterations,
                "data_residual": result.data_residual,
                "rel_l2_error_vs_scenario_a": rel_l2,
                "regularization": lam, "eps_list": list(eps_list)})
    samples = []
    n_scatter = int(scen.run.get("scattering_samples", 0))
    if n_scatter > 0:
        if sys.dim != 3:
            raise DimensionError(
                "scattering recovery requires a 3-dimensional scenario: the "
                "extraction limit needs codimension >= 1 on the boundary")
        a_rec = result.interpolator()
        for (y, ep, e) in sample_w_configurations(sys, n_scatter, seed=seed):
            s = extract_scattering(sys, pair, a_rec, y, ep, e)
            samples.append({"y": y.tolist(), "cos": s.crossing_cos,
                            "k_estimate": s.k_estimate, "flagged": bool(s.flagged)})
        rep["scattering"] = samples
    dump_json(rep, outdir / "invert.json")
    dump_csv(outdir / "recovered.csv",
             [f"x{i+1}" for i in range(sys.dim)] + ["a_recovered", "a_scenario"],
             [list(inv_grid.x[i]) + [result.values[i], a_true[i]]
              for i in range(inv_grid.n_nodes)])
    if sys.dim == 2:
        plots.plot_recovery2d(inv_grid.x, a_true, result.values,
                              outdir / "invert.png")
    Xo, Vo = ws.bgrid_out.nodes()
    tol = scen.run.get("tolerance")
    if tol is not None and rel_l2 > float(tol):
        raise CheckFailure(f"recovery error {rel_l2:.3g} exceeds tolerance {tol}")


def cmd_gauge(scen: Scenario, outdir: Path, seed: int) -> None:
    sys = scen.build_system()
    ws = scen.build_workspace(sys)
    pair = scen.build_pair()
    seeds = scen.run.get("gauge_seeds", [seed + 1])
    amplitude = float(scen.run.get("amplitude", 0.25))
    op = build_albedo(ws, pair, scenario_hash=scen.hash())
    base_norm = albedo_opnorm_L1(op)
    rows = []
    X, V = ws.grid.phase_nodes()
    idx = np.arange(0, X.shape[0], max(1, X.shape[0] // 512))
    for sd in seeds:
        w = random_smooth_gauge(sys, seed=int(sd), amplitude=amplitude,
                                support_margin=pair.support_margin)
        gauged = apply_gauge(sys, pair, w)
        op_g = build_albedo(ws, gauged, scenario_hash=scen.hash())
        dist = albedo_opnorm_L1(op, op_g)
        trial = trial_gauge(sys, pair, gauged)
        resid = float(np.abs(
            _flow_difference(sys, trial.log_w, X[idx], V[idx])
            - (pair.a_values(X[idx], V[idx])
               - gauged.a_values(X[idx], V[idx]))).max())
        rows.append({"seed": int(sd), "albedo_distance": dist,
                     "relative_distance": dist / base_norm,
                     "trial_gauge_residual": resid})
    rep = _report_base(scen)
    rep.update({"base_norm": base_norm, "amplitude": amplitude, "results": rows})
    dump_json(rep, outdir / "gauge.json")
    dump_csv(outdir / "gauge.csv",
             ["seed", "albedo_distance", "relative_distance", "trial_residual"],
             [[r["seed"], r["albedo_distance"], r["relative_distance"],
               r["trial_gauge_residual"]] for r in rows])
    if sys.dim == 2:
        w = random_smooth_gauge(sys, seed=int(seeds[0]), amplitude=amplitude,
                                support_margin=pair.support_margin)
        lw = w.log_w(X, V).reshape(ws.grid.n_spatial, ws.grid.n_dir).mean(axis=1)
        plots.plot_gauge(ws.grid.x, lw, outdir / "gauge.png")
    tol = scen.run.get("tolerance")
    if tol is not None:
        worst = max(r["relative_distance"] for r in rows)
        if worst > float(tol):
            raise CheckFailure(
                f"gauge-class albedo distance {worst:.3g} exceeds tolerance {tol}")


def cmd_stability(scen: Scenario, outdir: Path, seed: int) -> None:
    sys = scen.build_system()
    if sys.dim != 3:
        raise SubcriticalError(
            "the stability experiment follows the dimension >= 3 statement; "
            "configure a 3-dimensional scenario")
    ws = scen.build_workspace(sys)
    pair = scen.build_pair()
    pert = phase_function(str(scen.run.get("perturbation", "0.05")))
    t_values = list(scen.run.get("t_values", [0.02, 0.05, 0.1]))
    slack = float(scen.run.get("slack", 0.10))
    op_base = build_albedo(ws, pair, scenario_hash=scen.hash())
    rows = []
    from .transport import AdmissiblePair
    for t in t_values:
        def a_t(x, xi, _t=t):
            return pair.a_values(x, xi) + _t * pert(x, xi)
        pair_t = AdmissiblePair(a=a_t, k=pair.k,
                                support_margin=pair.support_margin,
                                label=f"{pair.label}+t{t}")
        run = stability_experiment(ws, pair, pair_t, slack=slack, opA=op_base,
                                   sigma=scen.run.get("sigma"),
                                   rho=scen.run.get("rho"))
        row = run.as_dict()
        row["t"] = float(t)
        rows.append(row)
    rep = _report_base(scen)
    rep["runs"] = rows
    dump_json(rep, outdir / "stability.json")
    cols = ["t", "eps", "C", "a_dist", "a_bound", "k_dist", "k_bound",
            "logw_max", "logw_bound", "a_pass", "k_pass", "logw_pass",
            "f_low_pass"]
    dump_csv(outdir / "stability.csv", cols,
             [[r[c] for c in cols] for r in rows])
    plots.plot_stability(rows, outdir / "stability.png")
    if not all(r["a_pass"] and r["k_pass"] and r["logw_pass"] and r["f_low_pass"]
               for r in rows):
        raise CheckFailure("a stability inequality failed; see stability.json")


COMMANDS = {
    "trace": cmd_trace,
    "santalo": cmd_santalo,
    "forward": cmd_forward,
    "albedo": cmd_albedo,
    "decompose": cmd_decompose,
    "invert": cmd_invert,
    "gauge": cmd_gauge,
    "stability": cmd_stability,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mrtlab",
        description="transport, albedo, inversion and stability experiments "
                    "on magnetic disks and balls")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--scenario", required=True, help="scenario YAML path")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        help="override a scenario entry (dot-separated key)")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread request (exported before heavy work)")
    args = parser.parse_args(argv)

    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        scen = Scenario.load(args.scenario, args.set)
    except (ScenarioError, ExpressionError, OSError, ValueError) as exc:
        print(f"configuration error: {exc}", file=_sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else int(scen.run.get("seed", 0))
    outdir = Path(args.output_dir or scen.output.get("dir", "out"))
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](scen, outdir, seed)
    except (ScenarioError, ExpressionError) as exc:
        print(f"configuration error: {exc}", file=_sys.stderr)
        return 2
    except (geo.SimplicityError, geo.ShootingError, SubcriticalError,
            DimensionError) as exc:
        print(f"refused: {exc}", file=_sys.stderr)
        return 3
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=_sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
