"""Command-line drivers: transport solves, diffusion flows, sweeps, presets.

Subcommands
-----------
transport     solve one regularized coupling, print cost/entropy/value CSV
gamma-sweep   decreasing-eps comparison against the exact 1-D coupling
flow          run a diffusion flow from a config file, write frame CSVs
slice-error   flow + L1 distance to the model's closed-form profile
error-table   (eps, tau) sweep of space-time L1 errors
barycenter    shared-marginal barycenter of several measure CSVs
figure        named experiment presets 3..8 at their documented parameters

Every run emits a flat key=value manifest of the resolved parameters and
the library version: commands that stream CSV to stdout write it to
stderr, commands that populate an output directory write manifest.txt
there.  Outputs are deterministic (identical invocations give
byte-identical files).

Exit status: 0 success, 1 bad arguments or configuration (including
malformed input data), 2 solver non-convergence, 3 I/O failure.  The
environment variable ENTROFLOW_THREADS caps sweep worker threads.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings

from . import __version__
from .barycenter import BarycenterProblem, barycenter_solve
from .config import ConfigError, load_config
from .flow import FlowParams, run_flow
from .io import (
    manifest_text,
    measure_to_csv,
    read_measure,
    write_diagnostics,
    write_frames,
    write_manifest,
)
from .presets import FigurePreset, SliceCurvePreset, get_preset
from .reference import error_table, l1_slice_error, reference_for_model
from .transport import NonConvergenceError, NumericalBlowupError, gamma_sweep, sinkhorn

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_IO = 3


def _repr_float(v):
    return repr(float(v))


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; route them to 1 instead."""

    def error(self, message):
        raise ConfigError(message)


def _float_list(text, what):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError(f"{what} must be a comma-separated list of numbers")
    out = []
    for s in items:
        try:
            out.append(float(s))
        except ValueError:
            raise ConfigError(f"{what} contains a non-number {s!r}") from None
    return out


def _emit_manifest(entries):
    sys.stderr.write(manifest_text(entries))


def _stdout_csv():
    return csv.writer(sys.stdout, lineterminator="\n")


def _flow_params(cfg, *, eps=None, tau=None, n_steps=None):
    return FlowParams(
        eps=cfg.eps if eps is None else eps,
        tau=cfg.tau if tau is None else tau,
        n_steps=cfg.steps if n_steps is None else n_steps,
        schedule_constant=cfg.schedule_constant,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_transport(args):
    mu = read_measure(args.mu)
    nu = read_measure(args.nu, grid=mu.grid)
    plan, state = sinkhorn(mu, nu, args.eps, tol=args.tol, max_iter=args.max_iter)
    if not state.converged:
        raise NonConvergenceError(
            f"no convergence in {state.iterations} iterations "
            f"(marginal residual {state.marginal_residual:.3e})"
        )
    cost = plan.cost()
    entropy = plan.entropy()
    writer = _stdout_csv()
    writer.writerow(["cost", "entropy", "w2_eps", "iterations"])
    writer.writerow(
        [
            _repr_float(cost),
            _repr_float(entropy),
            _repr_float(cost + args.eps * entropy),
            state.iterations,
        ]
    )
    if args.dense_plan:
        _write_plan_csv(args.dense_plan, plan)
    _emit_manifest(
        {
            "command": "transport",
            "mu": args.mu,
            "nu": args.nu,
            "eps": args.eps,
            "tol": args.tol,
            "max_iter": args.max_iter,
            "iterations": state.iterations,
            "residual": state.marginal_residual,
        }
    )
    return EXIT_OK


def _write_plan_csv(path, plan):
    grid = plan.grid
    dense = plan.to_dense()
    pts = grid.points()
    names = ["x", "y"][: grid.dim]
    header = [f"{n}_from" for n in names] + [f"{n}_to" for n in names] + ["weight"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(grid.n_points):
            left = [_repr_float(c) for c in pts[i]]
            for j in range(grid.n_points):
                writer.writerow(left + [_repr_float(c) for c in pts[j]] + [_repr_float(dense[i, j])])


def _cmd_gamma_sweep(args):
    mu = read_measure(args.mu)
    nu = read_measure(args.nu, grid=mu.grid)
    report = gamma_sweep(mu, nu, args.eps_list)
    writer = _stdout_csv()
    fields = ["eps", "w2_eps", "cost", "plan_entropy", "plan_l1_to_exact", "value_gap"]
    writer.writerow(fields)
    for row in report.rows():
        writer.writerow([_repr_float(row[f]) for f in fields])
    _emit_manifest(
        {
            "command": "gamma-sweep",
            "mu": args.mu,
            "nu": args.nu,
            "eps_list": ",".join(_repr_float(e) for e in args.eps_list),
            "exact_value": report.exact_value,
        }
    )
    return EXIT_OK


def _cmd_flow(args):
    overrides = {}
    if args.save_every is not None:
        overrides["save_every"] = str(args.save_every)
    cfg = load_config(args.config, overrides=overrides)
    grid = cfg.build_grid()
    model = cfg.build_model()
    pot = cfg.build_potential(grid)
    rho0 = cfg.build_initial(grid)
    os.makedirs(args.out_dir, exist_ok=True)
    write_manifest(args.out_dir, {"command": "flow", "config": args.config, **cfg.resolved_entries()})
    traj = run_flow(
        rho0,
        model,
        pot,
        _flow_params(cfg),
        step_tol=cfg.step_tol,
        max_iter=cfg.max_iter,
        diagnostics=cfg.diagnostics,
    )
    write_frames(args.out_dir, traj, save_every=cfg.save_every)
    if cfg.diagnostics:
        write_diagnostics(os.path.join(args.out_dir, "diagnostics.csv"), traj)
    if traj.aborted:
        print(f"error: {traj.error}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_slice_error(args):
    cfg = load_config(args.config)
    grid = cfg.build_grid()
    model = cfg.build_model()
    pot = cfg.build_potential(grid)
    rho0 = cfg.build_initial(grid)
    x0, t0 = cfg.reference_params()
    sol = reference_for_model(model, t0=t0, x0=x0)
    horizon = cfg.steps * cfg.tau
    for t in args.t:
        if not 0.0 <= t < horizon:
            raise ConfigError(f"slice time {t!r} outside the run window [0, {horizon!r})")
    traj = run_flow(
        rho0,
        model,
        pot,
        _flow_params(cfg),
        step_tol=cfg.step_tol,
        max_iter=cfg.max_iter,
        diagnostics=False,
    )
    if traj.aborted:
        raise NonConvergenceError(traj.error or "flow aborted")
    writer = _stdout_csv()
    writer.writerow(["t", "l1_error"])
    for t in args.t:
        writer.writerow([_repr_float(t), _repr_float(l1_slice_error(traj, sol, t))])
    _emit_manifest(
        {
            "command": "slice-error",
            "config": args.config,
            "t": ",".join(_repr_float(t) for t in args.t),
            **cfg.resolved_entries(),
        }
    )
    return EXIT_OK


def _table_rows(stream, table):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["eps", "tau", "total_l1", "schedule_ok"])
    for rep in table.reports:
        writer.writerow(
            [
                _repr_float(rep.eps),
                _repr_float(rep.tau),
                _repr_float(rep.total),
                "true" if rep.schedule_ok else "false",
            ]
        )


def _cmd_error_table(args):
    cfg = load_config(args.config)
    if cfg.dim != 1:
        raise ConfigError("error-table compares against 1-D closed-form profiles")
    model = cfg.build_model()
    grid = cfg.build_grid()
    pot = cfg.build_potential(grid)
    x0, t0 = cfg.reference_params()
    table = error_table(
        model,
        args.eps_list,
        args.tau_list,
        args.T,
        cfg.points,
        pot=pot,
        extent=cfg.extent(),
        t0=t0,
        x0=x0,
        step_tol=cfg.step_tol,
        max_iter=cfg.max_iter,
        schedule_constant=cfg.schedule_constant,
    )
    _table_rows(sys.stdout, table)
    failed = [rep for rep in table.reports if rep.failed]
    _emit_manifest(
        {
            "command": "error-table",
            "config": args.config,
            "eps_list": ",".join(_repr_float(e) for e in args.eps_list),
            "tau_list": ",".join(_repr_float(t) for t in args.tau_list),
            "T": args.T,
            "failed_cells": len(failed),
            **cfg.resolved_entries(),
        }
    )
    if failed:
        for rep in failed:
            print(f"error: cell eps={rep.eps!r} tau={rep.tau!r}: {rep.message}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_barycenter(args):
    paths = [p.strip() for p in args.inputs.split(",") if p.strip()]
    if not paths:
        raise ConfigError("--inputs must list at least one measure CSV")
    measures = [read_measure(paths[0])]
    for path in paths[1:]:
        measures.append(read_measure(path, grid=measures[0].grid))
    prob = BarycenterProblem(
        measures, args.eps, weights=args.weights, tol=args.tol, max_iter=args.max_iter
    )
    rho, diag = barycenter_solve(prob)
    sys.stdout.write(measure_to_csv(rho))
    _emit_manifest(
        {
            "command": "barycenter",
            "inputs": ",".join(paths),
            "eps": args.eps,
            "weights": ",".join(_repr_float(w) for w in prob.weights),
            "tol": args.tol,
            "max_iter": args.max_iter,
            "iterations": diag.iterations,
            "max_marginal_residual": max(diag.marginal_residuals),
        }
    )
    return EXIT_OK


def _cmd_figure(args):
    try:
        preset = get_preset(args.name)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    preset = preset.with_overrides(points=args.points, steps=args.steps)
    out_root = args.out_dir if args.out_dir else f"figure_{preset.name}"
    os.makedirs(out_root, exist_ok=True)
    if isinstance(preset, FigurePreset):
        return _run_figure_flows(preset, out_root)
    if isinstance(preset, SliceCurvePreset):
        return _run_figure_curves(preset, out_root)
    return _run_figure_table(preset, out_root)


def _run_figure_flows(preset, out_root):
    status = EXIT_OK
    for run in preset.runs:
        cfg = run.config
        grid = cfg.build_grid()
        model = cfg.build_model()
        pot = cfg.build_potential(grid)
        rho0 = run.initial_measure(grid)
        run_dir = os.path.join(out_root, run.tag)
        os.makedirs(run_dir, exist_ok=True)
        write_manifest(
            run_dir,
            {"command": f"figure {preset.name}", "run": run.tag, **cfg.resolved_entries()},
        )
        traj = run_flow(
            rho0,
            model,
            pot,
            _flow_params(cfg),
            step_tol=cfg.step_tol,
            max_iter=cfg.max_iter,
            diagnostics=cfg.diagnostics,
        )
        write_frames(run_dir, traj, save_every=cfg.save_every)
        if cfg.diagnostics:
            write_diagnostics(os.path.join(run_dir, "diagnostics.csv"), traj)
        if traj.aborted:
            print(f"error: run {run.tag}: {traj.error}", file=sys.stderr)
            status = EXIT_SOLVER
    return status


def _write_curves_csv(path, times, labels, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + labels)
        for r, t in enumerate(times):
            writer.writerow([_repr_float(t)] + [_repr_float(col[r]) for col in columns])


def _run_figure_curves(preset, out_root):
    cfg = preset.config
    grid = cfg.build_grid()
    model = cfg.build_model()
    pot = cfg.build_potential(grid)
    x0, t0 = cfg.reference_params()
    sol = reference_for_model(model, t0=t0, x0=x0)
    times = preset.times()
    write_manifest(
        out_root,
        {
            "command": f"figure {preset.name}",
            "eps_list": ",".join(_repr_float(e) for e in preset.eps_list),
            "tau_list": ",".join(_repr_float(t) for t in preset.tau_list),
            "T": preset.T,
            **cfg.resolved_entries(),
        },
    )
    status = EXIT_OK

    def leg(eps, tau):
        n_steps = int(round(preset.T / tau)) + 1
        rho0 = cfg.build_initial(grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            traj = run_flow(
                rho0,
                model,
                pot,
                _flow_params(cfg, eps=eps, tau=tau, n_steps=n_steps),
                step_tol=cfg.step_tol,
                max_iter=cfg.max_iter,
                diagnostics=False,
            )
        if traj.aborted:
            raise NonConvergenceError(traj.error or "flow aborted")
        return [l1_slice_error(traj, sol, t) for t in times]

    for fname, labels, cells in (
        ("curves_eps.csv", [f"eps={_repr_float(e)}" for e in preset.eps_list],
         [(e, cfg.tau) for e in preset.eps_list]),
        ("curves_tau.csv", [f"tau={_repr_float(t)}" for t in preset.tau_list],
         [(cfg.eps, t) for t in preset.tau_list]),
    ):
        columns = []
        for eps, tau in cells:
            try:
                columns.append(leg(eps, tau))
            except (NonConvergenceError, NumericalBlowupError) as exc:
                print(f"error: leg eps={eps!r} tau={tau!r}: {exc}", file=sys.stderr)
                columns.append([float("nan")] * len(times))
                status = EXIT_SOLVER
        _write_curves_csv(os.path.join(out_root, fname), times, labels, columns)
    return status


def _run_figure_table(preset, out_root):
    cfg = preset.config
    model = cfg.build_model()
    grid = cfg.build_grid()
    pot = cfg.build_potential(grid)
    x0, t0 = cfg.reference_params()
    table = error_table(
        model,
        preset.eps_list,
        preset.tau_list,
        preset.T,
        cfg.points,
        pot=pot,
        extent=cfg.extent(),
        t0=t0,
        x0=x0,
        step_tol=cfg.step_tol,
        max_iter=cfg.max_iter,
        schedule_constant=cfg.schedule_constant,
    )
    write_manifest(
        out_root,
        {
            "command": f"figure {preset.name}",
            "eps_list": ",".join(_repr_float(e) for e in preset.eps_list),
            "tau_list": ",".join(_repr_float(t) for t in preset.tau_list),
            "T": preset.T,
            **cfg.resolved_entries(),
        },
    )
    with open(os.path.join(out_root, "error_table.csv"), "w", newline="") as fh:
        _table_rows(fh, table)
    failed = [rep for rep in table.reports if rep.failed]
    for rep in failed:
        print(f"error: cell eps={rep.eps!r} tau={rep.tau!r}: {rep.message}", file=sys.stderr)
    return EXIT_SOLVER if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _build_parser():
    parser = _Parser(prog="entroflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"entroflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand",
                                parser_class=_Parser)

    p = sub.add_parser("transport", help="solve one regularized coupling")
    p.add_argument("--mu", required=True, help="first marginal CSV")
    p.add_argument("--nu", required=True, help="second marginal CSV")
    p.add_argument("--eps", required=True, type=float, help="entropic regularization")
    p.add_argument("--tol", type=float, default=1e-8, help="marginal L1 tolerance")
    p.add_argument("--max-iter", type=int, default=100_000, help="iteration cap")
    p.add_argument("--dense-plan", metavar="OUT.csv", help="also write the dense plan")
    p.set_defaults(func=_cmd_transport)

    p = sub.add_parser("gamma-sweep", help="decreasing-eps comparison to the exact 1-D value")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--eps-list", required=True, type=lambda s: _float_list(s, "--eps-list"),
                   help="strictly decreasing eps values, comma-separated")
    p.set_defaults(func=_cmd_gamma_sweep)

    p = sub.add_parser("flow", help="run a diffusion flow from a config file")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out-dir", default=".", help="directory for frames and diagnostics")
    p.add_argument("--save-every", type=int, help="write every K-th frame (overrides config)")
    p.set_defaults(func=_cmd_flow)

    p = sub.add_parser("slice-error", help="flow + L1 errors against the closed-form profile")
    p.add_argument("--config", required=True)
    p.add_argument("--t", required=True, type=lambda s: _float_list(s, "--t"),
                   help="slice times, comma-separated")
    p.set_defaults(func=_cmd_slice_error)

    p = sub.add_parser("error-table", help="(eps, tau) sweep of space-time L1 errors")
    p.add_argument("--config", required=True)
    p.add_argument("--eps-list", required=True, type=lambda s: _float_list(s, "--eps-list"))
    p.add_argument("--tau-list", required=True, type=lambda s: _float_list(s, "--tau-list"))
    p.add_argument("--T", required=True, type=float, help="time horizon")
    p.set_defaults(func=_cmd_error_table)

    p = sub.add_parser("barycenter", help="shared-marginal barycenter of measure CSVs")
    p.add_argument("--inputs", required=True, help="comma-separated measure CSV paths")
    p.add_argument("--eps", required=True, type=float)
    p.add_argument("--weights", type=lambda s: _float_list(s, "--weights"),
                   help="nonnegative weights summing to one (default uniform)")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--max-iter", type=int, default=50_000)
    p.set_defaults(func=_cmd_barycenter)

    p = sub.add_parser("figure", help="run a named experiment preset")
    p.add_argument("name", help="preset name (3..8)")
    p.add_argument("--points", type=int, help="override points per axis")
    p.add_argument("--steps", type=int, help="override the frame count")
    p.add_argument("--out-dir", help="output root (default figure_<name>)")
    p.set_defaults(func=_cmd_figure)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, NumericalBlowupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
