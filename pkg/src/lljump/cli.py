"""``lljump`` command line: plan, simulate, compare, detect, plot.

Exit codes: 0 success, 1 bad input (schema, IO, inconsistent files),
2 solver failure, 3 simulation blow-up. Set ``LLJUMP_LOG_LEVEL`` (DEBUG,
INFO, WARNING, ...) for diagnostics on standard error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .detection import DetectorConfig, detect, norm_derivatives
from .errors import LLJumpError, NumericalBlowup
from .model import centroidal_inertia, yaw_of
from .scenario import load_scenario
from .sim import RunLog, compare_models, drop_plan, run_closed_loop, yaw_axis_distance
from .transcription import plan_jump

log = logging.getLogger("lljump")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_BLOWUP = 0, 1, 2, 3
LOG_ENV = "LLJUMP_LOG_LEVEL"


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 1."""


def scenario_hash(scn):
    """Digest of everything that shapes a plan (robot, task, plan kind, weights, solver)."""
    blocks = scn.model_dump(include={"robot", "task", "plan", "weights", "solver"}, mode="json")
    return hashlib.sha256(json.dumps(blocks, sort_keys=True).encode()).hexdigest()[:16]


def _load_scenario(path):
    try:
        return load_scenario(path)
    except LLJumpError as exc:
        raise InputError(str(exc)) from exc


def _parse_perturb(items):
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep or key != "platform":
            raise InputError(f"unsupported perturbation {item!r}; expected platform=HEIGHT")
        try:
            out[key] = float(val)
        except ValueError:
            raise InputError(f"platform height must be a number, got {val!r}") from None
    return out


# ------------------------------------------------------------ subcommands


def cmd_plan(args):
    scn = _load_scenario(args.scenario)
    which = args.model or scn.model
    model = scn.robot_model(which)
    out = Path(args.out)
    if scn.plan.kind == "drop":
        traj = drop_plan(model, scn.robot.stance_height, scn.plan.drop_height, scn.plan.hold_time)
        report = None
    else:
        task = scn.jump_task(model)
        traj, report = plan_jump(task, scn.schedule(task, model), scn.cost_weights(), model, scn.solver_config(),
                                 final_orientation_in_cost=scn.task.final_orientation_in_cost)
        line = report.to_json_line(scenario=scn.name, model=which, planner="plan")
        print(line)
        if args.report:
            with open(args.report, "a") as fh:
                fh.write(line + "\n")
        if not report.converged:
            log.error("planner finished with %s: %s", report.status, report.message)
            return EXIT_SOLVER
    lio.save_trajectory(traj, out, report, extra={"scenario": scn.name, "scenario_hash": scenario_hash(scn),
                                                  "model": which, "plan_kind": scn.plan.kind})
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_simulate(args):
    scn = _load_scenario(args.scenario)
    try:
        plan, side = lio.load_trajectory(args.plan)
    except (OSError, lio.FileFormatError) as exc:
        raise InputError(f"cannot read plan: {exc}") from exc
    if side.get("scenario_hash") != scenario_hash(scn):
        raise InputError(f"plan {args.plan} was not produced from scenario {scn.name} (hash mismatch)")
    perturb = _parse_perturb(args.perturb)
    model = scn.robot_model("llsrbm")  # the plant is always the lump-leg model
    override = {"seed": args.seed} if args.seed is not None else {}
    if args.duration is not None:
        override["duration"] = args.duration
    sim = scn.sim_config(**override)
    ground = scn.ground_model(platform=perturb.get("platform"))
    try:
        run = run_closed_loop(plan, model, scn.controller_kwargs(), scn.detector_config(), sim, ground)
    except NumericalBlowup as exc:
        log.error("%s", exc)
        return EXIT_BLOWUP
    run.meta.update({"scenario": scn.name, "plan": str(args.plan), "perturb": perturb})
    out = Path(args.out) if args.out else Path(args.plan).with_suffix(".run.csv")
    run.save(out)
    det = run.event_time("touchdown_detected")
    print(json.dumps({"runlog": str(out), "touchdown_detected": det,
                      "first_penetration": run.event_time("first_penetration")}))
    return EXIT_OK


def _compare_rows(rep):
    keys = ("duration", "time_to_target", "flight_mean_foot_axis_distance", "flight_mean_yaw_rate",
            "flight_mean_feet_extension")
    rows = []
    for name, status, st, it, met in zip(rep.names, rep.statuses, rep.solve_times, rep.iterations, rep.metrics):
        rows.append([name, status, st, it] + [met.get(k) for k in keys])
    return ["model", "status", "solve_time_s", "iterations", *keys], rows


def _fmt(v):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def compare_markdown(scn_name, header, rows):
    lines = [f"# Model comparison: {scn_name}", "", "| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
    if len(rows) == 2:
        lines += ["", "## Differences (first minus second)", "", "| quantity | delta |", "|---|---|"]
        for j, name in enumerate(header[2:], start=2):
            a, b = rows[0][j], rows[1][j]
            delta = a - b if isinstance(a, (int, float)) and isinstance(b, (int, float)) else None
            lines.append(f"| {name} | {_fmt(delta)} |")
    lines += ["", "Solve times depend on the machine and are reported for reference only.", ""]
    return "\n".join(lines)


def cmd_compare(args):
    scn = _load_scenario(args.scenario)
    if scn.task is None:
        raise InputError(f"scenario {scn.name} has no task to plan")
    ll = scn.robot_model("llsrbm")
    other = ll if args.against == "same" else scn.robot_model("srbm")
    task = scn.jump_task(ll)
    sim = scn.sim_config(**({"seed": args.seed} if args.seed is not None else {}))
    rep = compare_models(task, scn.schedule(task, ll), scn.cost_weights(), ll, other, scn.solver_config(),
                         simulate=args.simulate, sim=sim, controller=scn.controller_kwargs(),
                         detector=scn.detector_config())
    header, rows = _compare_rows(rep)
    out = Path(args.out_dir)
    stem = out / f"{scn.name}_compare"
    lio.atomic_write_text(stem.with_suffix(".csv"), lio.table_to_csv(header, [[_fmt(v) if v is None else v for v in r] for r in rows]))
    md = compare_markdown(scn.name, header, rows)
    if rep.simulations:
        md += "\n## Closed-loop runs on the lump-leg plant\n\n```json\n" + json.dumps(rep.simulations, indent=2) + "\n```\n"
    lio.atomic_write_text(stem.with_suffix(".md"), md)
    print(md)
    return EXIT_OK if rep.ok else EXIT_SOLVER


def _load_runlog(path):
    try:
        return RunLog.load(path)
    except (OSError, lio.FileFormatError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read run log: {exc}") from exc


def cmd_detect(args):
    run = _load_runlog(args.runlog)
    cfg = dict(run.meta.get("detector", {}))
    for key in ("window", "threshold", "arming_time"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    try:
        dcfg = DetectorConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad detector settings: {exc}") from exc
    t_off = run.event_time("takeoff")
    if t_off is None and run.phase and run.phase[0] == "flight":
        t_off = float(run.t[0])
    hit = None
    if t_off is not None:
        # replay from takeoff only: stance samples carry controller transients
        sel = run.t >= t_off
        hit = detect(zip(run.t[sel], run.vg_norm[sel]), dcfg, t_takeoff=t_off)
    print("none" if hit is None else f"{hit:.6f}")
    rate = np.append(norm_derivatives(run.t, run.vg_norm), np.nan)
    rows = [[float(t), float(v), float(vt), float(d), ph] for t, v, vt, d, ph in
            zip(run.t, run.vg_norm, run.vg_norm_true, rate, run.phase)]
    out = Path(args.out) if args.out else Path(args.runlog).with_suffix(".vg.csv")
    lio.atomic_write_text(out, lio.table_to_csv(["t", "vG_norm", "vG_norm_true", "dvG_norm_dt", "phase"], rows))
    return EXIT_OK


def _tidy_plan(traj, model=None):
    rows = []
    for k in range(traj.n_knots):
        t = float(traj.t[k])
        rows += [[t, "rx", traj.X[k, 0]], [t, "ry", traj.X[k, 1]], [t, "rz", traj.X[k, 2]],
                 [t, "yaw_deg", float(np.degrees(yaw_of(traj.X[k, 3:7])))],
                 [t, "foot_axis_distance", yaw_axis_distance(traj, k)],
                 [t, "fz_total", float(traj.forces[k, :, 2].sum())]]
        if model is not None:
            rows.append([t, "IWzz", float(centroidal_inertia(traj.X[k, 3:7], traj.X[k, :3], traj.feet[k], model)[2, 2])])
    return rows


def _tidy_run(run):
    rows = []
    v = np.linalg.norm(run.v_com, axis=1)
    for i in range(run.n_ticks):
        t = float(run.t[i])
        rows += [[t, "rz", run.X[i, 2]], [t, "yaw_deg", float(np.degrees(yaw_of(run.X[i, 3:7])))],
                 [t, "v_com_norm", v[i]], [t, "vG_norm", run.vg_norm[i]], [t, "fz_total", float(run.forces[i, :, 2].sum())],
                 [t, "force_tracking", float(run.mode[i] == "ForceTracking")]]
    return rows


def cmd_plot(args):
    try:
        side = lio.read_sidecar(args.input)
    except lio.FileFormatError as exc:
        raise InputError(str(exc)) from exc
    kind = side.get("kind")
    if kind == "trajectory":
        try:
            traj, _ = lio.load_trajectory(args.input)
        except (OSError, lio.FileFormatError) as exc:
            raise InputError(str(exc)) from exc
        model = _load_scenario(args.scenario).robot_model(side.get("model")) if args.scenario else None
        rows = _tidy_plan(traj, model)
    elif kind == "runlog":
        rows = _tidy_run(_load_runlog(args.input))
    else:
        raise InputError(f"{args.input}: unknown file kind {kind!r}")
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".tidy.csv")
    lio.atomic_write_text(out, lio.table_to_csv(["t", "variable", "value"], [[t, n, float(v)] for t, n, v in rows]))
    print(str(out))
    return EXIT_OK


# ------------------------------------------------------------ entry point


def build_parser():
    p = argparse.ArgumentParser(prog="lljump", description=__doc__.split("\n")[0],
                                epilog=f"Log verbosity: set {LOG_ENV}=DEBUG|INFO|WARNING|ERROR (default WARNING).")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", help="solve the jump planning problem of a scenario")
    sp.add_argument("scenario", help="scenario YAML file or bundled scenario name")
    sp.add_argument("--model", choices=("llsrbm", "srbm"), help="planning model (default: the scenario's)")
    sp.add_argument("--out", required=True, help="plan CSV path; metadata goes to <out>.json")
    sp.add_argument("--report", help="append the solve report as one JSON line to this file")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run a plan in closed loop on the lump-leg plant")
    sp.add_argument("plan", help="plan CSV written by 'lljump plan'")
    sp.add_argument("scenario", help="the scenario the plan was made from")
    sp.add_argument("--seed", type=int, help="noise seed (default: the scenario's)")
    sp.add_argument("--perturb", action="append", metavar="platform=HEIGHT",
                    help="raise (or lower) the landing ground by HEIGHT metres")
    sp.add_argument("--duration", type=float, help="simulated time in seconds (default: plan + settle time)")
    sp.add_argument("--out", help="run log CSV path (default: <plan>.run.csv)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="plan with the lump-leg model and its rigid body twin, write a report")
    sp.add_argument("scenario", help="scenario YAML file or bundled scenario name")
    sp.add_argument("--against", choices=("srbm", "same"), default="srbm",
                    help="second model: the rigid body twin, or the lump-leg model itself")
    sp.add_argument("--simulate", action="store_true", help="also run both plans in closed loop")
    sp.add_argument("--seed", type=int, help="noise seed for --simulate")
    sp.add_argument("--out-dir", default=".", help="directory for <name>_compare.md and .csv")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("detect", help="replay touchdown detection on a run log")
    sp.add_argument("runlog", help="run log CSV written by 'lljump simulate'")
    sp.add_argument("--window", type=int, help="number of consecutive derivatives that must agree")
    sp.add_argument("--threshold", type=float, help="derivative threshold of |v_G| in 1/s (negative)")
    sp.add_argument("--arming-time", dest="arming_time", type=float, help="seconds after takeoff before detecting")
    sp.add_argument("--out", help="|v_G| series CSV path (default: <runlog>.vg.csv)")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("plot", help="emit tidy (t, variable, value) CSV from a plan or run log")
    sp.add_argument("input", help="plan CSV or run log CSV")
    sp.add_argument("--scenario", help="scenario, adds centroidal inertia to plan output")
    sp.add_argument("--out", help="output CSV path (default: <input>.tidy.csv)")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING", stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
