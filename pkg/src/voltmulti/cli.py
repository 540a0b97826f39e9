"""Command-line front end: ``voltmulti <command> [--case NAME | --scenario-file PATH] ...``.

Every command prints its main table to stdout (or writes it under ``--out``)
and a one-line summary to stderr.  Exit codes: 0 success, 1 usage error,
2 parse error, 3 solver failure, 4 unexpected collapse during ``simulate``.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cases
from .dynsim import Model, simulate
from .events import Event
from .homotopy import SweepConfig, default_free_bus, find_all_solutions
from .netmodel import Network
from .pecs import (
    DetectorConfig,
    EmergencyReport,
    PulseCommand,
    detect_entrapment,
    execute_pulse_recovery,
    lsivc,
    normal_equilibrium,
    search_pulse,
)
from .scenario import RunSettings, ScenarioError, load_scenario
from .stability import (
    MARGIN,
    NotAnEquilibrium,
    classify_equilibrium,
    color_branch,
    known_equilibria,
    phase_portrait,
)

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_SOLVER, EXIT_COLLAPSE = 0, 1, 2, 3, 4
COMMANDS = ("solve", "trace", "simulate", "classify", "portrait", "pecs", "lsivc", "cases")


class UsageError(Exception):
    pass


class SolverFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# output helpers


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return "" if v is None else str(v)


def table(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


class Output:
    """Writes named tables under ``out``; without a directory the primary table goes to stdout."""

    def __init__(self, out: Optional[str]):
        self.out = out
        self.written: List[str] = []
        if out:
            os.makedirs(out, exist_ok=True)

    def write(self, name: str, text: str, primary: bool = False):
        if self.out:
            path = os.path.join(self.out, name)
            with open(path, "w", newline="") as fh:
                fh.write(text)
            self.written.append(path)
        elif primary:
            sys.stdout.write(text)


def note(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# inputs


@dataclass
class Job:
    network: Network
    timeline: List[Event]
    run: RunSettings
    case: Optional[cases.Case] = None
    timeline_name: Optional[str] = None
    expect: Optional[str] = None
    extra_timelines: Dict[str, List[Event]] = field(default_factory=dict)

    def initial_admittances(self) -> np.ndarray:
        y = np.zeros(len(self.network.non_slack), dtype=complex)
        for bus, v in self.run.initial.items():
            y[self.network.non_slack.index(bus)] = v
        return y


def load_job(args) -> Job:
    if bool(args.case) == bool(args.scenario_file):
        raise UsageError("give exactly one of --case or --scenario-file")
    if args.case:
        try:
            case = cases.builtin_case(args.case)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
        run = RunSettings(initial=dict(case.initial), free_bus=case.free_bus, sweep_range=case.sweep_range)
        job = Job(case.network, [], run, case, extra_timelines=dict(case.timelines))
    else:
        if not os.path.isfile(args.scenario_file):
            raise UsageError(f"scenario file not found: {args.scenario_file}")
        sc = load_scenario(args.scenario_file)
        job = Job(sc.network, list(sc.timeline), sc.run, sc.case, expect=sc.run.expect,
                  extra_timelines=dict(sc.case.timelines) if sc.case else {})
    name = getattr(args, "scenario", None)
    if name:
        if name not in job.extra_timelines:
            avail = ", ".join(job.extra_timelines) or "none"
            raise UsageError(f"unknown scenario {name!r} for this network; available: {avail}")
        job.timeline = list(job.extra_timelines[name])
        job.timeline_name = name
        if job.case is not None and job.expect is None:
            job.expect = job.case.expected.get(name)
    if args.free_bus is not None:
        if args.free_bus not in job.network.non_slack:
            raise UsageError(f"--free-bus {args.free_bus} is not a load bus")
        job.run.free_bus = args.free_bus
    if args.tol is not None:
        if not args.tol > 0:
            raise UsageError("--tol must be positive")
        job.run.tol = args.tol
    if args.t_end is not None:
        job.run.t_end = args.t_end
    if args.dt_out is not None:
        if not args.dt_out > 0:
            raise UsageError("--dt-out must be positive")
        job.run.output_interval = args.dt_out
    return job


def parse_range(text: str) -> Tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--sweep-range expects lo:hi, got {text!r}") from None
    if not lo < hi:
        raise UsageError("--sweep-range needs lo < hi")
    return lo, hi


def sweep_for(job: Job, args) -> SweepConfig:
    fb = job.run.free_bus if job.run.free_bus is not None else default_free_bus(job.network)
    kw = {}
    if args.sweep_range:
        kw["range"] = parse_range(args.sweep_range)
    elif job.run.sweep_range is not None:
        kw["range"] = job.run.sweep_range
    return SweepConfig(fb, **kw)


def default_t_end(job: Job) -> float:
    ends = [getattr(e, "t", 0.0) + getattr(e, "duration", 0.0) for e in job.timeline]
    return max(20.0, 2.0 * max(ends, default=0.0))


def _restarts(args) -> int:
    if args.seed_restarts is None:
        return 64
    if args.seed_restarts < 0:
        raise UsageError("--seed-restarts must be non-negative")
    return args.seed_restarts


def _margin(job: Job) -> float:
    return job.run.tol if job.run.tol is not None else MARGIN


def _rtol(job: Job) -> dict:
    if job.run.tol is None:
        return {}
    return {"rtol": job.run.tol, "atol": job.run.tol * 1e-2}


# ---------------------------------------------------------------------------
# commands


def _solutions(job: Job, args):
    sweep = sweep_for(job, args)
    sols = find_all_solutions(job.network, free_bus=sweep.free_bus, sweep=sweep, restarts=_restarts(args))
    return sols, sweep


def _equilibrium_header(net: Network, first: Sequence[str]) -> List[str]:
    return (list(first) + [f"V{k}" for k in range(1, net.n_buses + 1)]
            + [f"angle{k}" for k in range(1, net.n_buses + 1)]
            + [f"g{k}" for k in net.non_slack] + [f"b{k}" for k in net.non_slack])


def _equilibrium_values(V: np.ndarray, y: np.ndarray) -> List[float]:
    return list(np.abs(V)) + list(np.degrees(np.angle(V))) + list(y.real) + list(y.imag)


def _classify_all(job: Job, sols, margin: float):
    model = Model(job.network)
    out = []
    for y, sol in sols:
        try:
            eq = classify_equilibrium(job.network, y, model, margin=margin)
            out.append((y, sol, eq.classification if eq.eigenvalues.size else "static", eq))
        except NotAnEquilibrium:
            out.append((y, sol, "unclassified", None))
    return out


def cmd_solve(job: Job, args, out: Output) -> int:
    sols, sweep = _solutions(job, args)
    if not len(sols):
        raise SolverFailure("no power-flow solution found")
    net = job.network
    rows = []
    classified = _classify_all(job, sols, _margin(job))
    for i, (y, sol, cls, eq) in enumerate(classified):
        max_re = float(np.max(eq.eigenvalues.real)) if eq is not None and eq.eigenvalues.size else None
        rows.append([i + 1, cls, max_re, sol.residual_norm] + _equilibrium_values(sol.voltages, y))
    header = _equilibrium_header(net, ["solution", "stability", "max_real_eigenvalue", "residual"])
    out.write("solutions.csv", table(header, rows), primary=True)
    singular = sum(b.terminated_by == "singularity" for b in sols.branches)
    note(f"{len(sols)} solutions; free bus {sweep.free_bus}; {len(sols.branches)} branches traced, "
         f"{singular} ending at a singularity; {sols.seeds} zero-power seeds")
    return EXIT_OK


def branch_table(net: Network, branch) -> str:
    header = (["free_value", "realized_power"] + [f"V{k}" for k in range(1, net.n_buses + 1)]
              + ["min_singular_value", "stability"])
    rows = ([p.free_value, p.realized_power] + list(np.abs(p.voltages)) + [p.min_singular_value, p.stability]
            for p in branch.points)
    return table(header, rows)


def cmd_trace(job: Job, args, out: Output) -> int:
    sols, sweep = _solutions(job, args)
    if not sols.branches:
        raise SolverFailure("no solution branch could be traced")
    model = Model(job.network)
    rows = []
    for i, br in enumerate(sols.branches):
        color_branch(job.network, br, model, margin=_margin(job))
        out.write(f"branch_{i + 1}.csv", branch_table(job.network, br))
        fv = br.free_values
        rows.append([i + 1, br.seed, len(br.points), float(fv[0]), float(fv[-1]), br.end_reasons[0],
                     br.end_reasons[1], br.terminated_by])
    header = ["branch", "seed", "points", "first_free_value", "last_free_value", "low_end", "high_end",
              "terminated_by"]
    out.write("branches.csv", table(header, rows), primary=True)
    singular = sum(b.terminated_by == "singularity" for b in sols.branches)
    note(f"{len(sols.branches)} branches in {sweep.free_variable}{sweep.free_bus} over "
         f"[{sweep.range[0]:g}, {sweep.range[1]:g}]; {singular} ending at a singularity")
    return EXIT_OK


def cmd_simulate(job: Job, args, out: Output) -> int:
    net = job.network
    model = Model(net)
    t_end = job.run.t_end if job.run.t_end is not None else default_t_end(job)
    dt = job.run.output_interval or 0.01
    state = model.initial_state(job.initial_admittances())
    expect_collapse = job.expect == "collapse"
    traj = simulate(net, job.timeline, state, t_end, dt, model=model, stop_on_collapse=not expect_collapse,
                    **_rtol(job))
    out.write("trajectory.csv", traj.to_csv(), primary=True)
    if traj.termination == "integrator_failure":
        note(f"simulation failed at t={traj.t[-1]:.4f}: {traj.message} (partial trajectory written)")
        return EXIT_SOLVER
    if traj.collapse_time is not None:
        if expect_collapse:
            note(f"collapse at t={traj.collapse_time:.4f}, as expected; ran to t={traj.t[-1]:.4f}")
            return EXIT_OK
        note(f"collapse detected at t={traj.collapse_time:.4f}")
        return EXIT_COLLAPSE
    final = ", ".join(f"V{k}={traj.vm[-1, k - 1]:.4f}" for k in net.non_slack)
    extra = "; expected a collapse that did not occur" if expect_collapse else ""
    note(f"completed to t={traj.t[-1]:.4f}; final {final}{extra}")
    return EXIT_OK


def cmd_classify(job: Job, args, out: Output) -> int:
    sols, _ = _solutions(job, args)
    if not len(sols):
        raise SolverFailure("no equilibrium found")
    classified = [c for c in _classify_all(job, sols, _margin(job)) if c[3] is not None]
    if not classified:
        raise SolverFailure("no solution is an equilibrium of the load dynamics")
    classified.sort(key=lambda c: -float(np.min(np.abs(c[1].voltages))))
    rows, eig_rows = [], []
    for i, (y, sol, cls, eq) in enumerate(classified):
        label = f"E{i + 1}"
        max_re = float(np.max(eq.eigenvalues.real)) if eq.eigenvalues.size else None
        rows.append([label, cls, max_re] + _equilibrium_values(eq.voltages, eq.admittances))
        order = np.lexsort((eq.eigenvalues.imag, -eq.eigenvalues.real))
        for j, lam in enumerate(eq.eigenvalues[order]):
            eig_rows.append([label, j + 1, lam.real, lam.imag])
    header = _equilibrium_header(job.network, ["equilibrium", "stability", "max_real_eigenvalue"])
    out.write("equilibria.csv", table(header, rows), primary=True)
    out.write("eigenvalues.csv", table(["equilibrium", "index", "real", "imag"], eig_rows))
    stable = sum(c[2] == "stable" for c in classified)
    note(f"{len(classified)} equilibria, {stable} stable")
    return EXIT_OK


def cmd_portrait(job: Job, args, out: Output) -> int:
    axes = tuple(args.axes.split(","))
    if len(axes) != 2:
        raise UsageError("--axes expects two comma-separated states, e.g. g2,b2")
    ranges = None
    if args.x_range or args.y_range:
        if not (args.x_range and args.y_range):
            raise UsageError("give both --x-range and --y-range")
        ranges = (parse_range(args.x_range), parse_range(args.y_range))
    if args.grid < 2:
        raise UsageError("--grid must be at least 2")
    try:
        pf = phase_portrait(job.network, axes, ranges=ranges, resolution=args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    a, b = pf.axes
    out.write("field.csv", table([a, b, f"d{a}", f"d{b}"], pf.rows()), primary=True)
    pts = pf.equilibrium_points()
    rows = [[e.label, e.classification, pts[i, 0], pts[i, 1]] + list(np.abs(e.voltages))
            for i, e in enumerate(pf.equilibria)]
    header = ["equilibrium", "stability", a, b] + [f"V{k}" for k in range(1, job.network.n_buses + 1)]
    out.write("equilibria.csv", table(header, rows))
    stable = sum(e.stable for e in pf.equilibria)
    note(f"{len(pf.equilibria)} equilibria in the field, {stable} stable; "
         f"{int(pf.valid.sum())}/{pf.valid.size} grid points solvable")
    return EXIT_OK


def _pulse_from_flag(text: str) -> PulseCommand:
    try:
        bus, p, dur = text.split(":")
        return PulseCommand("dg_curtailment", {int(bus): (float(p), None)}, float(dur))
    except ValueError:
        raise UsageError(f"--pulse expects bus:P:duration, got {text!r}") from None


PULSE_MAGNITUDES = (0.1, 0.2, 0.5, 1.0)
PULSE_DURATIONS = (0.05, 0.1, 0.2)


def cmd_pecs(job: Job, args, out: Output) -> int:
    net = job.network
    model = Model(net)
    known = known_equilibria(net, model)
    if not known:
        raise SolverFailure("no equilibrium found")
    cfg = DetectorConfig()
    if args.from_equilibrium:
        match = [e for e in known if e.label == args.from_equilibrium]
        if not match:
            raise UsageError(f"unknown equilibrium {args.from_equilibrium!r}; known: "
                             + ", ".join(e.label for e in known))
        entrapped, detection, entrapped_id = match[0], None, match[0].label
        t0 = 0.0
    else:
        if not job.timeline and "entrapment" in job.extra_timelines:
            job.timeline, job.timeline_name = list(job.extra_timelines["entrapment"]), "entrapment"
        t_end = job.run.t_end if job.run.t_end is not None else default_t_end(job)
        pre = simulate(net, job.timeline, model.initial_state(job.initial_admittances()), t_end,
                       job.run.output_interval or 0.01, model=model, **_rtol(job))
        out.write("detection_trajectory.csv", pre.to_csv())
        if pre.termination != "completed":
            note(f"pre-event run ended early ({pre.termination}: {pre.message})")
            return EXIT_SOLVER if pre.termination == "integrator_failure" else EXIT_COLLAPSE
        found = detect_entrapment(pre, cfg, known, net)
        if found is None:
            normal = normal_equilibrium(known)
            rep = EmergencyReport(None, normal.label if normal else None, None, None, "not_entrapped")
            out.write("pecs_report.txt", rep.to_text(), primary=True)
            note("no entrapment detected; nothing to recover")
            return EXIT_OK
        detection, entrapped_id = found
        entrapped = next(e for e in known if e.label == entrapped_id)
        t0 = detection
    if entrapped.stable is False:
        note(f"warning: starting equilibrium {entrapped.label} is {entrapped.classification}")
    if args.pulse:
        cmd = _pulse_from_flag(args.pulse)
        bad = cmd.problems()
        if bad:
            raise UsageError("; ".join(bad))
    else:
        res = search_pulse(net, entrapped, None, PULSE_MAGNITUDES, PULSE_DURATIONS, known, model)
        out.write("pulse_search.csv", res.table())
        if res.best is None:
            note("no recovering pulse in the search grid")
            raise SolverFailure("pulse search found no recovering command")
        cmd = res.best
    traj, rep = execute_pulse_recovery(net, entrapped, cmd, known, detection_time=detection, model=model, t0=t0)
    out.write("recovery_trajectory.csv", traj.to_csv())
    out.write("pecs_report.txt", rep.to_text(), primary=True)
    note(f"{rep.outcome} from {entrapped_id} with {cmd.describe()}")
    return EXIT_OK


def cmd_lsivc(job: Job, args, out: Output) -> int:
    net = job.network
    timeline = job.timeline
    if not timeline:
        timeline = list(job.extra_timelines.get("fault", []))
    if args.shed_bus not in net.non_slack:
        raise UsageError(f"--shed-bus {args.shed_bus} is not a load bus")
    t_end = job.run.t_end if job.run.t_end is not None else max(40.0, args.shed_time + 15.0)
    model = Model(net)
    try:
        known = known_equilibria(net, model)
        res = lsivc(net, timeline, args.shed_bus, args.shed, args.shed_time, t_end, model, known)
    except ValueError as exc:
        raise SolverFailure(str(exc)) from None
    control_shed = args.control_shed if args.control_shed is not None else 0.5 * res.margin
    ctrl = lsivc(net, timeline, args.shed_bus, control_shed, args.shed_time, t_end, model, known)
    out.write("lsivc_trajectory.csv", res.trajectory.to_csv())
    out.write("control_trajectory.csv", ctrl.trajectory.to_csv())
    text = res.to_text() + "".join(f"control_{line}\n" for line in ctrl.to_text().splitlines())
    out.write("lsivc_report.txt", text, primary=True)
    note(f"shed {res.shed:g} at bus {args.shed_bus}: {res.outcome}; control shed {ctrl.shed:.4g}: {ctrl.outcome}")
    return EXIT_OK


def cmd_cases(args, out: Output) -> int:
    rows = []
    for name in cases.case_names():
        c = cases.builtin_case(name)
        rows.append([name, c.network.n_buses, " ".join(c.timelines) or "-"])
    out.write("cases.csv", table(["case", "buses", "scenarios"], rows), primary=True)
    return EXIT_OK


HANDLERS = {
    "solve": cmd_solve,
    "trace": cmd_trace,
    "simulate": cmd_simulate,
    "classify": cmd_classify,
    "portrait": cmd_portrait,
    "pecs": cmd_pecs,
    "lsivc": cmd_lsivc,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    src = common.add_argument_group("input")
    src.add_argument("--case", help="built-in case name (see the 'cases' command)")
    src.add_argument("--scenario-file", help="YAML scenario file")
    src.add_argument("--scenario", help="named disturbance timeline of the case")
    common.add_argument("--out", help="directory for output tables (default: primary table to stdout)")
    common.add_argument("--t-end", type=float, help="simulation end time [s]")
    common.add_argument("--dt-out", type=float, help="output sampling interval [s]")
    common.add_argument("--tol", type=float,
                        help="integration relative tolerance, or the eigenvalue margin for static analyses")
    common.add_argument("--seed-restarts", type=int, help="random restarts added to the zero-power seeds")
    common.add_argument("--free-bus", type=int, help="bus whose conductance is swept")
    common.add_argument("--sweep-range", help="sweep interval lo:hi of the free conductance")

    p = _Parser(prog="voltmulti", description="Power-flow branches, load dynamics and pulse emergency control.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("solve", parents=[common], help="all power-flow solutions with stability")
    sub.add_parser("trace", parents=[common], help="solution branches with stability coloring")
    sub.add_parser("simulate", parents=[common], help="trajectory through a disturbance timeline")
    sub.add_parser("classify", parents=[common], help="equilibria and their eigenvalues")
    pp = sub.add_parser("portrait", parents=[common], help="two-state velocity field and its zeros")
    pp.add_argument("--axes", default="g2,b2", help="two dynamic states, e.g. g2,b2")
    pp.add_argument("--x-range", help="lo:hi of the first axis")
    pp.add_argument("--y-range", help="lo:hi of the second axis")
    pp.add_argument("--grid", type=int, default=50, help="grid points per axis")
    pe = sub.add_parser("pecs", parents=[common], help="entrapment detection and pulse recovery")
    pe.add_argument("--from-equilibrium", help="start entrapped at this equilibrium label (e.g. E2)")
    pe.add_argument("--pulse", help="curtailment pulse bus:P:duration instead of a search")
    pl = sub.add_parser("lsivc", parents=[common], help="load-shedding induced collapse demonstration")
    pl.add_argument("--shed-bus", type=int, default=2)
    pl.add_argument("--shed", type=float, default=0.2, help="consumption shed [p.u.]")
    pl.add_argument("--shed-time", type=float, default=25.0)
    pl.add_argument("--control-shed", type=float, help="shed for the control run (default: half the margin)")
    sub.add_parser("cases", help="list built-in cases")
    return p


def _default_command(argv: List[str]) -> List[str]:
    # ``voltmulti --scenario-file f.yaml`` runs the file's own run.command
    if argv and argv[0].startswith("-") and "--scenario-file" in argv:
        i = argv.index("--scenario-file")
        if i + 1 < len(argv) and os.path.isfile(argv[i + 1]):
            try:
                cmd = load_scenario(argv[i + 1]).run.command
            except ScenarioError:
                cmd = "simulate"
            return [cmd or "simulate"] + argv
    return argv


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    argv = _default_command(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
        out = Output(getattr(args, "out", None))
        if args.command == "cases":
            return cmd_cases(args, out)
        job = load_job(args)
        return HANDLERS[args.command](job, args, out)
    except UsageError as exc:
        note(f"usage error: {exc}")
        return EXIT_USAGE
    except ScenarioError as exc:
        note(f"parse error: {exc}")
        return EXIT_PARSE
    except SolverFailure as exc:
        note(f"solver failure: {exc}")
        return EXIT_SOLVER
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        note(f"solver failure: {exc}")
        return EXIT_SOLVER


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
