"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line listing any failed
checks, then asserts. Run alone with ``pytest tests/test_acceptance.py -v``
or ``python3 tests/test_acceptance.py``.
"""
import csv
import sys
import time

import numpy as np
import pytest

from shared import DYNAMIC_CASES, model_and_equilibria, solution_set
from voltmulti import cases
from voltmulti.algebraic import SINGULAR_THRESHOLD, System, constraints_from_network, max_constraint_violation
from voltmulti.algebraic import solve_voltages_linear
from voltmulti.cli import run_command
from voltmulti.dynsim import Model, simulate
from voltmulti.homotopy import enumerate_zero_power_seeds, find_all_solutions, split_branch
from voltmulti.homotopy import two_bus_closed_form, two_bus_network
from voltmulti.stability import leading_direction, perturbation_growth


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [dict(zip(rows[0], r)) for r in rows[1:]]


def read_report(path):
    with open(path) as fh:
        return dict(line.split(": ", 1) for line in fh.read().splitlines())


def verdict(capsys, number, checks, elapsed, budget):
    checks = list(checks) + [(f"finished within {budget:g} s", elapsed < budget)]
    failed = [name for name, ok in checks if not ok]
    status = "FAIL" if failed else "PASS"
    line = f"criterion {number}: {status} ({elapsed:.1f} s)"
    if failed:
        line += " failed: " + "; ".join(failed)
    with capsys.disabled():
        print("\n" + line)
    assert not failed, line


def cli(*argv):
    assert run_command([str(a) for a in argv]) == 0, argv


def test_criterion_1_three_bus_multistability(capsys, tmp_path):
    start = time.perf_counter()
    cli("solve", "--case", "three_bus_base", "--out", tmp_path)
    elapsed = time.perf_counter() - start
    rows = read_table(tmp_path / "solutions.csv")
    checks = []
    for level in (1.012, 0.560):
        near = [r for r in rows if abs(float(r["V2"]) - level) <= 0.02]
        checks.append((f"solution with |V2| = {level} present", bool(near)))
        checks.append((f"solution with |V2| = {level} stable", any(r["stability"] == "stable" for r in near)))
    verdict(capsys, 1, checks, elapsed, 5.0)


def test_criterion_2_thirteen_bus_solution_set(capsys, tmp_path):
    levels = (1.15, 0.69, 0.4, 0.3)
    start = time.perf_counter()
    cli("solve", "--case", "thirteen_bus", "--out", tmp_path / "solve")
    elapsed = time.perf_counter() - start
    cli("trace", "--case", "thirteen_bus", "--out", tmp_path / "trace")
    rows = read_table(tmp_path / "solve" / "solutions.csv")
    v2 = np.array([float(r["V2"]) for r in rows])
    checks = [(f"exactly 4 solutions (got {len(rows)})", len(rows) == 4),
              ("every solution at a listed level", all(np.min(np.abs(v - np.array(levels))) <= 0.03 for v in v2))]
    for level in levels:
        checks.append((f"level {level} present", bool(np.any(np.abs(v2 - level) <= 0.03))))
    singular_ends = 0
    for b in read_table(tmp_path / "trace" / "branches.csv"):
        pts = read_table(tmp_path / "trace" / f"branch_{b['branch']}.csv")
        by_free = sorted(pts, key=lambda p: float(p["free_value"]))
        for reason, pt in ((b["low_end"], by_free[0]), (b["high_end"], by_free[-1])):
            if reason == "singularity" and float(pt["min_singular_value"]) < SINGULAR_THRESHOLD:
                singular_ends += 1
                break
    checks.append((f"at least two branches end at a singularity (got {singular_ends})", singular_ends >= 2))
    verdict(capsys, 2, checks, elapsed, 60.0)


def test_criterion_3_entrapment_and_recovery(capsys, tmp_path):
    _, _, known = model_and_equilibria("thirteen_bus")
    stable = [e for e in known if e.stable]
    s1 = max(stable, key=lambda e: e.vm[1])
    s2 = min(stable, key=lambda e: abs(e.vm[1] - 0.69))
    start = time.perf_counter()
    cli("simulate", "--case", "thirteen_bus", "--scenario", "entrapment_pecs", "--out", tmp_path)
    elapsed = time.perf_counter() - start
    rows = read_table(tmp_path / "trajectory.csv")
    t = np.array([float(r["t"]) for r in rows])
    v2 = np.array([float(r["V2"]) for r in rows])
    # settled between the entrapping pulse and the recovery pulse
    plateau = v2[(t >= 9.0) & (t < 11.0)]
    checks = [(f"|V2| settles at S2 = {s2.vm[1]:.3f} before 11 s (got {plateau.min():.3f}..{plateau.max():.3f})",
               plateau.size > 0 and np.all(np.abs(plateau - s2.vm[1]) <= 0.03)),
              (f"|V2| at S1 = {s1.vm[1]:.3f} by 20 s", abs(v2[np.argmin(np.abs(t - 20.0))] - s1.vm[1]) <= 0.03)]
    verdict(capsys, 3, checks, elapsed, 30.0)


def test_criterion_4_lsivc(capsys, tmp_path):
    start = time.perf_counter()
    cli("lsivc", "--case", "three_bus_alt", "--out", tmp_path)
    elapsed = time.perf_counter() - start
    rep = read_report(tmp_path / "lsivc_report.txt")
    checks = [("entrapped at P2 = -0.7", abs(float(rep["entrapped_power"]) + 0.7) < 1e-3),
              ("branch tip at -0.73 +- 0.01", abs(float(rep["branch_tip_power"]) + 0.73) <= 0.01),
              ("shedding 0.2 collapses", float(rep["shed"]) == 0.2 and rep["outcome"] == "collapsed"),
              ("collapse follows the shed at 25 s", float(rep["collapse_time"]) > 25.0),
              ("final |P3| < 0.01", abs(float(rep["final_P3"])) < 0.01),
              ("control shed below the margin", float(rep["control_shed"]) < float(rep["control_margin"])),
              ("control run does not collapse", rep["control_outcome"] != "collapsed")]
    verdict(capsys, 4, checks, elapsed, 30.0)


def test_criterion_5_ultc(capsys, tmp_path):
    start = time.perf_counter()
    for case in ("ultc_deadband", "ultc_taplimit"):
        for scenario in ("pulse", "none"):
            cli("simulate", "--case", case, "--scenario", scenario, "--out", tmp_path / f"{case}_{scenario}")
    elapsed = time.perf_counter() - start
    pulsed = read_table(tmp_path / "ultc_deadband_pulse" / "trajectory.csv")
    quiet = read_table(tmp_path / "ultc_deadband_none" / "trajectory.csv")
    lim = read_table(tmp_path / "ultc_taplimit_pulse" / "trajectory.csv")
    t = np.array([float(r["t"]) for r in lim])
    K = np.array([float(r["K1"]) for r in lim])
    during = (t >= 2.4) & (t <= 2.65 + 1e-9)
    checks = [("pulsed V3 = 0.993 +- 0.005", abs(float(pulsed[-1]["V3"]) - 0.993) <= 0.005),
              ("unpulsed V3 = 1.009 +- 0.005", abs(float(quiet[-1]["V3"]) - 1.009) <= 0.005),
              ("K reaches 0.83 during the disturbance", abs(K[during].min() - 0.83) < 1e-6),
              (f"final K {K[-1]:.4f} differs from initial {K[0]:.4f}", abs(K[-1] - K[0]) > 1e-3)]
    verdict(capsys, 5, checks, elapsed, 20.0)


def test_criterion_6_phase_portrait(capsys, tmp_path):
    start = time.perf_counter()
    cli("portrait", "--case", "three_bus_portrait", "--grid", 50, "--out", tmp_path)
    elapsed = time.perf_counter() - start
    eqs = read_table(tmp_path / "equilibria.csv")
    net = cases.builtin_case("three_bus_portrait").network
    sols = find_all_solutions(net)
    found = [np.array([float(e[f"V{k}"]) for k in range(1, 4)] + [float(e["g2"]), float(e["b2"])]) for e in eqs]
    solved = [np.concatenate([np.abs(s.voltages), [y[0].real, y[0].imag]]) for y, s in sols]
    matched = all(min(np.max(np.abs(f - s)) for s in solved) < 1e-4 for f in found)
    covered = all(min(np.max(np.abs(f - s)) for f in found) < 1e-4 for s in solved) if found else False
    checks = [(f"4 equilibria (got {len(eqs)})", len(eqs) == 4),
              ("exactly 2 stable", sum(e["stability"] == "stable" for e in eqs) == 2),
              ("field zeros match the solution set to 1e-4", matched and covered and len(sols) == len(eqs))]
    verdict(capsys, 6, checks, elapsed, 30.0)


def test_criterion_7_two_bus_oracle(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    compared, mismatched, draws = 0, [], 0
    while compared < 100 and draws < 2000:
        draws += 1
        r, x = rng.uniform(0.01, 0.5, 2)
        P, Q = rng.uniform(-2, 2), rng.uniform(-1, 1)
        closed = sorted(two_bus_closed_form(r, x, P, Q))
        if not closed:
            continue
        compared += 1
        got = sorted(abs(s.voltages[1]) for _, s in find_all_solutions(two_bus_network(r, x, P, Q)))
        if len(got) != len(closed) or not np.allclose(got, closed, rtol=0, atol=1e-6):
            mismatched.append((r, x, P, Q))
    elapsed = time.perf_counter() - start
    checks = [(f"at least 100 instances compared (got {compared} of {draws} draws)", compared >= 100),
              (f"all solution sets match ({len(mismatched)} mismatches)", not mismatched)]
    verdict(capsys, 7, checks, elapsed, 60.0)


def _power_balance_worst():
    worst = 0.0
    for name in cases.case_names():
        c = cases.builtin_case(name)
        for tl, evs in c.timelines.items():
            t_end = max(20.0, 2 * max(e.t + getattr(e, "duration", 0.0) for e in evs)) if evs else 20.0
            tr = simulate(c.network, evs, c.initial_admittances(), t_end,
                          stop_on_collapse=c.expected.get(tl) != "collapse")
            mismatch = tr.slack_power - (tr.p + 1j * tr.q).sum(axis=1) - tr.losses
            worst = max(worst, float(np.max(np.abs(mismatch))))
    return worst


def _branch_reverify_worst():
    worst = 0.0
    for name in cases.case_names():
        net = cases.builtin_case(name).network
        cs = constraints_from_network(net)
        for br in solution_set(name).branches:
            for p in br.points:
                free = cs.with_free(br.free_bus, p.free_value)
                worst = max(worst, max_constraint_violation(net, free, p.voltages, p.admittances))
                sol = solve_voltages_linear(net, p.admittances)
                worst = max(worst, float(np.max(np.abs(sol.voltages - p.voltages))))
    return worst


def _probes_agree():
    rng = np.random.default_rng(11)
    disagreements = []
    for name in DYNAMIC_CASES:
        net, model, known = model_and_equilibria(name)
        for e in known:
            if e.stable:
                grow = max(perturbation_growth(net, e, rng.normal(size=e.jacobian.shape[0]), 1e-4, model=model)
                           for _ in range(3))
                ok = grow < 1.0
            elif e.classification == "unstable":
                v = leading_direction(e)
                ok = max(perturbation_growth(net, e, s * v, 1e-4, model=model) for s in (1, -1)) > 1.0
            else:
                continue
            if not ok:
                disagreements.append(f"{name}/{e.label}")
    return disagreements


def _jacobian_worst():
    worst = 0.0
    rng = np.random.default_rng(5)
    h = 1e-6
    for name in cases.case_names():
        net = cases.builtin_case(name).network
        sysm = System.build(net, constraints_from_network(net))
        m = len(net.non_slack)
        x = sysm.unknowns_from(rng.normal(scale=0.3, size=m) + 1j * rng.normal(scale=0.3, size=m))
        J = sysm.evaluate(x)[2]
        F = np.empty_like(J)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            F[:, j] = (sysm.evaluate(x + e, jac=False)[1] - sysm.evaluate(x - e, jac=False)[1]) / (2 * h)
        scale = max(1.0, float(np.max(np.abs(J))))
        worst = max(worst, float(np.max(np.abs(F - J))) / scale)
    return worst


def _switch_case_axis_branches():
    halves = [h for b in solution_set("switch_case").branches for h in split_branch(b, 0.0)]
    return sum(bool(h.points) and float(np.min(np.abs(h.realized_power))) < 1e-3 for h in halves)


def test_criterion_8_property_suite(capsys):
    start = time.perf_counter()
    balance = _power_balance_worst()
    reverify = _branch_reverify_worst()
    disagree = _probes_agree()
    jac = _jacobian_worst()
    seeds = {n: len(enumerate_zero_power_seeds(cases.builtin_case(n).network)) == 2 ** (cases.builtin_case(n)
             .network.n_buses - 1) for n in cases.case_names()}
    axis = _switch_case_axis_branches()
    elapsed = time.perf_counter() - start
    checks = [(f"power balance {balance:.2e} <= 1e-6", balance <= 1e-6),
              (f"branch points reverify ({reverify:.2e} <= 1e-8)", reverify <= 1e-8),
              (f"classification agrees with probes (disagree: {disagree})", not disagree),
              (f"Jacobian matches finite differences ({jac:.2e} <= 1e-4)", jac <= 1e-4),
              (f"seed counts 2^(n-1) (bad: {[n for n, ok in seeds.items() if not ok]})", all(seeds.values())),
              (f"switch_case has 4 branches crossing P3 = 0 (got {axis})", axis == 4)]
    verdict(capsys, 8, checks, elapsed, 120.0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
