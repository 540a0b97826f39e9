"""Admittance homotopy: sweep one load conductance and trace every solution branch.

Branches are followed by natural-parameter continuation in the free
conductance (or susceptance) with a tangent predictor and Newton corrector.
A branch ends at the sweep limits, or where the free parameter turns back
(a fold), which is located exactly with a Moore-Spence extended system.

Starting points come from the zero-power configurations of the network, in
which every load bus is either an open circuit (y = 0) or a near-ideal short,
plus a batch of random restarts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .algebraic import (
    SINGULAR_THRESHOLD,
    AdmittanceState,
    ConstraintSet,
    FixedAdmittance,
    FixedPower,
    Free,
    Linked,
    PolynomialPower,
    System,
    VoltageSolution,
    constraints_from_network,
    scaled_min_singular_value,
    solve_constrained,
    solve_voltages_linear,
)
from .netmodel import DynamicAdmittance, Network

SHORT_ADMITTANCE = 1e4
DEDUP_TOL = 1e-4
RESTARTS = 64
RESTART_BOX = 5.0
# largest voltage jump accepted between consecutive branch points
MAX_VOLTAGE_JUMP = 0.1


@dataclass
class SweepConfig:
    free_bus: int
    free_variable: str = "g"
    range: Tuple[float, float] = (-20.0, 20.0)
    initial_step: float = 0.05
    min_step: float = 1e-5
    singularity_threshold: float = SINGULAR_THRESHOLD
    # steps may grow up to this fraction of |free value| once far from zero
    relative_step: float = 0.1
    max_points: int = 20000

    def __post_init__(self):
        lo, hi = self.range
        if not lo < hi:
            raise ValueError("sweep range must satisfy low < high")
        if not 0 < self.min_step <= self.initial_step:
            raise ValueError("need 0 < min_step <= initial_step")
        if self.free_variable not in ("g", "b"):
            raise ValueError("free_variable must be 'g' or 'b'")


@dataclass
class BranchPoint:
    free_value: float
    admittances: AdmittanceState
    voltages: np.ndarray          # full complex vector
    realized_power: float         # free component times |V|^2 at the free bus
    min_singular_value: float
    stability: Optional[str] = None

    def vm(self, bus: int) -> float:
        return float(abs(self.voltages[bus - 1]))


@dataclass
class SolutionBranch:
    points: List[BranchPoint]
    terminated_by: str            # range_end | singularity | newton_failure
    seed: str = ""
    free_bus: int = 0
    end_reasons: Tuple[str, str] = ("", "")

    @property
    def free_values(self) -> np.ndarray:
        return np.array([p.free_value for p in self.points])

    @property
    def realized_power(self) -> np.ndarray:
        return np.array([p.realized_power for p in self.points])

    def vm(self, bus: int) -> np.ndarray:
        return np.array([p.vm(bus) for p in self.points])

    def voltage_at(self, value: float) -> Optional[np.ndarray]:
        """Linearly interpolated voltage profile at a free value inside the branch."""
        fv = self.free_values
        if fv.size < 2:
            return None
        order = np.argsort(fv)
        fv = fv[order]
        if not fv[0] <= value <= fv[-1]:
            return None
        i = int(np.clip(np.searchsorted(fv, value), 1, fv.size - 1))
        a, b = self.points[order[i - 1]], self.points[order[i]]
        w = 0.0 if fv[i] == fv[i - 1] else (value - fv[i - 1]) / (fv[i] - fv[i - 1])
        return (1 - w) * a.voltages + w * b.voltages


def split_branch(branch: SolutionBranch, at: float = 0.0) -> List[SolutionBranch]:
    """Cut a branch where its free value crosses ``at``; the point at ``at`` (if any) ends both halves."""
    fv = branch.free_values
    below = [p for p, v in zip(branch.points, fv) if v <= at]
    above = [p for p, v in zip(branch.points, fv) if v >= at]
    if not below or not above:
        return [branch]
    lo_reason, hi_reason = branch.end_reasons
    if fv[0] > fv[-1]:
        lo_reason, hi_reason = hi_reason, lo_reason
    halves = [(below, (lo_reason, "split")), (above, ("split", hi_reason))]
    return [SolutionBranch(pts, reasons[0] if reasons[0] != "split" else reasons[1], branch.seed,
                           branch.free_bus, reasons) for pts, reasons in halves]


@dataclass
class ZeroPowerSeed:
    mask: int
    statuses: Tuple[str, ...]     # per non-slack bus: "open" or "short"
    admittances: AdmittanceState
    voltages: np.ndarray
    duplicate_of: Optional[int] = None

    @property
    def label(self) -> str:
        return "".join("s" if s == "short" else "o" for s in self.statuses)


# ---------------------------------------------------------------------------
# zero-power seeds


def _load_direction(net: Network, cs: ConstraintSet, bus: int) -> complex:
    c = cs.buses[bus]
    if isinstance(c, Free):
        c = c.rest
    if isinstance(c, FixedPower):
        s = complex(c.p, c.q)
    elif isinstance(c, PolynomialPower):
        s = complex(c.load.p0, c.load.q0)
    elif isinstance(c, FixedAdmittance):
        s = complex(c.g, c.b)
    elif isinstance(c, Linked):
        s = complex(c.g, 0.0)
    else:
        s = 0j
    return s / abs(s) if abs(s) > 0 else 1.0 + 0j


def enumerate_zero_power_seeds(net: Network, constraints: Optional[ConstraintSet] = None,
                               short_admittance: float = SHORT_ADMITTANCE) -> List[ZeroPowerSeed]:
    """All 2^(n-1) open/short configurations with their linear-solve voltages.

    A short is a large admittance pointing along the bus's power target, so
    Newton started from it slides onto the branch emanating from that short.
    Configurations whose voltage profile repeats an earlier one are marked.
    """
    cs = constraints or constraints_from_network(net)
    buses = net.non_slack
    dirs = [_load_direction(net, cs, k) for k in buses]
    out: List[ZeroPowerSeed] = []
    for mask in range(2 ** len(buses)):
        status = tuple("short" if mask >> i & 1 else "open" for i in range(len(buses)))
        y = np.array([short_admittance * d if s == "short" else 0j for s, d in zip(status, dirs)])
        V = solve_voltages_linear(net, y).voltages
        dup = None
        for j, prev in enumerate(out):
            if prev.duplicate_of is None and np.max(np.abs(prev.voltages - V)) < DEDUP_TOL:
                dup = j
                break
        out.append(ZeroPowerSeed(mask, status, y, V, dup))
    return out


# ---------------------------------------------------------------------------
# branch tracing


def default_free_bus(net: Network, cs: Optional[ConstraintSet] = None) -> int:
    """First dynamic-load bus with a power target, else the first power-constrained bus."""
    cs = cs or constraints_from_network(net)
    power = [k for k in net.non_slack if isinstance(cs.buses[k], (FixedPower, PolynomialPower, Free))]
    if not power:
        raise ValueError("network has no power-constrained bus to sweep")
    dyn = [k for k in power if isinstance(net.loads[k], DynamicAdmittance)]
    return (dyn or power)[0]


class _Tracer:
    """Continuation machinery around one compiled System with a free variable."""

    def __init__(self, net: Network, cs: ConstraintSet, sweep: SweepConfig):
        self.net = net
        self.sweep = sweep
        self.cs = cs.with_free(sweep.free_bus, 0.0, sweep.free_variable)
        self.system = System.build(net, self.cs)
        self.fi = self.system.free_index
        self.idx = [k - 1 for k in net.non_slack]

    # -- primitives -------------------------------------------------------
    def at(self, lam: float) -> System:
        self.system.set_free(lam)
        return self.system

    def newton(self, x0, lam, tol=None, max_iter=None):
        sysm = self.at(lam)
        kw = {}
        if tol is not None:
            kw["tol"] = tol
        if max_iter is not None:
            kw["max_iter"] = max_iter
        x, V, status, it, rn = sysm.solve(x0, **kw)
        if status != kernels.CONVERGED or V is None or not np.all(np.isfinite(V)):
            return None
        return x, V

    def jac(self, x, lam):
        _, _, J = self.at(lam).evaluate(x)
        return J

    def tangent(self, x, lam):
        """dx/dlam along the branch; None at a singular Jacobian."""
        sysm = self.at(lam)
        try:
            _, _, J = sysm.evaluate(x)
            return np.linalg.solve(J, -sysm.free_jacobian_column(x))
        except np.linalg.LinAlgError:
            return None

    def point(self, x, lam, V) -> BranchPoint:
        sysm = self.at(lam)
        y = sysm.admittances(x)
        full = np.empty(self.net.n_buses, dtype=complex)
        full[self.net.slack_bus - 1] = self.net.slack_voltage
        full[self.idx] = V
        j = sysm.pos[self.sweep.free_bus]
        comp = y[j].real if self.sweep.free_variable == "g" else y[j].imag
        w = abs(full[self.sweep.free_bus - 1]) ** 2
        try:
            sv = scaled_min_singular_value(self.jac(x, lam))
        except np.linalg.LinAlgError:
            sv = 0.0
        return BranchPoint(float(lam), y, full, float(comp * w), sv)

    # -- fold location ------------------------------------------------------
    def locate_fold(self, x, lam, iters: int = 30):
        """Moore-Spence Newton for (x, lam, v): F = 0, J v = 0, c.v = 1.

        Second derivatives come from central differences of the Jacobian
        along v and along lam (two evaluations each)."""
        nx = x.size
        if nx == 0:
            return None
        J = self.jac(x, lam)
        v = np.linalg.svd(J)[2][-1]
        c = v / (v @ v)
        h = 1e-7
        for _ in range(iters):
            sysm = self.at(lam)
            try:
                _, r, J = sysm.evaluate(x)
                Fl = sysm.free_jacobian_column(x)
                Jv = J @ v
                Hv = (self.jac(x + h * v, lam) - self.jac(x - h * v, lam)) / (2 * h)
                Hl = (self.jac(x, lam + h) - self.jac(x, lam - h)) @ v / (2 * h)
            except np.linalg.LinAlgError:
                return None
            G = np.concatenate((r, Jv, [c @ v - 1.0]))
            if np.max(np.abs(G)) < 1e-11:
                break
            A = np.zeros((2 * nx + 1, 2 * nx + 1))
            A[:nx, :nx] = J
            A[:nx, nx] = Fl
            A[nx:2 * nx, :nx] = Hv
            A[nx:2 * nx, nx] = Hl
            A[nx:2 * nx, nx + 1:] = J
            A[2 * nx, nx + 1:] = c
            try:
                d = np.linalg.solve(A, -G)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(d)):
                return None
            x, lam, v = x + d[:nx], lam + d[nx], v + d[nx + 1:]
        out = self.newton(x, lam)
        if out is None:
            return None
        return out[0], lam, out[1]

    # -- one direction -------------------------------------------------------
    def run(self, x, lam, V, direction: int):
        sw = self.sweep
        lo, hi = sw.range
        end = hi if direction > 0 else lo
        pts = []
        h = sw.initial_step
        while len(pts) < sw.max_points:
            if abs(end - lam) <= 1e-12:
                return pts, "range_end"
            step = min(h, abs(end - lam))
            lam_n = lam + direction * step
            dx = self.tangent(x, lam)
            pred = x + dx * (lam_n - lam) if dx is not None and np.all(np.isfinite(dx)) else x
            out = self.newton(pred, lam_n)
            if out is None and dx is not None:
                out = self.newton(x, lam_n)
            if out is not None and np.max(np.abs(out[1] - V)) <= MAX_VOLTAGE_JUMP:
                x, V = out
                lam = lam_n
                p = self.point(x, lam, V)
                pts.append(p)
                if p.min_singular_value < sw.singularity_threshold:
                    return pts, "singularity"
                h = min(1.5 * h, max(sw.initial_step, sw.relative_step * abs(lam)))
                continue
            h *= 0.5
            if h < sw.min_step:
                fold = self.locate_fold(x, lam)
                if fold is not None:
                    xf, lf, Vf = fold
                    ahead = (lf - lam) * direction
                    if -sw.min_step <= ahead <= 10 * sw.min_step and lo <= lf <= hi \
                            and np.max(np.abs(Vf - V)) <= MAX_VOLTAGE_JUMP:
                        p = self.point(xf, lf, Vf)
                        if p.min_singular_value < sw.singularity_threshold:
                            if ahead <= 0 and pts:
                                pts[-1] = p
                            else:
                                pts.append(p)
                            return pts, "singularity"
                return pts, "newton_failure"
        return pts, "range_end"


def trace_branch(net: Network, base_constraints: Optional[ConstraintSet], sweep: SweepConfig,
                 start: AdmittanceState, seed: str = "") -> SolutionBranch:
    """Follow the branch through ``start`` in both sweep directions.

    The free value of ``start`` at the free bus fixes where tracing begins.
    Points are ordered by free value; if exactly one end is singular, the
    order is chosen so that the singular end comes last.
    """
    cs = base_constraints or constraints_from_network(net)
    tr = _Tracer(net, cs, sweep)
    start = np.asarray(start, dtype=complex)
    j = net.non_slack.index(sweep.free_bus)
    lam0 = float(start[j].real if sweep.free_variable == "g" else start[j].imag)
    lo, hi = sweep.range
    if not lo <= lam0 <= hi:
        return SolutionBranch([], "newton_failure", seed, sweep.free_bus, ("newton_failure",) * 2)
    sysm = tr.at(lam0)
    out = tr.newton(sysm.unknowns_from(start), lam0)
    if out is None:
        return SolutionBranch([], "newton_failure", seed, sweep.free_bus, ("newton_failure",) * 2)
    x0, V0 = out
    p0 = tr.point(x0, lam0, V0)
    if p0.min_singular_value < sweep.singularity_threshold:
        return SolutionBranch([p0], "singularity", seed, sweep.free_bus, ("singularity",) * 2)
    up, why_up = tr.run(x0, lam0, V0, +1)
    down, why_down = tr.run(x0, lam0, V0, -1)
    pts = down[::-1] + [p0] + up
    reasons = (why_down, why_up)
    if why_down == "singularity" and why_up != "singularity":
        pts = pts[::-1]
    if "singularity" in reasons:
        overall = "singularity"
    elif "newton_failure" in reasons:
        overall = "newton_failure"
    else:
        overall = "range_end"
    return SolutionBranch(pts, overall, seed, sweep.free_bus, reasons)


# ---------------------------------------------------------------------------
# complete solution set


@dataclass
class SolutionSet:
    solutions: List[Tuple[AdmittanceState, VoltageSolution]]
    branches: List[SolutionBranch] = field(default_factory=list)
    free_bus: int = 0
    seeds: int = 0

    def __iter__(self):
        return iter(self.solutions)

    def __len__(self):
        return len(self.solutions)

    def __getitem__(self, i):
        return self.solutions[i]


def dedup_solutions(sols: Sequence[Tuple[AdmittanceState, VoltageSolution]], tol: float = DEDUP_TOL):
    out: List[Tuple[AdmittanceState, VoltageSolution]] = []
    for y, s in sols:
        if all(np.max(np.abs(s.voltages - t.voltages)) >= tol for _, t in out):
            out.append((y, s))
    return out


def _power_mismatch(cs: ConstraintSet, bus: int, pt: BranchPoint, variable: str) -> float:
    t = cs.target_power(bus, pt.vm(bus))
    return pt.realized_power - (t.real if variable == "g" else t.imag)


def _on_known_branch(branches: Sequence[SolutionBranch], lam: float, V: np.ndarray, tol: float = 1e-3) -> bool:
    for br in branches:
        Vi = br.voltage_at(lam)
        if Vi is not None and np.max(np.abs(Vi - V)) < tol:
            return True
    return False


def find_all_solutions(net: Network, target_constraints: Optional[ConstraintSet] = None,
                       free_bus: Optional[int] = None, sweep: Optional[SweepConfig] = None,
                       restarts: int = RESTARTS, rng: Optional[np.random.Generator] = None,
                       max_seeds: Optional[int] = None) -> SolutionSet:
    """Every solution reachable from the zero-power seeds and random restarts.

    Each start is Newton-polished both at the full target and on the sweep
    system; the sweep branches are then scanned for crossings of the free
    bus's power target, and all candidates are polished and deduplicated.
    """
    cs = target_constraints or constraints_from_network(net)
    if cs.free_bus is not None:
        raise ValueError("target constraints must not contain a free designation")
    rng = rng if rng is not None else np.random.default_rng(0)
    m = len(net.non_slack)
    if not any(isinstance(c, (FixedPower, PolynomialPower)) for c in cs.buses.values()):
        y = np.array([complex(c.g, c.b) if isinstance(c, FixedAdmittance) else 0j
                      for c in (cs.buses[k] for k in net.non_slack)])
        ys, sol = solve_constrained(net, cs, y)
        return SolutionSet([(ys, sol)] if sol.converged else [], [], 0, 0)
    fb = free_bus if free_bus is not None else default_free_bus(net, cs)
    sweep = sweep or SweepConfig(fb)
    var = sweep.free_variable
    target_sys = System.build(net, cs)
    tracer = _Tracer(net, cs, sweep)
    fj = net.non_slack.index(fb)
    lo, hi = sweep.range

    seeds = enumerate_zero_power_seeds(net, cs)
    if max_seeds is not None:
        seeds = seeds[:max_seeds]
    guesses: List[Tuple[str, np.ndarray]] = [(f"seed {s.label}", s.admittances) for s in seeds
                                             if s.duplicate_of is None]
    for i in range(restarts):
        y = rng.uniform(-RESTART_BOX, RESTART_BOX, m) + 1j * rng.uniform(-RESTART_BOX, RESTART_BOX, m)
        guesses.append((f"restart {i}", y))

    candidates: List[Tuple[AdmittanceState, VoltageSolution]] = []
    starts: List[Tuple[str, np.ndarray, float]] = []
    for label, y in guesses:
        ys, sol = solve_constrained(net, cs, y, system=target_sys)
        if sol.converged:
            candidates.append((ys, sol))
        comp = y[fj].real if var == "g" else y[fj].imag
        lam = float(np.clip(comp, lo, hi))
        out = tracer.newton(tracer.at(lam).unknowns_from(y), lam)
        if out is not None:
            starts.append((label, tracer.at(lam).admittances(out[0]), lam))
        if sol.converged:
            comp = ys[fj].real if var == "g" else ys[fj].imag
            if lo <= comp <= hi:
                starts.append((label + " (target)", ys, float(comp)))

    branches: List[SolutionBranch] = []
    for label, y, lam in starts:
        V = solve_voltages_linear(net, y).voltages
        if _on_known_branch(branches, lam, V):
            continue
        br = trace_branch(net, cs, sweep, y, seed=label)
        # a lone singular point is a degenerate start, not a branch
        if len(br.points) > 1:
            branches.append(br)

    for br in branches:
        pts = br.points
        d = [_power_mismatch(cs, fb, p, var) for p in pts]
        for a in range(len(pts)):
            hit = None
            if d[a] == 0.0:
                hit = pts[a].admittances
            elif a + 1 < len(pts) and d[a] * d[a + 1] < 0:
                w = d[a] / (d[a] - d[a + 1])
                hit = (1 - w) * pts[a].admittances + w * pts[a + 1].admittances
            if hit is None:
                continue
            ys, sol = solve_constrained(net, cs, hit, system=target_sys)
            if sol.converged:
                candidates.append((ys, sol))

    sols = dedup_solutions(candidates)
    sols.sort(key=lambda s: -abs(s[1].voltages[fb - 1]))
    return SolutionSet(sols, branches, fb, len(seeds))


# ---------------------------------------------------------------------------
# two-bus oracle


def two_bus_closed_form(r: float, x: float, P: float, Q: float, V1: float = 1.0) -> List[float]:
    """|V2| for a slack bus feeding one load ``P + jQ`` (consumption) through ``r + jx``.

    Roots of ``u^2 + (2(rP + xQ) - V1^2) u + (r^2 + x^2)(P^2 + Q^2) = 0`` with
    ``u = |V2|^2``; non-negative roots only, largest first.
    """
    if V1 <= 0:
        raise ValueError("V1 must be positive")
    bcoef = 2.0 * (r * P + x * Q) - V1 * V1
    ccoef = (r * r + x * x) * (P * P + Q * Q)
    disc = bcoef * bcoef - 4.0 * ccoef
    if disc < 0:
        return []
    sq = math.sqrt(disc)
    roots = sorted({(-bcoef + sq) / 2.0, (-bcoef - sq) / 2.0}, reverse=True)
    return [math.sqrt(u) for u in roots if u >= 0.0]


def two_bus_network(r: float, x: float, P: float, Q: float, V1: float = 1.0) -> Network:
    from .netmodel import Branch, ConstantPower

    return Network(2, [Branch(1, 2, complex(r, x))], {2: ConstantPower(P, Q)},
                   slack_voltage=complex(V1), name="two_bus")
