"""Differential-algebraic simulation of dynamic loads and tap changers.

Dynamic states are the admittances of :class:`DynamicAdmittance` /
:class:`ImpedanceSetpoint` buses plus one ratio per tap changer.  Static loads
(ZIP, constant power, slaved) are algebraic and re-solved by Newton at every
right-hand-side evaluation, warm-started from the previous solution.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from . import kernels
from .algebraic import (
    AdmittanceState,
    FixedAdmittance,
    System,
    constraints_from_network,
)
from .events import (
    Event,
    LoadShed,
    Pulse,
    SetControllerMode,
    SetpointStep,
    ShortCircuitFault,
)
from .netmodel import (
    DynamicAdmittance,
    ImpedanceSetpoint,
    Network,
    branch_stamp,
    build_admittance_matrix,
    load_shunt,
)

log = logging.getLogger(__name__)

RTOL = 1e-6
ATOL = 1e-8
COLLAPSE_VOLTAGE = 0.01
COLLAPSE_WINDOW = 0.1
DIVERGENCE_LIMIT = 1e6
SWITCH_TOL = 1e-9


class AlgebraicFailure(RuntimeError):
    pass


@dataclass
class Config:
    """Piecewise-constant inputs between two timeline breakpoints."""

    p_set: Dict[int, float]
    q_set: Dict[int, float]
    mode: Dict[int, Optional[Tuple[float, float, float, float]]]  # (tau_g, tau_b, g_set, b_set)
    shunts: Dict[int, complex] = field(default_factory=dict)

    def copy(self) -> "Config":
        return Config(dict(self.p_set), dict(self.q_set), dict(self.mode), dict(self.shunts))


@dataclass
class SimState:
    t: float
    dyn: np.ndarray          # [g_1, b_1, g_2, b_2, ...] over Model.dyn_buses
    taps: np.ndarray         # ratios over Model.tap_branches
    x_alg: Optional[np.ndarray] = None
    voltages: Optional[np.ndarray] = None
    consistent: bool = False


class Model:
    """Compiled dynamic model of one network."""

    def __init__(self, net: Network):
        self.net = net
        self.dyn_buses = [k for k in net.non_slack
                          if isinstance(net.loads[k], (DynamicAdmittance, ImpedanceSetpoint))]
        self.tap_branches = net.tap_branches
        self.devices = [net.branches[i].tap for i in self.tap_branches]
        cs = constraints_from_network(net)
        for k in self.dyn_buses:
            cs.buses[k] = FixedAdmittance(0.0, 0.0)
        self.constraints = cs
        # base matrix without the tapped branches; their stamps are added per ratio
        self._Y_static = np.zeros((net.n_buses, net.n_buses), dtype=complex)
        for i, br in enumerate(net.branches):
            if br.tap is None:
                f, t = br.from_bus - 1, br.to_bus - 1
                blk = branch_stamp(br.impedance)
                self._Y_static[np.ix_([f, t], [f, t])] += blk
        self.idx = [k - 1 for k in net.non_slack]
        self.s = net.slack_bus - 1
        self.system = System.build(net, cs, *self._reduced([d.k for d in self.devices], {}))
        self._net_key = (tuple(float(d.k) for d in self.devices), ())
        self._committed = np.zeros(len(self.system.unknowns))
        self._last: Optional[np.ndarray] = None

    # -- network matrices --------------------------------------------------
    def full_matrix(self, taps: Sequence[float], shunts: Dict[int, complex]) -> np.ndarray:
        Y = self._Y_static.copy()
        for i, k in zip(self.tap_branches, taps):
            br = self.net.branches[i]
            f, t = br.from_bus - 1, br.to_bus - 1
            Y[np.ix_([f, t], [f, t])] += branch_stamp(br.impedance, float(k))
        for bus, ys in shunts.items():
            Y[bus - 1, bus - 1] += ys
        return Y

    def _reduced(self, taps, shunts):
        Y = self.full_matrix(taps, shunts)
        Yr = np.ascontiguousarray(Y[np.ix_(self.idx, self.idx)])
        rhs = np.ascontiguousarray(-Y[self.idx, self.s] * self.net.slack_voltage)
        return Yr, rhs

    # -- algebraic subsystem -----------------------------------------------
    def _set_network(self, taps, shunts) -> None:
        key = (tuple(np.round(np.asarray(taps, dtype=float), 15)), tuple(sorted(shunts.items())))
        if key != self._net_key:
            self.system.Yr, self.system.rhs = self._reduced(taps, shunts)
            self._net_key = key

    def _try(self, x0):
        x, V, status, _, _ = self.system.solve(x0)
        if status == kernels.CONVERGED and V is not None and np.all(np.isfinite(V)):
            return x, V
        return None

    def reset(self, x: Optional[np.ndarray] = None) -> None:
        """Forget warm-start history; start from ``x`` or the open-circuit guess."""
        self._committed = np.zeros(len(self.system.unknowns)) if x is None else np.array(x, dtype=float)
        self._last = None

    def commit(self, x: np.ndarray) -> None:
        """Mark ``x`` as the algebraic solution at the last accepted step."""
        self._committed = np.array(x, dtype=float)

    def solve_algebraic(self, dyn: np.ndarray, taps: np.ndarray, shunts: Dict[int, complex],
                        x0: Optional[np.ndarray] = None):
        """Return (x_alg, full voltage vector, admittances) or raise AlgebraicFailure.

        Newton is warm-started from the last accepted step.  If the branch it
        was following has vanished (a fold of the static-load subsystem), the
        static loads relax along their own fast dynamics to whichever branch
        survives.
        """
        sysm = self.system
        self._set_network(taps, shunts)
        for j, k in enumerate(self.dyn_buses):
            i = sysm.pos[k]
            sysm.y0[i] = dyn[2 * j]
            sysm.y0[sysm.m + i] = dyn[2 * j + 1]
        sysm._relink()
        if x0 is not None:
            starts = [x0]
        else:
            starts = [self._committed]
            if self._last is not None and not np.array_equal(self._last, self._committed):
                starts.append(self._last)
        out = None
        for st in starts:
            out = self._try(st)
            if out is not None:
                break
        if out is None and len(sysm.unknowns):
            out = self._relax(starts[0])
        if out is None:
            raise AlgebraicFailure("algebraic subsystem did not converge")
        x, V = out
        self._last = x
        full = np.empty(self.net.n_buses, dtype=complex)
        full[self.s] = self.net.slack_voltage
        full[self.idx] = V
        return x, full, sysm.admittances(x)

    def _relax(self, x_start: np.ndarray, horizon: float = 200.0):
        """Integrate the static-load admittances with unit time constants until they settle."""
        sysm = self.system

        def f(t, x):
            try:
                _, r, _ = sysm.evaluate(x, jac=False)
            except np.linalg.LinAlgError:
                return np.full(x.size, np.nan)
            return -r

        def jac(t, x):
            try:
                _, _, J = sysm.evaluate(x, jac=True)
            except np.linalg.LinAlgError:
                return np.zeros((x.size, x.size))
            return -J

        def settled(t, x):
            r = f(t, x)
            return float(np.max(np.abs(r))) - 1e-6 if np.all(np.isfinite(r)) else 1.0
        settled.terminal = True

        try:
            sol = solve_ivp(f, (0.0, horizon), np.asarray(x_start, dtype=float), method="Radau",
                            jac=jac, events=settled, rtol=1e-6, atol=1e-9)
        except ValueError:
            return None
        if sol.status < 0 or not sol.y.size or np.max(np.abs(sol.y[:, -1])) > DIVERGENCE_LIMIT:
            return None
        return self._try(sol.y[:, -1])

    # -- dynamics ---------------------------------------------------------
    def derivatives(self, dyn: np.ndarray, taps: np.ndarray, voltages: np.ndarray, cfg: Config,
                    tap_mode: Optional[Sequence[float]] = None) -> np.ndarray:
        out = np.empty(dyn.size + len(taps))
        for j, k in enumerate(self.dyn_buses):
            g, b = dyn[2 * j], dyn[2 * j + 1]
            mode = cfg.mode.get(k)
            if mode is None:
                ld = self.net.loads[k]
                tau1, tau2 = (ld.tau1, ld.tau2) if isinstance(ld, DynamicAdmittance) else (ld.tau_g, ld.tau_b)
                w = abs(voltages[k - 1]) ** 2
                out[2 * j] = -(g * w - cfg.p_set[k]) / tau1
                out[2 * j + 1] = -(b * w - cfg.q_set[k]) / tau2
            else:
                tau_g, tau_b, g_set, b_set = mode
                out[2 * j] = -(g - g_set) / tau_g
                out[2 * j + 1] = -(b - b_set) / tau_b
        n = dyn.size
        for j, dev in enumerate(self.devices):
            if tap_mode is not None:
                out[n + j] = tap_mode[j]
            else:
                out[n + j] = dev.tap_rate(abs(voltages[dev.controlled_bus - 1]), taps[j], SWITCH_TOL)
        return out

    def base_config(self) -> Config:
        p, q, mode = {}, {}, {}
        for k in self.dyn_buses:
            ld = self.net.loads[k]
            if isinstance(ld, DynamicAdmittance):
                p[k], q[k] = ld.p_set, ld.q_set
                mode[k] = None
            else:
                p[k], q[k] = 0.0, 0.0
                mode[k] = (ld.tau_g, ld.tau_b, ld.g_set, ld.b_set)
        return Config(p, q, mode, {})

    def initial_state(self, admittances: Optional[AdmittanceState] = None,
                      taps: Optional[Sequence[float]] = None, t: float = 0.0) -> SimState:
        dyn = np.zeros(2 * len(self.dyn_buses))
        if admittances is not None:
            y = np.asarray(admittances, dtype=complex)
            for j, k in enumerate(self.dyn_buses):
                v = y[self.net.non_slack.index(k)]
                dyn[2 * j], dyn[2 * j + 1] = v.real, v.imag
        tp = np.array([d.k for d in self.devices] if taps is None else list(taps), dtype=float)
        return SimState(t, dyn, tp)

    def pack(self, st: SimState) -> np.ndarray:
        return np.concatenate((st.dyn, st.taps))

    def unpack(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n = 2 * len(self.dyn_buses)
        return z[:n], z[n:]


def state_derivatives(net: Network, state: SimState, model: Optional[Model] = None,
                      config: Optional[Config] = None) -> np.ndarray:
    """Time derivative of the dynamic state; the algebraic cache must be consistent."""
    model = model or Model(net)
    if not state.consistent or state.voltages is None:
        raise ValueError("state has no consistent algebraic solution; call consistent_state first")
    cfg = config or model.base_config()
    return model.derivatives(state.dyn, state.taps, state.voltages, cfg)


def consistent_state(model: Model, state: SimState, shunts: Optional[Dict[int, complex]] = None) -> SimState:
    x, V, _ = model.solve_algebraic(state.dyn, state.taps, shunts or {}, state.x_alg)
    return SimState(state.t, state.dyn.copy(), state.taps.copy(), x, V, True)


# ---------------------------------------------------------------------------
# trajectory


@dataclass
class Trajectory:
    net_name: str
    buses: List[int]
    dyn_buses: List[int]
    t: np.ndarray
    vm: np.ndarray         # (T, n) all buses
    g: np.ndarray          # (T, n-1) load conductance per non-slack bus
    b: np.ndarray
    p: np.ndarray          # (T, n-1) consumed active power per non-slack bus (loads + shunts)
    q: np.ndarray
    taps: np.ndarray       # (T, n_taps)
    slack_power: np.ndarray
    losses: np.ndarray
    states: np.ndarray     # (T, n_states) raw integrator states
    termination: str = "completed"
    message: str = ""
    collapse_time: Optional[float] = None

    def column(self, kind: str, bus: int) -> np.ndarray:
        if kind == "V":
            return self.vm[:, bus - 1]
        j = self.buses.index(bus)
        return getattr(self, kind.lower())[:, j]

    def at(self, t: float) -> int:
        return int(np.argmin(np.abs(self.t - t)))

    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def header(self) -> List[str]:
        cols = ["t"] + [f"V{k}" for k in range(1, self.vm.shape[1] + 1)]
        for kind in ("g", "b", "P", "Q"):
            cols += [f"{kind}{k}" for k in self.buses]
        cols += [f"K{j + 1}" for j in range(self.taps.shape[1])]
        return cols

    def rows(self):
        for i in range(self.t.size):
            yield np.concatenate(([self.t[i]], self.vm[i], self.g[i], self.b[i], self.p[i], self.q[i], self.taps[i]))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for row in self.rows():
            w.writerow([f"{v:.9g}" for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


class _Recorder:
    def __init__(self, model: Model):
        self.model = model
        self.rows: Dict[str, list] = {k: [] for k in ("t", "vm", "g", "b", "p", "q", "taps", "slack", "loss", "z")}

    def record(self, t: float, z: np.ndarray, V: np.ndarray, y: AdmittanceState, Y: np.ndarray) -> None:
        m = self.model
        I = Y @ V
        cons = -V[m.idx] * np.conj(I[m.idx])
        slack = V[m.s] * np.conj(I[m.s])
        R = self.rows
        if R["t"] and t <= R["t"][-1]:
            for key in R:
                R[key].pop()
        R["t"].append(t)
        R["vm"].append(np.abs(V))
        R["g"].append(y.real.copy())
        R["b"].append(y.imag.copy())
        R["p"].append(cons.real)
        R["q"].append(cons.imag)
        _, taps = m.unpack(z)
        R["taps"].append(taps.copy())
        R["slack"].append(slack)
        R["loss"].append(branch_losses(m.net, V, taps, m.tap_branches))
        R["z"].append(z.copy())

    def trajectory(self, termination: str, message: str = "", collapse_time: Optional[float] = None) -> Trajectory:
        R = self.rows
        m = self.model
        ntap = len(m.tap_branches)
        T = len(R["t"])

        def arr(key, width):
            return np.array(R[key]).reshape(T, width) if T else np.zeros((0, width))

        nb = len(m.net.non_slack)
        return Trajectory(
            m.net.name, list(m.net.non_slack), list(m.dyn_buses), np.array(R["t"]),
            arr("vm", m.net.n_buses), arr("g", nb), arr("b", nb), arr("p", nb), arr("q", nb),
            arr("taps", ntap), np.array(R["slack"]), np.array(R["loss"]),
            arr("z", 2 * len(m.dyn_buses) + ntap), termination, message, collapse_time,
        )


def branch_losses(net: Network, V: np.ndarray, taps: Sequence[float], tap_branches: Sequence[int]) -> complex:
    """Series-impedance losses; ideal ratios are lossless."""
    ratio = dict(zip(tap_branches, taps))
    total = 0.0 + 0.0j
    for i, br in enumerate(net.branches):
        k = ratio.get(i, 1.0)
        I = (V[br.from_bus - 1] / k - V[br.to_bus - 1]) / br.impedance
        total += br.impedance * abs(I) ** 2
    return total


# ---------------------------------------------------------------------------
# timeline compilation


def _breakpoints(events: Sequence[Event]) -> List[Tuple[float, int, object]]:
    """Sorted (time, order, action) triples; ends sort before starts at equal time."""
    acts: List[Tuple[float, int, object]] = []
    for n, ev in enumerate(sorted(events, key=lambda e: e.t)):
        dur = getattr(ev, "duration", None)
        if dur is not None and dur <= 0:
            continue  # zero-length pulses leave the system untouched
        acts.append((ev.t, 1, ("start", n, ev)))
        if dur is not None:
            acts.append((ev.t + dur, 0, ("end", n, ev)))
    acts.sort(key=lambda a: (a[0], a[1]))
    return acts


def _apply(cfg: Config, action, saved: Dict[int, object]) -> None:
    what, n, ev = action
    if isinstance(ev, SetpointStep):
        if ev.p is not None:
            cfg.p_set[ev.bus] = ev.p
        if ev.q is not None:
            cfg.q_set[ev.bus] = ev.q
    elif isinstance(ev, LoadShed):
        cfg.p_set[ev.bus] -= ev.dp
        cfg.q_set[ev.bus] -= ev.dq
    elif isinstance(ev, Pulse):
        if what == "start":
            saved[n] = (cfg.p_set.get(ev.bus), cfg.q_set.get(ev.bus))
            if ev.p is not None:
                cfg.p_set[ev.bus] = ev.p
            if ev.q is not None:
                cfg.q_set[ev.bus] = ev.q
            if ev.delta_y is not None:
                cfg.shunts[ev.bus] = cfg.shunts.get(ev.bus, 0j) + load_shunt(ev.delta_y.real, ev.delta_y.imag)
        else:
            p, q = saved.pop(n)
            if ev.p is not None:
                cfg.p_set[ev.bus] = p
            if ev.q is not None:
                cfg.q_set[ev.bus] = q
            if ev.delta_y is not None:
                cfg.shunts[ev.bus] -= load_shunt(ev.delta_y.real, ev.delta_y.imag)
                if abs(cfg.shunts[ev.bus]) < 1e-15:
                    del cfg.shunts[ev.bus]
    elif isinstance(ev, ShortCircuitFault):
        if what == "start":
            cfg.shunts[ev.bus] = cfg.shunts.get(ev.bus, 0j) + ev.y_fault
        else:
            cfg.shunts[ev.bus] -= ev.y_fault
            if abs(cfg.shunts[ev.bus]) < 1e-15:
                del cfg.shunts[ev.bus]
    elif isinstance(ev, SetControllerMode):
        if what == "start":
            saved[n] = cfg.mode.get(ev.bus)
            cfg.mode[ev.bus] = (ev.tau_g, ev.tau_b, ev.g_set, ev.b_set)
        else:
            cfg.mode[ev.bus] = saved.pop(n)
    else:
        raise TypeError(f"unknown event {ev!r}")


# ---------------------------------------------------------------------------
# integration


def simulate(net: Network, timeline: Sequence[Event], initial: SimState | AdmittanceState | None,
             t_end: float, output_interval: float = 0.01, rtol: float = RTOL, atol: float = ATOL,
             model: Optional[Model] = None, config: Optional[Config] = None,
             stop_on_collapse: bool = True) -> Trajectory:
    """Integrate the load/tap dynamics through ``timeline`` and sample every ``output_interval``.

    Integration restarts at every event breakpoint and at every tap-changer
    switching instant, so discontinuities are never stepped over.  With
    ``stop_on_collapse=False`` a detected collapse is recorded in
    ``collapse_time`` and integration carries on to ``t_end``.
    """
    model = model or Model(net)
    if initial is None or not isinstance(initial, SimState):
        initial = model.initial_state(initial)
    cfg = (config or model.base_config()).copy()
    t0 = initial.t
    z = model.pack(initial)
    model.reset(initial.x_alg)
    breaks = [a for a in _breakpoints(timeline) if t0 <= a[0] <= t_end]
    saved: Dict[int, object] = {}
    rec = _Recorder(model)
    grid = t0 + output_interval * np.arange(int(np.floor((t_end - t0) / output_interval + 1e-9)) + 1)

    def snapshot(t, zz):
        dyn, taps = model.unpack(zz)
        x, V, y = model.solve_algebraic(dyn, taps, cfg.shunts)
        model.commit(x)
        # branch-only matrix: consumption then includes any active shunt
        rec.record(t, zz, V, y, model.full_matrix(taps, {}))
        return V

    low_since: List[Optional[float]] = [None]
    collapsed_at: List[Optional[float]] = [None]

    def collapse_check(t, V, zz) -> bool:
        hit = False
        if np.max(np.abs(zz)) > DIVERGENCE_LIMIT:
            hit = True
        elif np.min(np.abs(V)) < COLLAPSE_VOLTAGE:
            if low_since[0] is None:
                low_since[0] = t
            hit = t - low_since[0] >= COLLAPSE_WINDOW - 1e-12
        else:
            low_since[0] = None
        if hit and collapsed_at[0] is None:
            collapsed_at[0] = t
        return hit and stop_on_collapse

    # apply events scheduled exactly at t0
    while breaks and breaks[0][0] <= t0:
        _apply(cfg, breaks.pop(0)[2], saved)

    try:
        V = snapshot(t0, z)
    except AlgebraicFailure as exc:
        return rec.trajectory("integrator_failure", f"initial algebraic solve failed: {exc}")

    t = t0
    status = "completed"
    message = ""
    while t < t_end - 1e-12:
        t_next = min(breaks[0][0], t_end) if breaks else t_end
        if t_next > t + 1e-12:
            ok, t, z, status, message = _integrate_segment(model, cfg, t, t_next, z, grid, rtol, atol,
                                                           snapshot, collapse_check)
            if not ok:
                break
        else:
            t = t_next
        while breaks and breaks[0][0] <= t + 1e-12:
            _apply(cfg, breaks.pop(0)[2], saved)
    if collapsed_at[0] is not None and status == "completed":
        status, message = "collapse_detected", f"collapse at t={collapsed_at[0]:.4f}"
    return rec.trajectory(status, message, collapsed_at[0])


def _tap_modes(model: Model, taps: np.ndarray, V: np.ndarray) -> List[float]:
    return [dev.tap_rate(abs(V[dev.controlled_bus - 1]), taps[j], SWITCH_TOL) for j, dev in enumerate(model.devices)]


def _integrate_segment(model, cfg, t, t_next, z, grid, rtol, atol, snapshot, collapse_check):
    """Integrate one constant-configuration interval; returns (ok, t, z, status, message)."""
    while t < t_next - 1e-12:
        dyn, taps = model.unpack(z)
        try:
            _, V, _ = model.solve_algebraic(dyn, taps, cfg.shunts)
        except AlgebraicFailure as exc:
            return False, t, z, "integrator_failure", str(exc)
        modes = _tap_modes(model, taps, V)
        events = _switching_events(model, cfg, modes) + [_commit_event(model, cfg)]
        failed = [False]

        def rhs(tt, zz):
            d, tp = model.unpack(zz)
            try:
                _, VV, _ = model.solve_algebraic(d, tp, cfg.shunts)
            except AlgebraicFailure:
                failed[0] = True
                return np.full(zz.size, np.nan)
            return model.derivatives(d, tp, VV, cfg, modes)

        t_eval = grid[(grid > t + 1e-12) & (grid < t_next - 1e-12)]
        t_eval = np.concatenate((t_eval, [t_next]))
        method = "Radau" if len(model.dyn_buses) else "RK45"
        try:
            sol = solve_ivp(rhs, (t, t_next), z, method=method, t_eval=t_eval, rtol=rtol, atol=atol,
                                events=events, dense_output=False)
        except ValueError as exc:
            # Radau refuses a Jacobian with NaNs: the algebraic subsystem has no solution nearby
            status = "collapse_detected" if _looks_collapsed(model, z, cfg) else "integrator_failure"
            return False, t, z, status, f"step rejected at t={t:.6g}: {exc}"
        # with t_eval and an early terminal event, scipy may hand back an empty list
        sol.y = np.asarray(sol.y, dtype=float).reshape(z.size, len(sol.t))
        for tt, zz in zip(sol.t, sol.y.T):
            try:
                Vs = snapshot(tt, zz)
            except AlgebraicFailure as exc:
                return False, tt, zz, "integrator_failure", str(exc)
            if collapse_check(tt, Vs, zz):
                return False, tt, zz, "collapse_detected", f"collapse at t={tt:.4f}"
        if sol.status == -1:
            if sol.t.size:
                t, z = sol.t[-1], sol.y[:, -1]
            msg = sol.message + (" (algebraic failure)" if failed[0] else "")
            status = "integrator_failure"
            if sol.t.size and _looks_collapsed(model, z, cfg):
                status = "collapse_detected"
            return False, t, z, status, msg
        if sol.status == 1:
            te = min((ev[0] for ev in sol.t_events[:-1] if len(ev)), default=None)
            ze = None
            for ev, ye in zip(sol.t_events[:-1], sol.y_events[:-1]):
                if len(ev) and ev[0] == te:
                    ze = ye[0]
            z = _clamp_taps(model, ze)
            t = te
            # a grid instant within rounding of the switch would otherwise fall between segments
            for tg in grid[np.abs(grid - te) <= 1e-12]:
                try:
                    snapshot(tg, z)
                except AlgebraicFailure as exc:
                    return False, te, z, "integrator_failure", str(exc)
            continue
        t, z = t_next, sol.y[:, -1] if sol.y.size else z
    return True, t, z, "completed", ""


def _looks_collapsed(model, z, cfg) -> bool:
    dyn, taps = model.unpack(z)
    if np.max(np.abs(z)) > DIVERGENCE_LIMIT / 10:
        return True
    try:
        _, V, _ = model.solve_algebraic(dyn, taps, cfg.shunts)
    except AlgebraicFailure:
        return True
    return bool(np.min(np.abs(V)) < 10 * COLLAPSE_VOLTAGE)


def _clamp_taps(model, z):
    z = np.array(z, dtype=float)
    n = 2 * len(model.dyn_buses)
    for j, dev in enumerate(model.devices):
        z[n + j] = min(max(z[n + j], dev.k_min), dev.k_max)
    return z


def _commit_event(model: Model, cfg: Config):
    """Never fires; solve_ivp calls it once per accepted step, which is where
    the algebraic warm start is advanced."""
    def f(t, z):
        d, tp = model.unpack(z)
        try:
            x, _, _ = model.solve_algebraic(d, tp, cfg.shunts)
        except AlgebraicFailure:
            return 1.0
        model.commit(x)
        return 1.0
    return f


def _switching_events(model: Model, cfg: Config, modes: Sequence[float]):
    """Terminal events for tap deadband crossings and ratio limits."""
    evs = []
    n = 2 * len(model.dyn_buses)
    for j, dev in enumerate(model.devices):
        bus = dev.controlled_bus

        def vfun(offset, jj=j, bb=bus):
            def f(t, z):
                d, tp = model.unpack(z)
                try:
                    _, V, _ = model.solve_algebraic(d, tp, cfg.shunts)
                except AlgebraicFailure:
                    return 0.0
                return abs(V[bb - 1]) - offset
            return f

        mode = modes[j]
        if mode == 0:
            up = vfun(dev.v_max + 2 * SWITCH_TOL)
            down = vfun(dev.v_min - 2 * SWITCH_TOL)
            up.direction, down.direction = 1, -1
            new = [up, down]
        elif mode > 0:
            back = vfun(dev.v_max)
            back.direction = -1
            lim = (lambda t, z, jj=j, d=dev: z[n + jj] - d.k_max)
            lim.direction = 1
            new = [back, lim]
        else:
            back = vfun(dev.v_min)
            back.direction = 1
            lim = (lambda t, z, jj=j, d=dev: z[n + jj] - d.k_min)
            lim.direction = -1
            new = [back, lim]
        for f in new:
            f.terminal = True
        evs += new
    return evs
