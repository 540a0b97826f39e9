"""Pulse emergency control: detect entrapment at a low-voltage equilibrium and pulse back out.

Also the load-shedding experiment showing how shedding at a bus with net
generation can push the operating point past the tip of its branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .algebraic import constraints_from_network, solve_constrained
from .dynsim import Model, SimState, Trajectory, simulate
from .events import Event, LoadShed, Pulse, SetControllerMode
from .homotopy import DEDUP_TOL, SweepConfig, trace_branch
from .netmodel import DynamicAdmittance, Network
from .stability import Equilibrium, equilibrium_state, known_equilibria, slowest_time_constant

SETTLE_VELOCITY = 1e-3
MATCH_TOL = DEDUP_TOL


@dataclass
class DetectorConfig:
    v_low: float = 0.8
    normal_band: Tuple[float, float] = (0.9, 1.1)
    hold_time: float = 1.0
    velocity: float = SETTLE_VELOCITY
    monitored: Optional[Sequence[int]] = None   # default: every non-slack bus

    def __post_init__(self):
        if not self.v_low < self.normal_band[0]:
            raise ValueError("v_low must lie below the normal band")


@dataclass
class PulseCommand:
    """``magnitude`` maps bus -> (P, Q) consumption setpoints for ``dg_curtailment``
    (Q may be None to keep it) or bus -> (g_set, b_set, tau_g, tau_b) for
    ``impedance_setpoint``."""

    mode: str
    magnitude: Dict[int, Tuple]
    duration: float
    start: Optional[float] = None

    @property
    def buses(self) -> List[int]:
        return sorted(self.magnitude)

    def problems(self) -> List[str]:
        out = []
        if self.mode not in ("dg_curtailment", "impedance_setpoint"):
            out.append(f"unknown pulse mode {self.mode!r}")
        if self.duration <= 0:
            out.append("pulse duration must be positive")
        if self.mode == "dg_curtailment":
            for bus, (p, *_rest) in self.magnitude.items():
                if p is not None and p < 0:
                    out.append(f"curtailment at bus {bus} leaves the bus generating (P = {p})")
        return out

    def events(self, t: float) -> List[Event]:
        if self.duration <= 0:
            return []
        evs: List[Event] = []
        for bus, mag in sorted(self.magnitude.items()):
            if self.mode == "dg_curtailment":
                p, q = (tuple(mag) + (None,))[:2]
                evs.append(Pulse(t, bus, self.duration, p=p, q=q))
            else:
                g, b, tg, tb = mag
                evs.append(SetControllerMode(t, bus, self.duration, g, b, tg, tb))
        return evs

    def describe(self) -> str:
        parts = [f"bus {k}: {tuple(v)}" for k, v in sorted(self.magnitude.items())]
        return f"{self.mode} for {self.duration:g} s ({'; '.join(parts)})"


@dataclass
class EmergencyReport:
    detection_time: Optional[float]
    pre_event_id: Optional[str]
    entrapped_id: Optional[str]
    command: Optional[PulseCommand]
    outcome: str                       # recovered | still_entrapped | collapsed
    recovery_time: Optional[float] = None
    final_id: Optional[str] = None

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "none"
            if isinstance(v, float):
                return f"{v:.6g}"
            return str(v)

        rows = [
            ("detection_time", self.detection_time),
            ("pre_event_equilibrium", self.pre_event_id),
            ("entrapped_equilibrium", self.entrapped_id),
            ("command", self.command.describe() if self.command else None),
            ("outcome", self.outcome),
            ("recovery_time", self.recovery_time),
            ("final_equilibrium", self.final_id),
        ]
        return "".join(f"{k}: {fmt(v)}\n" for k, v in rows)


def normal_equilibrium(known: Sequence[Equilibrium]) -> Optional[Equilibrium]:
    """Stable equilibrium with the highest minimum bus voltage."""
    stable = [e for e in known if e.stable]
    return max(stable, key=lambda e: float(np.min(e.vm))) if stable else None


def match_equilibrium(net: Network, y_final: np.ndarray, known: Sequence[Equilibrium],
                      tol: float = MATCH_TOL) -> Optional[Equilibrium]:
    """Known equilibrium reached by a settled run, after a Newton polish of its end state."""
    cs = constraints_from_network(net)
    y, sol = solve_constrained(net, cs, y_final)
    if not sol.converged:
        return None
    for e in known:
        if np.max(np.abs(e.voltages - sol.voltages)) < tol:
            return e
    return None


def _velocity(traj: Trajectory) -> np.ndarray:
    if traj.t.size < 2:
        return np.zeros(traj.t.size)
    dz = np.diff(traj.states, axis=0)
    dt = np.diff(traj.t)[:, None]
    v = np.max(np.abs(dz / np.where(dt > 0, dt, np.inf)), axis=1) if dz.shape[1] else np.zeros(dz.shape[0])
    return np.concatenate(([np.inf], v))


def _monitored(traj: Trajectory, cfg: DetectorConfig) -> np.ndarray:
    buses = list(cfg.monitored) if cfg.monitored is not None else traj.buses
    return traj.vm[:, [b - 1 for b in buses]]


def detect_entrapment(traj: Trajectory, cfg: DetectorConfig, known: Sequence[Equilibrium],
                      net: Optional[Network] = None) -> Optional[Tuple[float, str]]:
    """First time the monitored voltages have sat below ``v_low`` with the state at rest
    for ``hold_time``, provided the resting state is a known non-normal equilibrium."""
    vm = _monitored(traj, cfg)
    low = np.all(vm < cfg.v_low, axis=1)
    quiet = _velocity(traj) < cfg.velocity
    ok = low & quiet
    normal = normal_equilibrium(known)
    since = None
    for i, t in enumerate(traj.t):
        if not ok[i]:
            since = None
            continue
        if since is None:
            since = t
        if t - since >= cfg.hold_time - 1e-9:
            eq = _identify(traj, i, known, net)
            if eq is not None and eq is not normal:
                return float(t), eq.label
    return None


def _identify(traj: Trajectory, i: int, known: Sequence[Equilibrium], net: Optional[Network]):
    y = traj.g[i] + 1j * traj.b[i]
    if net is not None:
        return match_equilibrium(net, y, known, tol=1e-3)
    best = min(known, key=lambda e: float(np.max(np.abs(e.vm - traj.vm[i]))), default=None)
    if best is not None and np.max(np.abs(best.vm - traj.vm[i])) < 1e-3:
        return best
    return None


def settle_window(net: Network) -> float:
    return max(2.0, 20.0 * slowest_time_constant(net))


def _as_state(model: Model, entrapped: Union[SimState, Equilibrium], t: float) -> SimState:
    if isinstance(entrapped, Equilibrium):
        return equilibrium_state(model, entrapped, t)
    return entrapped


def execute_pulse_recovery(net: Network, entrapped: Union[SimState, Equilibrium], cmd: PulseCommand,
                           known: Optional[Sequence[Equilibrium]] = None, detection_time: Optional[float] = None,
                           model: Optional[Model] = None, cfg: Optional[DetectorConfig] = None,
                           settle: Optional[float] = None, t0: float = 0.0,
                           pre_event_id: Optional[str] = None) -> Tuple[Trajectory, EmergencyReport]:
    """Apply ``cmd`` from the entrapped state and report the attractor reached."""
    model = model or Model(net)
    known = list(known) if known is not None else known_equilibria(net, model)
    normal = normal_equilibrium(known)
    state = _as_state(model, entrapped, t0)
    t_start = state.t
    start = cmd.start if cmd.start is not None else t_start + 0.5
    settle = settle if settle is not None else settle_window(net)
    t_end = start + max(cmd.duration, 0.0) + settle
    traj = simulate(net, cmd.events(start), state, t_end, output_interval=0.01, model=model)
    entrapped_id = _label_of(net, model, state, known)
    pre = pre_event_id if pre_event_id is not None else (normal.label if normal else None)
    if traj.termination == "collapse_detected":
        return traj, EmergencyReport(detection_time, pre, entrapped_id, cmd, "collapsed")
    if traj.termination != "completed":
        return traj, EmergencyReport(detection_time, pre, entrapped_id, cmd, "collapsed")
    final = _settled_equilibrium(net, traj, known)
    if final is not None and normal is not None and final is normal:
        rt = _recovery_time(traj, normal, start)
        return traj, EmergencyReport(detection_time, pre, entrapped_id, cmd, "recovered", rt, final.label)
    return traj, EmergencyReport(detection_time, pre, entrapped_id, cmd, "still_entrapped", None,
                                 final.label if final is not None else None)


def _label_of(net, model, state: SimState, known) -> Optional[str]:
    y = np.zeros(len(net.non_slack), dtype=complex)
    if state.x_alg is not None:
        dyn, taps = state.dyn, state.taps
        try:
            _, _, y = model.solve_algebraic(dyn, taps, {}, state.x_alg)
        except Exception:
            return None
    eq = match_equilibrium(net, y, known, tol=1e-3) if np.any(y) else None
    return eq.label if eq is not None else None


def _settled_equilibrium(net, traj: Trajectory, known) -> Optional[Equilibrium]:
    if traj.t.size < 2 or _velocity(traj)[-1] > SETTLE_VELOCITY:
        return None
    y = traj.g[-1] + 1j * traj.b[-1]
    return match_equilibrium(net, y, known)


def _recovery_time(traj: Trajectory, normal: Equilibrium, after: float) -> Optional[float]:
    d = np.max(np.abs(traj.vm - normal.vm[None, :]), axis=1)
    idx = np.where((traj.t >= after) & (d < 0.01))[0]
    return float(traj.t[idx[0]]) if idx.size else None


@dataclass
class PulseSearch:
    best: Optional[PulseCommand]
    outcomes: List[Tuple[int, float, float, str]] = field(default_factory=list)  # bus, magnitude, duration, outcome

    def table(self) -> str:
        lines = ["bus,magnitude,duration,outcome"]
        lines += [f"{b},{m:.6g},{d:.6g},{o}" for b, m, d, o in self.outcomes]
        return "\n".join(lines) + "\n"


def search_pulse(net: Network, entrapped: Union[SimState, Equilibrium], buses: Optional[Sequence[int]],
                 magnitudes: Sequence[float], durations: Sequence[float],
                 known: Optional[Sequence[Equilibrium]] = None, model: Optional[Model] = None,
                 settle: Optional[float] = None) -> PulseSearch:
    """Grid search over curtailment pulses (active-power setpoint ``magnitude``).

    Returns the recovering command with the smallest magnitude, ties broken
    by the shortest duration, plus the full outcome map.
    """
    if not magnitudes or not durations:
        raise ValueError("magnitude and duration grids must be non-empty")
    model = model or Model(net)
    known = list(known) if known is not None else known_equilibria(net, model)
    buses = list(buses) if buses else default_candidates(net)
    outcomes = []
    best = None
    for bus in buses:
        for mag in sorted(magnitudes, key=abs):
            for dur in sorted(durations):
                cmd = PulseCommand("dg_curtailment", {bus: (float(mag), None)}, float(dur))
                _, rep = execute_pulse_recovery(net, entrapped, cmd, known, model=model, settle=settle)
                outcomes.append((bus, float(mag), float(dur), rep.outcome))
                if rep.outcome == "recovered":
                    key = (abs(mag), dur)
                    if best is None or key < (abs(best.magnitude[best.buses[0]][0]), best.duration):
                        best = cmd
    return PulseSearch(best, outcomes)


def default_candidates(net: Network) -> List[int]:
    """Generating dynamic buses, largest generation first."""
    gens = [(ld.p_set, k) for k, ld in net.loads.items() if isinstance(ld, DynamicAdmittance) and ld.p_set < 0]
    return [k for _, k in sorted(gens)]


def shed_load(net: Network, entrapped: Union[SimState, Equilibrium], bus: int, dp: float, t: float,
              t_end: Optional[float] = None, known: Optional[Sequence[Equilibrium]] = None,
              model: Optional[Model] = None, timeline: Sequence[Event] = ()) -> Tuple[Trajectory, str]:
    """Drop ``dp`` of consumption at ``bus`` at time ``t`` and simulate past any collapse."""
    model = model or Model(net)
    state = _as_state(model, entrapped, 0.0) if isinstance(entrapped, Equilibrium) else entrapped
    t_end = t_end if t_end is not None else t + settle_window(net)
    events = list(timeline) + ([LoadShed(t, bus, dp)] if dp != 0 else [])
    traj = simulate(net, events, state, t_end, model=model, stop_on_collapse=False)
    if traj.collapse_time is not None:
        return traj, "collapsed"
    if traj.termination != "completed":
        return traj, "collapsed"
    if known is not None:
        normal = normal_equilibrium(known)
        final = _settled_equilibrium(net, traj, known)
        if final is not None and final is normal:
            return traj, "recovered"
    return traj, "still_entrapped"


# ---------------------------------------------------------------------------
# shedding demonstration on the alternative three-bus feeder


@dataclass
class LsivcResult:
    entrapped_power: float
    tip_power: float
    shed: float
    outcome: str
    trajectory: Trajectory
    final_power: Dict[int, float]
    collapse_time: Optional[float]

    @property
    def margin(self) -> float:
        return self.entrapped_power - self.tip_power

    def to_text(self) -> str:
        rows = [("entrapped_power", self.entrapped_power), ("branch_tip_power", self.tip_power),
                ("margin", self.margin), ("shed", self.shed), ("outcome", self.outcome),
                ("collapse_time", self.collapse_time)]
        rows += [(f"final_P{k}", v) for k, v in sorted(self.final_power.items())]
        return "".join(f"{k}: {'none' if v is None else (f'{v:.6g}' if isinstance(v, float) else v)}\n"
                       for k, v in rows)


def branch_tip(net: Network, eq: Equilibrium, bus: int) -> float:
    """Most negative realizable active power at ``bus`` along the branch through ``eq``."""
    sw = SweepConfig(bus)
    br = trace_branch(net, None, sw, eq.admittances, seed="entrapped equilibrium")
    return float(np.min(br.realized_power))


def lsivc(net: Network, timeline: Sequence[Event], bus: int, shed: float, t_shed: float, t_end: float,
          model: Optional[Model] = None, known: Optional[Sequence[Equilibrium]] = None) -> LsivcResult:
    """Entrap the feeder with ``timeline``, then shed ``shed`` p.u. at ``bus``."""
    model = model or Model(net)
    known = list(known) if known is not None else known_equilibria(net, model)
    normal = normal_equilibrium(known)
    low = [e for e in known if e.stable and e is not normal]
    if not low:
        raise ValueError("network has no second stable equilibrium to be entrapped at")
    entrapped = low[0]
    j = net.non_slack.index(bus)
    p_entrapped = float((entrapped.admittances[j] * abs(entrapped.voltages[bus - 1]) ** 2).real)
    tip = branch_tip(net, entrapped, bus)
    traj, outcome = shed_load(net, model.initial_state(), bus, shed, t_shed, t_end, known, model, timeline)
    final = {k: float(traj.column("P", k)[-1]) for k in net.non_slack}
    return LsivcResult(p_entrapped, tip, shed, outcome, traj, final, traj.collapse_time)
