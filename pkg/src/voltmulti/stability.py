"""Local stability of load-dynamics equilibria, phase portraits and attraction probes.

The dynamic states are the admittances of the dynamic-load buses.  Static
loads are eliminated by re-solving the algebraic subsystem at every function
evaluation, so the linearization is that of the reduced ODE.  Tap changers do
not contribute a dimension: at an equilibrium they sit inside their deadband
or at a limit, where the ratio rate is identically zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import root

from .algebraic import (
    RESIDUAL_TOL,
    AdmittanceState,
    ConstraintSet,
    FixedPower,
    constraints_from_network,
    solve_constrained,
    solve_voltages_linear,
)
from .dynsim import AlgebraicFailure, Config, Model, SimState, simulate
from .events import Pulse
from .homotopy import DEDUP_TOL, SolutionBranch, find_all_solutions
from .netmodel import DynamicAdmittance, ImpedanceSetpoint, Network

FD_STEP = 1e-6
MARGIN = 1e-6
EQUILIBRIUM_TOL = 1e-6
POLISH_TOL = 1e-14


class NotAnEquilibrium(ValueError):
    pass


@dataclass
class Equilibrium:
    admittances: AdmittanceState
    voltages: np.ndarray
    eigenvalues: np.ndarray
    classification: str                  # stable | unstable | marginal
    jacobian: Optional[np.ndarray] = None
    x_alg: Optional[np.ndarray] = None
    label: str = ""

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.voltages)

    @property
    def stable(self) -> bool:
        return self.classification == "stable"

    @property
    def max_real(self) -> float:
        return float(np.max(self.eigenvalues.real)) if self.eigenvalues.size else -np.inf


def classify(eigenvalues: np.ndarray, margin: float = MARGIN) -> str:
    re = np.real(eigenvalues)
    if re.size and np.any(np.abs(re) <= margin):
        return "marginal"
    if re.size and np.any(re > 0):
        return "unstable"
    return "stable"


def _dyn_from_admittances(model: Model, y: AdmittanceState) -> np.ndarray:
    return model.initial_state(y).dyn


def _config_with(model: Model, setpoints: Optional[Dict[int, Tuple[float, float]]]) -> Config:
    cfg = model.base_config()
    for bus, (p, q) in (setpoints or {}).items():
        cfg.p_set[bus], cfg.q_set[bus] = p, q
    return cfg


class _Field:
    """Reduced right-hand side f(dyn) with the algebraic part re-solved from a fixed warm start."""

    def __init__(self, model: Model, cfg: Config, taps: np.ndarray, x_ref: Optional[np.ndarray]):
        self.model, self.cfg, self.taps, self.x_ref = model, cfg, taps, x_ref

    def __call__(self, dyn: np.ndarray) -> np.ndarray:
        m = self.model
        x, V, _ = m.solve_algebraic(dyn, self.taps, self.cfg.shunts, self.x_ref)
        V = self._polish(x, V)
        out = m.derivatives(dyn, self.taps, V, self.cfg, [0.0] * len(self.taps))
        return out[:dyn.size]

    def _polish(self, x: np.ndarray, V: np.ndarray) -> np.ndarray:
        # Newton stops at the solver tolerance; differencing needs the residual near roundoff
        m = self.model
        if not len(m.system.unknowns):
            return V
        x2, V2, _, _, rn = m.system.solve(x, tol=POLISH_TOL, max_iter=4)
        if V2 is None or not np.all(np.isfinite(V2)) or not rn < RESIDUAL_TOL:
            return V
        full = V.copy()
        full[m.idx] = V2
        return full

    def jacobian(self, dyn: np.ndarray, step: float = FD_STEP) -> np.ndarray:
        n = dyn.size
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = step
            J[:, j] = (self(dyn + e) - self(dyn - e)) / (2 * step)
        return J


def classify_equilibrium(net: Network, eq_state: AdmittanceState, model: Optional[Model] = None,
                         setpoints: Optional[Dict[int, Tuple[float, float]]] = None,
                         taps: Optional[Sequence[float]] = None, step: float = FD_STEP,
                         margin: float = MARGIN, tol: float = EQUILIBRIUM_TOL) -> Equilibrium:
    """Eigenvalues of the finite-difference Jacobian of the load dynamics at ``eq_state``.

    ``setpoints`` overrides (P, Q) targets of dynamic buses, e.g. to treat a
    branch point's realized power as the operating setpoint.  Raises
    :class:`NotAnEquilibrium` if the state derivative exceeds ``tol``.
    """
    model = model or Model(net)
    cfg = _config_with(model, setpoints)
    y = np.asarray(eq_state, dtype=complex)
    tp = np.array([d.k for d in model.devices] if taps is None else list(taps), dtype=float)
    dyn = _dyn_from_admittances(model, y)
    x0 = model.system.unknowns_from(y)
    try:
        x_eq, V, _ = model.solve_algebraic(dyn, tp, cfg.shunts, x0)
    except AlgebraicFailure as exc:
        raise NotAnEquilibrium(f"algebraic subsystem unsolvable at state: {exc}") from None
    full = model.derivatives(dyn, tp, V, cfg)
    if full.size and np.max(np.abs(full)) > tol:
        raise NotAnEquilibrium(f"state derivative norm {np.max(np.abs(full)):.3g} exceeds {tol:g}")
    f = _Field(model, cfg, tp, x_eq)
    if dyn.size:
        try:
            J = f.jacobian(dyn, step)
        except AlgebraicFailure as exc:
            raise NotAnEquilibrium(f"algebraic subsystem lost near state: {exc}") from None
        eig = np.linalg.eigvals(J)
    else:
        J = np.zeros((0, 0))
        eig = np.zeros(0, dtype=complex)
    _, _, y_all = model.solve_algebraic(dyn, tp, cfg.shunts, x_eq)
    return Equilibrium(y_all, V, eig, classify(eig, margin), J, x_eq)


def color_branch(net: Network, branch: SolutionBranch, model: Optional[Model] = None,
                 margin: float = MARGIN) -> SolutionBranch:
    """Tag each branch point stable/unstable/marginal (or unknown) in place and return the branch."""
    model = model or Model(net)
    fb = branch.free_bus
    cs = constraints_from_network(net)
    base = cs.buses.get(fb)
    j = net.non_slack.index(fb)
    for p in branch.points:
        y = _polish_point(net, cs.with_free(fb, p.free_value), p.admittances, p.voltages)
        sp = None
        if fb in model.dyn_buses and isinstance(net.loads[fb], DynamicAdmittance):
            q = base.q if isinstance(base, FixedPower) else net.loads[fb].q_set
            sol = solve_voltages_linear(net, y)
            sp = {fb: (float(y[j].real * abs(sol.voltages[fb - 1]) ** 2), q)}
        try:
            p.stability = classify_equilibrium(net, y, model, sp, margin=margin).classification
        except (NotAnEquilibrium, AlgebraicFailure, np.linalg.LinAlgError):
            p.stability = "unknown"
    return branch


def _polish_point(net: Network, cs: ConstraintSet, y: AdmittanceState, V: np.ndarray) -> AdmittanceState:
    # branch points meet the tracing tolerance; fast loads turn that into a visible derivative
    try:
        y2, sol = solve_constrained(net, cs, y, tol=POLISH_TOL, max_iter=4)
    except (ValueError, np.linalg.LinAlgError):
        return y
    if sol.residual_norm < RESIDUAL_TOL and np.max(np.abs(sol.voltages - V)) < DEDUP_TOL:
        return y2
    return y


def stability_segments(branch: SolutionBranch) -> List[Tuple[str, int, int]]:
    """Contiguous runs ``(tag, first_index, last_index)`` of equal stability tags."""
    out: List[Tuple[str, int, int]] = []
    for i, p in enumerate(branch.points):
        tag = p.stability or "unknown"
        if out and out[-1][0] == tag:
            out[-1] = (tag, out[-1][1], i)
        else:
            out.append((tag, i, i))
    return out


# ---------------------------------------------------------------------------
# phase portrait


@dataclass
class PhaseField:
    axes: Tuple[str, str]
    xs: np.ndarray
    ys: np.ndarray
    vx: np.ndarray                 # (len(ys), len(xs)); NaN where the algebraic solve failed
    vy: np.ndarray
    equilibria: List[Equilibrium] = field(default_factory=list)
    fixed: Dict[str, float] = field(default_factory=dict)
    buses: List[int] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.vx) & np.isfinite(self.vy)

    def rows(self):
        for i, y in enumerate(self.ys):
            for j, x in enumerate(self.xs):
                yield x, y, self.vx[i, j], self.vy[i, j]

    def equilibrium_points(self) -> np.ndarray:
        return np.array([[_coord(e.admittances, a, self.buses) for a in self.axes] for e in self.equilibria])


def _coord(y: AdmittanceState, name: str, buses: Sequence[int]) -> float:
    kind, bus = name[0], int(name[1:])
    v = y[list(buses).index(bus)]
    return float(v.real if kind == "g" else v.imag)


def _state_index(model: Model, name: str) -> int:
    kind, bus = name[0], int(name[1:])
    if kind not in "gb" or bus not in model.dyn_buses:
        raise ValueError(f"{name!r} is not a dynamic state; choose from "
                         + ", ".join(f"{c}{k}" for k in model.dyn_buses for c in "gb"))
    return 2 * model.dyn_buses.index(bus) + (0 if kind == "g" else 1)


def phase_portrait(net: Network, axes: Tuple[str, str] = ("g2", "b2"),
                   ranges: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None,
                   resolution: int = 50, fixed: Optional[Dict[str, float]] = None,
                   reverse: bool = False, model: Optional[Model] = None) -> PhaseField:
    """State-velocity field on a grid over two dynamic states; other states held at ``fixed``.

    Equilibria are the zeros of the field: every grid cell whose corners show
    a sign change in both components seeds a Newton polish, and the distinct
    roots are classified.  Slaved loads follow their source automatically.
    """
    model = model or Model(net)
    cfg = model.base_config()
    ix, iy = (_state_index(model, a) for a in axes)
    n = 2 * len(model.dyn_buses)
    base = np.zeros(n)
    for name, val in (fixed or {}).items():
        base[_state_index(model, name)] = val
    taps = np.array([d.k for d in model.devices], dtype=float)
    sign = -1.0 if reverse else 1.0

    if ranges is None:
        sols = find_all_solutions(net)
        pts = np.array([[_coord(y, a, net.non_slack) for a in axes] for y, _ in sols]) if len(sols) else np.zeros((1, 2))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.25 * np.maximum(hi - lo, 0.5)
        ranges = ((lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1]))
    xs = np.linspace(ranges[0][0], ranges[0][1], resolution)
    ys = np.linspace(ranges[1][0], ranges[1][1], resolution)

    def state(u, v):
        z = base.copy()
        z[ix], z[iy] = u, v
        return z

    model.reset()
    vx = np.full((ys.size, xs.size), np.nan)
    vy = np.full_like(vx, np.nan)
    f = _Field(model, cfg, taps, None)
    zero_rates = [0.0] * len(taps)
    for i, v in enumerate(ys):
        for j, u in enumerate(xs):
            z = state(u, v)
            try:
                x, V, _ = model.solve_algebraic(z, taps, cfg.shunts)
            except (AlgebraicFailure, np.linalg.LinAlgError):
                continue
            model.commit(x)
            d = model.derivatives(z, taps, V, cfg, zero_rates)
            vx[i, j], vy[i, j] = sign * d[ix], sign * d[iy]

    def reduced(uv):
        try:
            d = f(state(uv[0], uv[1]))
        except (AlgebraicFailure, np.linalg.LinAlgError):
            return np.array([1e6, 1e6])
        return np.array([d[ix], d[iy]])

    found: List[np.ndarray] = []
    for i in range(ys.size - 1):
        for j in range(xs.size - 1):
            cx = vx[i:i + 2, j:j + 2]
            cy = vy[i:i + 2, j:j + 2]
            if not (np.all(np.isfinite(cx)) and np.all(np.isfinite(cy))):
                continue
            if np.min(cx) > 0 or np.max(cx) < 0 or np.min(cy) > 0 or np.max(cy) < 0:
                continue
            sol = root(reduced, [0.5 * (xs[j] + xs[j + 1]), 0.5 * (ys[i] + ys[i + 1])], method="hybr",
                       options={"xtol": 1e-13})
            if sol.success and np.max(np.abs(reduced(sol.x))) < 1e-9 and \
                    all(np.max(np.abs(sol.x - q)) >= DEDUP_TOL for q in found):
                found.append(sol.x)

    eqs: List[Equilibrium] = []
    for uv in found:
        z = state(*uv)
        try:
            x, V, y = model.solve_algebraic(z, taps, cfg.shunts)
            eqs.append(classify_equilibrium(net, y, model, taps=taps))
        except (NotAnEquilibrium, AlgebraicFailure):
            continue
    eqs.sort(key=lambda e: -np.min(e.vm))
    for k, e in enumerate(eqs):
        e.label = f"E{k + 1}"
    return PhaseField(tuple(axes), xs, ys, vx, vy, eqs, dict(fixed or {}), list(net.non_slack))


# ---------------------------------------------------------------------------
# attraction probes


@dataclass(frozen=True)
class Perturbation:
    """``direction`` is a bus number (pulse on its P setpoint), ``("q", bus)``
    (pulse on Q) or a state-space vector (instantaneous offset)."""

    direction: Union[int, Tuple[str, int], Sequence[float]]
    magnitude: float
    duration: float = 0.0


@dataclass
class ProbeResult:
    outcome: str                  # returned | escaped_to:<label> | collapsed | integrator_failure | unsettled
    distance: float
    trajectory: object = None


def known_equilibria(net: Network, model: Optional[Model] = None) -> List[Equilibrium]:
    """All solutions of the steady-state equations, classified and labelled by descending min |V|."""
    model = model or Model(net)
    out = []
    for y, _ in find_all_solutions(net):
        try:
            out.append(classify_equilibrium(net, y, model))
        except NotAnEquilibrium:
            continue
    out.sort(key=lambda e: -np.min(e.vm))
    for k, e in enumerate(out):
        e.label = f"E{k + 1}"
    return out


def nearest_equilibrium(V: np.ndarray, eqs: Sequence[Equilibrium]) -> Tuple[Optional[Equilibrium], float]:
    best, dist = None, np.inf
    for e in eqs:
        d = float(np.max(np.abs(e.voltages - V)))
        if d < dist:
            best, dist = e, d
    return best, dist


def slowest_time_constant(net: Network) -> float:
    taus = [0.0]
    for ld in net.loads.values():
        if isinstance(ld, DynamicAdmittance):
            taus += [ld.tau1, ld.tau2]
        elif isinstance(ld, ImpedanceSetpoint):
            taus += [ld.tau_g, ld.tau_b]
    return max(taus)


def equilibrium_state(model: Model, eq: Equilibrium, t: float = 0.0) -> SimState:
    st = model.initial_state(eq.admittances, t=t)
    st.x_alg = eq.x_alg if eq.x_alg is not None else model.system.unknowns_from(eq.admittances)
    return st


def attraction_probe(net: Network, eq: Equilibrium, perturbations: Sequence[Perturbation],
                     known: Optional[Sequence[Equilibrium]] = None, start: float = 0.5,
                     settle: Optional[float] = None, tol: float = 1e-3,
                     model: Optional[Model] = None) -> List[ProbeResult]:
    """Perturb ``eq`` and report which attractor each run ends on.

    Setpoint pulses start at ``start`` seconds; the run continues for
    ``settle`` seconds after the pulse (default 20 slowest time constants,
    at least 2 s).  A final state within ``tol`` of ``eq`` is ``returned``,
    within ``tol`` of another known equilibrium ``escaped_to:<label>``.
    """
    model = model or Model(net)
    known = list(known) if known is not None else known_equilibria(net, model)
    settle = settle if settle is not None else max(2.0, 20.0 * slowest_time_constant(net))
    out = []
    for pert in perturbations:
        st = equilibrium_state(model, eq)
        timeline = []
        d = pert.direction
        if isinstance(d, (int, np.integer)):
            if pert.duration > 0:
                timeline = [Pulse(start, int(d), pert.duration, p=pert.magnitude)]
        elif isinstance(d, tuple) and len(d) == 2 and isinstance(d[0], str):
            if pert.duration > 0:
                kind, bus = d
                timeline = [Pulse(start, int(bus), pert.duration,
                                  **({"p": pert.magnitude} if kind == "p" else {"q": pert.magnitude}))]
        else:
            v = np.asarray(d, dtype=float)
            nv = np.linalg.norm(v)
            if nv > 0 and pert.magnitude != 0:
                st.dyn = st.dyn + pert.magnitude * v[:st.dyn.size] / nv
        t_end = start + pert.duration + settle
        traj = simulate(net, timeline, st, t_end, output_interval=0.01, model=model)
        if traj.termination == "collapse_detected":
            out.append(ProbeResult("collapsed", np.inf, traj))
            continue
        if traj.termination != "completed":
            out.append(ProbeResult("integrator_failure", np.inf, traj))
            continue
        Vf = _final_voltages(model, traj)
        near, dist = nearest_equilibrium(Vf, known + [eq])
        if near is None or dist > tol:
            out.append(ProbeResult("unsettled", dist, traj))
        elif near is eq or np.max(np.abs(near.voltages - eq.voltages)) < DEDUP_TOL:
            out.append(ProbeResult("returned", dist, traj))
        else:
            out.append(ProbeResult(f"escaped_to:{near.label}", dist, traj))
    return out


def _final_voltages(model: Model, traj) -> np.ndarray:
    z = traj.final_state()
    dyn, taps = model.unpack(z)
    _, V, _ = model.solve_algebraic(dyn, taps, {})
    return V


def perturbation_growth(net: Network, eq: Equilibrium, direction: Sequence[float], magnitude: float = 1e-4,
                        horizon: Optional[float] = None, model: Optional[Model] = None) -> float:
    """Ratio of the state distance from ``eq`` after ``horizon`` to the initial
    offset ``magnitude`` along ``direction``.

    The default horizon is 10 slowest time scales: the longest load time
    constant or the slowest linearized mode at ``eq``, whichever is longer
    (network coupling can make a mode much slower than any single load).
    """
    model = model or Model(net)
    st = equilibrium_state(model, eq)
    base = st.dyn.copy()
    v = np.asarray(direction, dtype=float)
    st.dyn = base + magnitude * v / np.linalg.norm(v)
    if horizon is None:
        rates = np.abs(np.real(eq.eigenvalues))
        mode = 1.0 / np.min(rates) if rates.size and np.min(rates) > 0 else 0.0
        horizon = 10.0 * max(slowest_time_constant(net), mode)
    traj = simulate(net, [], st, horizon, output_interval=horizon / 100, model=model)
    if traj.termination != "completed":
        return np.inf
    dyn, _ = model.unpack(traj.final_state())
    return float(np.linalg.norm(dyn - base) / magnitude)


def leading_direction(eq: Equilibrium) -> np.ndarray:
    """Real part of the eigenvector belonging to the right-most eigenvalue."""
    w, vecs = np.linalg.eig(eq.jacobian)
    v = vecs[:, int(np.argmax(w.real))]
    v = v.real if np.linalg.norm(v.real) > 1e-12 else v.imag
    return v / np.linalg.norm(v)
