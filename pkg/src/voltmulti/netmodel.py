"""Network topology, per-unit data, load models and the bus admittance matrix.

Buses are numbered from 1 (the slack bus in every built-in case).  Load
powers follow the consumption convention of the load-dynamics model: a bus
consumes ``P + jQ = (g + jb) |V|^2``, so negative values mean the bus is
generating.  The physical shunt admittance of such a load is therefore
``g - jb``; :func:`load_shunt` is the single place that conversion happens.
"""
from __future__ import annotations

import cmath
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np


@dataclass(frozen=True)
class DynamicAdmittance:
    """Load whose conductance and susceptance relax toward power setpoints.

    ``tau1 * dg/dt = -(g|V|^2 - p_set)`` and ``tau2 * db/dt = -(b|V|^2 - q_set)``.
    """

    tau1: float
    tau2: float
    p_set: float
    q_set: float


@dataclass(frozen=True)
class ImpedanceSetpoint:
    """Load driven directly toward an admittance setpoint (control mode)."""

    tau_g: float
    tau_b: float
    g_set: float
    b_set: float


@dataclass(frozen=True)
class Polynomial:
    """Static ZIP load: ``P = p0 (aP V^2 + bP V + cP)``, same shape for Q."""

    p0: float
    q0: float
    aP: float = 0.0
    bP: float = 0.0
    cP: float = 1.0
    aQ: float = 0.0
    bQ: float = 0.0
    cQ: float = 1.0

    def power(self, vm: float) -> complex:
        p = self.p0 * (self.aP * vm * vm + self.bP * vm + self.cP)
        q = self.q0 * (self.aQ * vm * vm + self.bQ * vm + self.cQ)
        return complex(p, q)

    @property
    def is_constant_impedance(self) -> bool:
        return self.bP == 0 and self.cP == 0 and self.bQ == 0 and self.cQ == 0


@dataclass(frozen=True)
class ConstantPower:
    p: float
    q: float


@dataclass(frozen=True)
class SlavedAdmittance:
    """Fixed conductance with susceptance tied to another bus: ``b = b_ratio * b_source``.

    Used by the reduced two-state phase-portrait model.
    """

    g: float
    b_ratio: float
    source_bus: int


LoadModel = Union[DynamicAdmittance, ImpedanceSetpoint, Polynomial, ConstantPower, SlavedAdmittance]

ZIP_SUM_TOL = 0.01

LOAD_KINDS = {
    "dynamic": DynamicAdmittance,
    "impedance_setpoint": ImpedanceSetpoint,
    "polynomial": Polynomial,
    "constant_power": ConstantPower,
    "slaved": SlavedAdmittance,
}


def load_kind(load: LoadModel) -> str:
    for name, cls in LOAD_KINDS.items():
        if isinstance(load, cls):
            return name
    raise TypeError(f"not a load model: {load!r}")


@dataclass
class UltcDevice:
    """Continuous under-load tap changer acting on one branch.

    The ratio ``k`` sits on the from-side of the branch, so the to-side
    voltage is roughly ``V_from / k``: lowering ``k`` raises the controlled
    voltage.
    """

    k: float
    k_min: float
    k_max: float
    v_min: float
    v_max: float
    controlled_bus: int
    rate: float = 1.0

    def tap_rate(self, v: float, k: Optional[float] = None, tol: float = 0.0) -> float:
        """Tap ratio velocity from the three-case deadband/limit rule."""
        k = self.k if k is None else k
        if v < self.v_min - tol and k > self.k_min + tol:
            return -self.rate
        if v > self.v_max + tol and k < self.k_max - tol:
            return self.rate
        return 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    impedance: complex
    tap: Optional[UltcDevice] = None


@dataclass
class Network:
    n_buses: int
    branches: List[Branch]
    loads: Dict[int, LoadModel]
    slack_bus: int = 1
    slack_voltage: complex = 1.0 + 0.0j
    name: str = ""

    @property
    def non_slack(self) -> List[int]:
        return [k for k in range(1, self.n_buses + 1) if k != self.slack_bus]

    @property
    def tap_branches(self) -> List[int]:
        return [i for i, br in enumerate(self.branches) if br.tap is not None]

    def tap_ratios(self) -> Dict[int, float]:
        return {i: self.branches[i].tap.k for i in self.tap_branches}

    def replace_load(self, bus: int, load: LoadModel) -> "Network":
        loads = dict(self.loads)
        loads[bus] = load
        return Network(self.n_buses, list(self.branches), loads, self.slack_bus,
                       self.slack_voltage, self.name)


def load_shunt(g, b):
    """Physical shunt admittance of a load with consumption-convention (g, b)."""
    return g - 1j * b


def branch_stamp(z: complex, k: float = 1.0) -> np.ndarray:
    """2x2 admittance block of a series impedance behind an ideal k:1 ratio."""
    if not abs(z) > 0:
        raise ValueError("zero-impedance branch")
    y = 1.0 / z
    return np.array([[y / (k * k), -y / k], [-y / k, y]], dtype=complex)


def build_admittance_matrix(net: Network, tap_ratios: Optional[Dict[int, float]] = None) -> np.ndarray:
    """Dense bus admittance matrix, indexed ``[bus - 1, bus - 1]``.

    ``tap_ratios`` maps branch index to ratio and overrides the device state.
    """
    ratios = net.tap_ratios()
    if tap_ratios:
        ratios.update(tap_ratios)
    Y = np.zeros((net.n_buses, net.n_buses), dtype=complex)
    for i, br in enumerate(net.branches):
        if br.from_bus == br.to_bus:
            raise ValueError(f"branch {i} is a self-loop at bus {br.from_bus}")
        if not abs(br.impedance) > 0:
            raise ValueError(f"branch {i} ({br.from_bus}-{br.to_bus}) has zero impedance")
        f, t = br.from_bus - 1, br.to_bus - 1
        blk = branch_stamp(br.impedance, ratios.get(i, 1.0))
        Y[f, f] += blk[0, 0]
        Y[f, t] += blk[0, 1]
        Y[t, f] += blk[1, 0]
        Y[t, t] += blk[1, 1]
    return Y


def _finite(z) -> bool:
    return cmath.isfinite(complex(z))


def validate_network(net: Network) -> List[str]:
    """Report every violated invariant; an empty list means the network is usable."""
    out: List[str] = []
    n = net.n_buses
    if not 1 <= net.slack_bus <= n:
        out.append(f"slack bus {net.slack_bus} out of range 1..{n}")
    if not _finite(net.slack_voltage) or abs(net.slack_voltage) == 0:
        out.append("slack voltage must be finite and nonzero")
    adj: Dict[int, List[int]] = {k: [] for k in range(1, n + 1)}
    for i, br in enumerate(net.branches):
        if not (1 <= br.from_bus <= n and 1 <= br.to_bus <= n):
            out.append(f"branch {i} references a bus outside 1..{n}")
            continue
        if br.from_bus == br.to_bus:
            out.append(f"branch {i} connects bus {br.from_bus} to itself")
        if not _finite(br.impedance):
            out.append(f"branch {i} impedance is not finite")
        elif abs(br.impedance) == 0:
            out.append(f"branch {i} has zero impedance")
        if br.tap is not None:
            d = br.tap
            if not d.k_min <= d.k <= d.k_max:
                out.append(f"branch {i} tap ratio {d.k} outside [{d.k_min}, {d.k_max}]")
            if not d.v_min < d.v_max:
                out.append(f"branch {i} tap deadband is empty")
            if not 1 <= d.controlled_bus <= n:
                out.append(f"branch {i} tap controls unknown bus {d.controlled_bus}")
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)

    if 1 <= net.slack_bus <= n:
        seen = {net.slack_bus}
        queue = deque([net.slack_bus])
        while queue:
            k = queue.popleft()
            for j in adj[k]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        for k in range(1, n + 1):
            if k not in seen:
                out.append(f"unreachable bus {k}")

    for k in range(1, n + 1):
        if k == net.slack_bus:
            if k in net.loads:
                out.append(f"slack bus {k} carries a load model")
            continue
        load = net.loads.get(k)
        if load is None:
            out.append(f"bus {k} has no load model")
            continue
        values = [getattr(load, f) for f in load.__dataclass_fields__]
        if not all(math.isfinite(v) for v in values):
            out.append(f"bus {k} load has non-finite parameters")
        if isinstance(load, DynamicAdmittance) and not (load.tau1 > 0 and load.tau2 > 0):
            out.append(f"bus {k} time constants must be positive")
        if isinstance(load, ImpedanceSetpoint) and not (load.tau_g > 0 and load.tau_b > 0):
            out.append(f"bus {k} time constants must be positive")
        if isinstance(load, Polynomial):
            # the 13-bus feeder's coefficients sum to 1.005, hence the tolerance
            for axis, parts in (("P", (load.aP, load.bP, load.cP)), ("Q", (load.aQ, load.bQ, load.cQ))):
                if abs(sum(parts) - 1.0) > ZIP_SUM_TOL:
                    out.append(f"bus {k} ZIP coefficient sum for {axis} is {sum(parts):g}, not 1")
        if isinstance(load, SlavedAdmittance):
            if load.source_bus == k or load.source_bus not in net.loads:
                out.append(f"bus {k} slaved to invalid bus {load.source_bus}")
    extra = [k for k in net.loads if not 1 <= k <= n]
    for k in extra:
        out.append(f"load attached to unknown bus {k}")
    return out


@dataclass
class Reduced:
    """Admittance data with the slack row/column eliminated.

    ``Yr @ V + Y[:, slack] * V_slack = I_injected`` for the non-slack buses,
    so with load shunts ``(Yr + diag(y_load)) V = rhs``.
    """

    Yr: np.ndarray
    rhs: np.ndarray
    buses: List[int] = field(default_factory=list)
    Y: Optional[np.ndarray] = None


def reduce(net: Network, tap_ratios: Optional[Dict[int, float]] = None,
           Y: Optional[np.ndarray] = None) -> Reduced:
    if Y is None:
        Y = build_admittance_matrix(net, tap_ratios)
    s = net.slack_bus - 1
    idx = [k - 1 for k in net.non_slack]
    Yr = np.ascontiguousarray(Y[np.ix_(idx, idx)])
    rhs = np.ascontiguousarray(-Y[idx, s] * net.slack_voltage)
    return Reduced(Yr, rhs, net.non_slack, Y)
