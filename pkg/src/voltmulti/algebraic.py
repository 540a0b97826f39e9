"""Network algebraic equations in admittance coordinates.

Each non-slack load is an effective admittance ``y_k = g_k + j b_k``.  Given
all admittances the voltages follow from one linear solve; power or ZIP
constraints turn the unknown admittances into a Newton problem whose inner
step is that same linear solve.

Admittance vectors (``AdmittanceState``) are complex arrays over the non-slack
buses in ``net.non_slack`` order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .netmodel import (
    ConstantPower,
    DynamicAdmittance,
    ImpedanceSetpoint,
    Network,
    Polynomial,
    SlavedAdmittance,
    load_shunt,
    reduce,
)

AdmittanceState = np.ndarray

RESIDUAL_TOL = 1e-8
LINEAR_TOL = 1e-10
MAX_ITER = 50
MAX_HALVINGS = 8
SINGULAR_THRESHOLD = 1e-6

STATUS_NAMES = {kernels.CONVERGED: "converged", kernels.MAX_ITER: "max_iter", kernels.SINGULAR: "singular"}


@dataclass(frozen=True)
class FixedAdmittance:
    g: float
    b: float


@dataclass(frozen=True)
class FixedPower:
    p: float
    q: float


@dataclass(frozen=True)
class PolynomialPower:
    load: Polynomial


@dataclass(frozen=True)
class Free:
    """Homotopy bus: ``variable`` ('g' or 'b') is pinned to ``value``; the
    other component keeps the power target in ``rest``."""

    variable: str
    value: float
    rest: Union[FixedPower, PolynomialPower]


@dataclass(frozen=True)
class Linked:
    g: float
    b_ratio: float
    source_bus: int


BusConstraint = Union[FixedAdmittance, FixedPower, PolynomialPower, Free, Linked]


@dataclass
class ConstraintSet:
    buses: Dict[int, BusConstraint]

    @property
    def free_bus(self) -> Optional[int]:
        frees = [k for k, c in self.buses.items() if isinstance(c, Free)]
        if len(frees) > 1:
            raise ValueError("at most one free designation allowed")
        return frees[0] if frees else None

    def with_free(self, bus: int, value: float, variable: str = "g") -> "ConstraintSet":
        base = self.buses[bus]
        if isinstance(base, Free):
            base = base.rest
        if not isinstance(base, (FixedPower, PolynomialPower)):
            raise ValueError(f"bus {bus} has no power constraint to free")
        out = dict(self.buses)
        out[bus] = Free(variable, float(value), base)
        return ConstraintSet(out)

    def with_target(self, bus: int, p: float, q: float) -> "ConstraintSet":
        out = dict(self.buses)
        out[bus] = FixedPower(p, q)
        return ConstraintSet(out)

    def target_power(self, bus: int, vm: float) -> complex:
        c = self.buses[bus]
        if isinstance(c, Free):
            c = c.rest
        if isinstance(c, FixedPower):
            return complex(c.p, c.q)
        if isinstance(c, PolynomialPower):
            return c.load.power(vm)
        raise ValueError(f"bus {bus} has no power target")


def constraints_from_network(net: Network) -> ConstraintSet:
    """Steady-state constraints implied by each bus's load model."""
    out: Dict[int, BusConstraint] = {}
    for k in net.non_slack:
        load = net.loads[k]
        if isinstance(load, DynamicAdmittance):
            out[k] = FixedPower(load.p_set, load.q_set)
        elif isinstance(load, ConstantPower):
            out[k] = FixedPower(load.p, load.q)
        elif isinstance(load, Polynomial):
            if load.is_constant_impedance:
                out[k] = FixedAdmittance(load.p0 * load.aP, load.q0 * load.aQ)
            else:
                out[k] = PolynomialPower(load)
        elif isinstance(load, ImpedanceSetpoint):
            out[k] = FixedAdmittance(load.g_set, load.b_set)
        elif isinstance(load, SlavedAdmittance):
            out[k] = Linked(load.g, load.b_ratio, load.source_bus)
        else:
            raise TypeError(f"unsupported load at bus {k}: {load!r}")
    return ConstraintSet(out)


@dataclass
class VoltageSolution:
    voltages: np.ndarray
    residual_norm: float
    converged: bool
    status: str = "converged"
    iterations: int = 0

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.voltages)


def _full_voltages(net: Network, V: Optional[np.ndarray]) -> np.ndarray:
    out = np.full(net.n_buses, np.nan + 0j)
    out[net.slack_bus - 1] = net.slack_voltage
    if V is not None:
        idx = [k - 1 for k in net.non_slack]
        out[idx] = V
    return out


@dataclass
class System:
    """Compiled form of a network plus constraint set, ready for the kernels.

    ``y = y0 + L @ x`` maps the unknown vector to the stacked ``[g; b]`` of all
    non-slack buses; residual rows ``rows`` pair one-to-one with unknowns.
    """

    net: Network
    Yr: np.ndarray
    rhs: np.ndarray
    y0: np.ndarray
    L: np.ndarray
    rows: np.ndarray
    coef: np.ndarray
    unknowns: List[Tuple[int, str]]
    pos: Dict[int, int] = field(default_factory=dict)
    free_index: Optional[int] = None

    @classmethod
    def build(cls, net: Network, cs: ConstraintSet, Yr: Optional[np.ndarray] = None,
              rhs: Optional[np.ndarray] = None) -> "System":
        if Yr is None or rhs is None:
            red = reduce(net)
            Yr, rhs = red.Yr, red.rhs
        buses = net.non_slack
        m = len(buses)
        pos = {k: i for i, k in enumerate(buses)}
        y0 = np.zeros(2 * m)
        coef = np.zeros((2 * m, 3))
        unknowns: List[Tuple[int, str]] = []
        links: List[Tuple[int, float, int]] = []
        free_index = None

        def power_rows(i, c):
            if isinstance(c, FixedPower):
                coef[i] = (0.0, 0.0, c.p)
                coef[m + i] = (0.0, 0.0, c.q)
            else:
                ld = c.load
                coef[i] = (ld.p0 * ld.aP, ld.p0 * ld.bP, ld.p0 * ld.cP)
                coef[m + i] = (ld.q0 * ld.aQ, ld.q0 * ld.bQ, ld.q0 * ld.cQ)

        for k in buses:
            i = pos[k]
            c = cs.buses[k]
            if isinstance(c, FixedAdmittance):
                y0[i], y0[m + i] = c.g, c.b
            elif isinstance(c, (FixedPower, PolynomialPower)):
                power_rows(i, c)
                unknowns += [(k, "g"), (k, "b")]
            elif isinstance(c, Free):
                power_rows(i, c.rest)
                if c.variable == "g":
                    y0[i] = c.value
                    free_index = i
                    unknowns.append((k, "b"))
                elif c.variable == "b":
                    y0[m + i] = c.value
                    free_index = m + i
                    unknowns.append((k, "g"))
                else:
                    raise ValueError(f"free variable must be 'g' or 'b', got {c.variable!r}")
            elif isinstance(c, Linked):
                y0[i] = c.g
                links.append((i, c.b_ratio, pos[c.source_bus]))
            else:
                raise TypeError(f"bad constraint at bus {k}: {c!r}")

        nx = len(unknowns)
        L = np.zeros((2 * m, nx))
        rows = np.zeros(nx, dtype=np.intp)
        col = {}
        for j, (k, comp) in enumerate(unknowns):
            r = pos[k] + (m if comp == "b" else 0)
            L[r, j] = 1.0
            rows[j] = r
            col[r] = j
        for i, ratio, src in links:
            r = m + src
            if r in col:
                L[m + i, col[r]] = ratio
            else:
                y0[m + i] = ratio * y0[r]
        return cls(net, np.ascontiguousarray(Yr), np.ascontiguousarray(rhs), y0, L, rows, coef,
                   unknowns, pos, free_index)

    @property
    def m(self) -> int:
        return self.Yr.shape[0]

    def set_free(self, value: float) -> None:
        if self.free_index is None:
            raise ValueError("no free variable in this system")
        self.y0[self.free_index] = value
        self._relink()

    def set_fixed(self, bus: int, g: float, b: float) -> None:
        i = self.pos[bus]
        self.y0[i] = g
        self.y0[self.m + i] = b
        self._relink()

    def _relink(self) -> None:
        m = self.m
        for k, c in self._linked():
            i, src = self.pos[k], self.pos[c.source_bus]
            if not np.any(self.L[m + src]):
                self.y0[m + i] = c.b_ratio * self.y0[m + src]

    def _linked(self):
        return [(k, self.net.loads[k]) for k in self.net.non_slack
                if isinstance(self.net.loads.get(k), SlavedAdmittance)]

    def stacked(self, x: np.ndarray) -> np.ndarray:
        return self.y0 + self.L @ x

    def admittances(self, x: np.ndarray) -> AdmittanceState:
        y = self.stacked(x)
        return y[:self.m] + 1j * y[self.m:]

    def unknowns_from(self, y: AdmittanceState) -> np.ndarray:
        stacked = np.concatenate((np.real(y), np.imag(y)))
        return stacked[self.rows].astype(float)

    def evaluate(self, x: np.ndarray, jac: bool = True):
        """Voltages (non-slack), residuals on the constrained rows, Jacobian w.r.t. ``x``."""
        V, res, J = kernels.network_eval(self.Yr, self.rhs, self.stacked(x), self.coef, jac)
        r = res[self.rows]
        if not jac:
            return V, r, None
        return V, r, J[self.rows] @ self.L

    def solve(self, x0: np.ndarray, tol: float = RESIDUAL_TOL, max_iter: int = MAX_ITER):
        return kernels.newton_solve(self.Yr, self.rhs, self.y0, self.L, self.rows, self.coef,
                                    np.asarray(x0, dtype=float), tol, max_iter, MAX_HALVINGS)

    def free_jacobian_column(self, x: np.ndarray) -> np.ndarray:
        """d residual / d (free variable) at fixed unknowns."""
        _, _, J = kernels.network_eval(self.Yr, self.rhs, self.stacked(x), self.coef, True)
        col = J[self.rows][:, self.free_index].copy()
        m = self.m
        for k, c in self._linked():
            i, src = self.pos[k], self.pos[c.source_bus]
            if self.free_index == m + src:
                col += c.b_ratio * J[self.rows][:, m + i]
        return col


def scaled_min_singular_value(J: np.ndarray) -> float:
    """Smallest singular value after equilibrating each row to unit max-norm."""
    if J.size == 0:
        return 1.0
    scale = np.max(np.abs(J), axis=1)
    scale[scale == 0] = 1.0
    return float(np.linalg.svd(J / scale[:, None], compute_uv=False)[-1])


def solve_voltages_linear(net: Network, admittances: AdmittanceState,
                          tap_ratios: Optional[Dict[int, float]] = None,
                          shunts: Optional[Dict[int, complex]] = None) -> VoltageSolution:
    """Voltages for fixed load admittances; residual is the max current mismatch.

    ``shunts`` adds extra physical shunt admittance per bus (e.g. a fault).
    """
    red = reduce(net, tap_ratios)
    y = np.asarray(admittances, dtype=complex)
    A = red.Yr + np.diag(load_shunt(y.real, y.imag))
    if shunts:
        for k, ys in shunts.items():
            A[net.non_slack.index(k), net.non_slack.index(k)] += ys
    try:
        V = np.linalg.solve(A, red.rhs)
    except np.linalg.LinAlgError:
        return VoltageSolution(_full_voltages(net, None), np.inf, False, "singular")
    if not np.all(np.isfinite(V)):
        return VoltageSolution(_full_voltages(net, None), np.inf, False, "singular")
    scale = max(1.0, float(np.max(np.abs(red.rhs))))
    res = float(np.max(np.abs(A @ V - red.rhs))) / scale if V.size else 0.0
    return VoltageSolution(_full_voltages(net, V), res, res <= LINEAR_TOL, "converged" if res <= LINEAR_TOL else "inaccurate")


def solve_constrained(net: Network, constraints: ConstraintSet, initial_guess: AdmittanceState,
                      tol: float = RESIDUAL_TOL, max_iter: int = MAX_ITER,
                      system: Optional[System] = None) -> Tuple[AdmittanceState, VoltageSolution]:
    """Newton over the unknown admittances until every power constraint holds.

    A failed solve returns the last iterate with ``converged=False`` and status
    ``'max_iter'`` or ``'singular'``.
    """
    sysm = system if system is not None else System.build(net, constraints)
    x0 = sysm.unknowns_from(np.asarray(initial_guess, dtype=complex))
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial guess must be finite")
    x, V, status, it, rn = sysm.solve(x0, tol, max_iter)
    y = sysm.admittances(x)
    ok = status == kernels.CONVERGED
    return y, VoltageSolution(_full_voltages(net, V), float(rn), ok, STATUS_NAMES[status], it)


def constraint_jacobian(net: Network, constraints: ConstraintSet, state: AdmittanceState,
                        system: Optional[System] = None) -> np.ndarray:
    sysm = system if system is not None else System.build(net, constraints)
    _, _, J = sysm.evaluate(sysm.unknowns_from(np.asarray(state, dtype=complex)))
    return J


def jacobian_min_singular_value(net: Network, constraints: ConstraintSet, state: AdmittanceState,
                                system: Optional[System] = None) -> float:
    """Row-scaled smallest singular value of the constraint Jacobian; ~0 at branch endpoints."""
    try:
        J = constraint_jacobian(net, constraints, state, system)
    except np.linalg.LinAlgError:
        return 0.0
    return scaled_min_singular_value(J)


def bus_powers(net: Network, voltages: np.ndarray, admittances: AdmittanceState) -> np.ndarray:
    """Consumed complex power ``(g + jb)|V|^2`` per non-slack bus."""
    idx = [k - 1 for k in net.non_slack]
    return np.asarray(admittances) * np.abs(voltages[idx]) ** 2


def zero_state(net: Network) -> AdmittanceState:
    return np.zeros(len(net.non_slack), dtype=complex)


def admittances_from_voltages(net: Network, voltages: np.ndarray, Y: Optional[np.ndarray] = None) -> AdmittanceState:
    """Recover load admittances from a full voltage vector via KCL."""
    if Y is None:
        from .netmodel import build_admittance_matrix
        Y = build_admittance_matrix(net)
    idx = [k - 1 for k in net.non_slack]
    I = (Y @ voltages)[idx]
    shunt = -I / voltages[idx]
    return shunt.real - 1j * shunt.imag


def max_constraint_violation(net: Network, constraints: ConstraintSet, voltages: np.ndarray,
                             admittances: AdmittanceState) -> float:
    """Independent recomputation of every power constraint (no kernels involved)."""
    worst = 0.0
    for i, k in enumerate(net.non_slack):
        c = constraints.buses[k]
        vm = abs(voltages[k - 1])
        s = admittances[i] * vm * vm
        if isinstance(c, FixedAdmittance):
            worst = max(worst, abs(admittances[i] - complex(c.g, c.b)))
        elif isinstance(c, Linked):
            src = net.non_slack.index(c.source_bus)
            worst = max(worst, abs(admittances[i] - complex(c.g, c.b_ratio * admittances[src].imag)))
        elif isinstance(c, Free):
            t = constraints.target_power(k, vm)
            if c.variable == "g":
                worst = max(worst, abs(s.imag - t.imag), abs(admittances[i].real - c.value))
            else:
                worst = max(worst, abs(s.real - t.real), abs(admittances[i].imag - c.value))
        else:
            t = constraints.target_power(k, vm)
            worst = max(worst, abs(s.real - t.real), abs(s.imag - t.imag))
    return worst


def stack_guess(values: Sequence[complex]) -> AdmittanceState:
    return np.asarray(values, dtype=complex)
