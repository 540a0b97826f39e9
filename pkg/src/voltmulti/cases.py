"""Built-in test networks and their scripted disturbance timelines."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .events import Event, LoadShed, Pulse, ShortCircuitFault
from .netmodel import (
    Branch,
    ConstantPower,
    DynamicAdmittance,
    Network,
    Polynomial,
    SlavedAdmittance,
    UltcDevice,
)

# Single-line per-unit equivalent of the 13-bus feeder.
THIRTEEN_BUS_BRANCHES: List[Tuple[int, int, complex]] = [
    (1, 4, 0.041 + 0.131j),
    (2, 3, 0.027 + 0.070j),
    (3, 4, 0.045 + 0.100j),
    (4, 5, 0.032 + 0.070j),
    (5, 6, 0.100 + 0.240j),
    (7, 8, 0.015 + 0.050j),
    (8, 9, 0.027 + 0.070j),
    (4, 9, 0.041 + 0.131j),
    (9, 10, 0.006 + 0.020j),
    (10, 11, 0.027 + 0.070j),
    (8, 12, 0.039 + 0.090j),
    (9, 13, 0.020 + 0.065j),
]

THIRTEEN_BUS_BASE_LOADS: Dict[int, Tuple[float, float]] = {
    3: (0.1, 0.1), 4: (0.1, 0.1), 5: (0.1, 0.1), 6: (0.1, 0.1),
    7: (0.5, 0.5), 8: (0.5, 0.3), 9: (0.0, -1.0), 10: (0.0, -1.0),
    11: (0.0, 0.0), 12: (0.0, -0.5), 13: (0.0, -1.0),
}


@dataclass
class Case:
    network: Network
    timelines: Dict[str, List[Event]] = field(default_factory=dict)
    notes: str = ""
    # starting admittances of dynamic buses (others start open-circuit)
    initial: Dict[int, complex] = field(default_factory=dict)
    free_bus: Optional[int] = None
    # timelines whose intended result is not a normal completion
    expected: Dict[str, str] = field(default_factory=dict)
    sweep_range: Optional[Tuple[float, float]] = None

    def initial_admittances(self):
        import numpy as np

        y = np.zeros(len(self.network.non_slack), dtype=complex)
        for bus, val in self.initial.items():
            y[self.network.non_slack.index(bus)] = val
        return y


def three_bus_base() -> Case:
    net = Network(
        3,
        [Branch(1, 2, 0.03 + 0.15j), Branch(2, 3, 0.33 + 1.65j)],
        {
            2: DynamicAdmittance(tau1=3.0, tau2=0.001, p_set=-3.284, q_set=-0.167),
            3: DynamicAdmittance(tau1=0.01, tau2=0.01, p_set=-0.189, q_set=-0.222),
        },
        name="three_bus_base",
    )
    return Case(
        net,
        {
            # partial loss of DG at t=15 s: bus 2 briefly consumes
            "loss_of_dg": [Pulse(15.0, 2, 0.1, p=0.5, q=0.1)],
            "loss_of_dg_then_small_pulse": [
                Pulse(15.0, 2, 0.1, p=0.5, q=0.1),
                Pulse(25.0, 2, 0.01, p=-3.286),
            ],
        },
        notes="Two stable equilibria near V2 = 1.012 and 0.560 p.u.",
    )


def three_bus_alt() -> Case:
    z = 0.1464 + 0.5160j
    net = Network(
        3,
        [Branch(1, 2, z), Branch(2, 3, z)],
        {
            2: DynamicAdmittance(tau1=0.07, tau2=0.07, p_set=-0.7, q_set=-0.9),
            3: DynamicAdmittance(tau1=0.03, tau2=0.03, p_set=-0.75, q_set=-0.45),
        },
        name="three_bus_alt",
    )
    fault = [ShortCircuitFault(10.0, 3, 0.08)]
    return Case(
        net,
        {
            "fault": fault,
            # shedding 0.2 p.u. at bus 2 pushes its net generation past the branch tip
            "lsivc": fault + [LoadShed(25.0, 2, 0.2)],
            "lsivc_control": fault + [LoadShed(25.0, 2, LSIVC_CONTROL_SHED)],
        },
        expected={"lsivc": "collapse"},
    )


# Half of the 0.031 p.u. margin between the entrapped generation (-0.7) and the branch tip.
LSIVC_CONTROL_SHED = 0.015


def three_bus_portrait() -> Case:
    z = 0.095 + 0.448j
    net = Network(
        3,
        [Branch(1, 2, z), Branch(2, 3, z)],
        {
            2: DynamicAdmittance(tau1=0.56, tau2=0.489, p_set=0.235, q_set=-0.145),
            3: SlavedAdmittance(g=-0.246, b_ratio=1.46, source_bus=2),
        },
        name="three_bus_portrait",
    )
    return Case(net, notes="Reduced two-state model: g3 fixed, b3 = 1.46 b2.")


def _zip(p0: float, q0: float) -> Polynomial:
    return Polynomial(p0, q0, aP=0.01, bP=0.01, cP=0.985, aQ=0.005, bQ=0.005, cQ=0.985)


def thirteen_bus() -> Case:
    loads = {2: DynamicAdmittance(tau1=0.01, tau2=0.01, p_set=-0.85, q_set=0.1)}
    for k, (p, q) in THIRTEEN_BUS_BASE_LOADS.items():
        loads[k] = _zip(p, q)
    net = Network(13, [Branch(f, t, z) for f, t, z in THIRTEEN_BUS_BRANCHES], loads, name="thirteen_bus")
    return Case(
        net,
        {
            # generation at bus 2 lost for 0.1 s: bus 2 consumes 0.5 p.u.
            "entrapment": [Pulse(3.0, 2, 0.1, p=0.5)],
            "entrapment_pecs": [Pulse(3.0, 2, 0.1, p=0.5), Pulse(11.0, 2, PECS_13BUS_DURATION, p=PECS_13BUS_P)],
        },
        initial={2: THIRTEEN_BUS_INITIAL},
    )


# Starting admittance of bus 2, placed at the high-voltage equilibrium.
THIRTEEN_BUS_INITIAL = -0.652 + 0.077j


# Curtailment pulse for the 13-bus recovery at t = 11 s: a cell well inside the
# recovering region of the search_pulse map started from the low equilibrium.
PECS_13BUS_P = 0.5
PECS_13BUS_DURATION = 0.1


def _ultc_load(y_mag: float, cos_phi: float) -> Polynomial:
    # lagging (inductive) constant-impedance load
    y = complex(y_mag * cos_phi, y_mag * math.sqrt(1.0 - cos_phi * cos_phi))
    return Polynomial(y.real, y.imag, aP=1.0, bP=0.0, cP=0.0, aQ=1.0, bQ=0.0, cQ=0.0)


def ultc_delta_y(mag: float, cos_phi: float) -> complex:
    """Admittance change of magnitude ``mag`` at the load's power-factor angle (consumption convention)."""
    return complex(mag * cos_phi, -mag * math.sqrt(1.0 - cos_phi * cos_phi))


ULTC_LEAKAGE = 0.001j
ULTC_DEADBAND = dict(y_mag=0.1, k0=0.9786, cos_phi=0.77, v1=1.01)
ULTC_TAPLIMIT = dict(y_mag=0.6, k0=0.88, cos_phi=0.8, v1=1.03)


def _ultc(name: str, y_mag: float, k0: float, cos_phi: float, v1: float) -> Network:
    dev = UltcDevice(k=k0, k_min=0.83, k_max=1.17, v_min=0.985, v_max=1.015, controlled_bus=3, rate=1.0)
    return Network(
        3,
        [Branch(1, 2, 0.069 + 0.258j), Branch(2, 3, ULTC_LEAKAGE, tap=dev)],
        {2: ConstantPower(0.0, 0.0), 3: _ultc_load(y_mag, cos_phi)},
        slack_voltage=complex(v1),
        name=name,
    )


def ultc_deadband() -> Case:
    p = ULTC_DEADBAND
    net = _ultc("ultc_deadband", p["y_mag"], p["k0"], p["cos_phi"], p["v1"])
    return Case(net, {"pulse": [Pulse(1.0, 3, 0.1, delta_y=ultc_delta_y(0.2, p["cos_phi"]))], "none": []})


def ultc_taplimit() -> Case:
    p = ULTC_TAPLIMIT
    net = _ultc("ultc_taplimit", p["y_mag"], p["k0"], p["cos_phi"], p["v1"])
    return Case(net, {"pulse": [Pulse(2.4, 3, 0.25, delta_y=ultc_delta_y(-0.6, p["cos_phi"]))], "none": []})


def switch_case() -> Case:
    # Both series lines carry z = 0.01 + j0.2; P3 is the swept quantity.
    z = 0.01 + 0.2j
    net = Network(
        3,
        [Branch(1, 2, z), Branch(2, 3, z)],
        {2: ConstantPower(0.1, 0.5), 3: ConstantPower(0.0, 0.0)},
        name="switch_case",
    )
    return Case(net, notes="Zero-power switch configurations; sweep P3 through g3.", free_bus=3,
                sweep_range=(-1e4, 1e4))


BUILDERS = {
    "three_bus_base": three_bus_base,
    "three_bus_alt": three_bus_alt,
    "three_bus_portrait": three_bus_portrait,
    "thirteen_bus": thirteen_bus,
    "ultc_deadband": ultc_deadband,
    "ultc_taplimit": ultc_taplimit,
    "switch_case": switch_case,
}


def builtin_case(name: str) -> Case:
    try:
        return BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown case {name!r}; choose from {', '.join(BUILDERS)}") from None


def case_names() -> List[str]:
    return list(BUILDERS)
