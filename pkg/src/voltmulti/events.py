"""Timeline disturbances applied during dynamic simulation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Union

DEFAULT_FAULT_ADMITTANCE = 1e3 - 1e3j


@dataclass(frozen=True)
class SetpointStep:
    t: float
    bus: int
    p: Optional[float] = None
    q: Optional[float] = None


@dataclass(frozen=True)
class Pulse:
    """Temporarily replace a bus's power setpoints, or add a shunt ``delta_y``.

    ``delta_y`` uses the load convention (``g + jb`` consumes ``(g + jb)|V|^2``).
    """

    t: float
    bus: int
    duration: float
    p: Optional[float] = None
    q: Optional[float] = None
    delta_y: Optional[complex] = None


@dataclass(frozen=True)
class ShortCircuitFault:
    """Physical shunt admittance to ground at ``bus`` for ``duration`` seconds."""

    t: float
    bus: int
    duration: float
    y_fault: complex = DEFAULT_FAULT_ADMITTANCE


@dataclass(frozen=True)
class LoadShed:
    """Permanently drop ``dp``/``dq`` of consumption at ``bus``."""

    t: float
    bus: int
    dp: float
    dq: float = 0.0


@dataclass(frozen=True)
class SetControllerMode:
    """Drive a dynamic load toward an admittance setpoint for ``duration`` seconds."""

    t: float
    bus: int
    duration: float
    g_set: float
    b_set: float
    tau_g: float
    tau_b: float


Event = Union[SetpointStep, Pulse, ShortCircuitFault, LoadShed, SetControllerMode]

EVENT_KINDS = {
    "setpoint_step": SetpointStep,
    "pulse": Pulse,
    "fault": ShortCircuitFault,
    "load_shed": LoadShed,
    "controller_mode": SetControllerMode,
}


def event_kind(ev: Event) -> str:
    for name, cls in EVENT_KINDS.items():
        if isinstance(ev, cls):
            return name
    raise TypeError(f"not an event: {ev!r}")


def validate_timeline(events: List[Event]) -> List[str]:
    out = []
    for i, ev in enumerate(events):
        if getattr(ev, "duration", 0.0) < 0:
            out.append(f"event {i} has negative duration")
        if ev.t < 0:
            out.append(f"event {i} starts before t=0")
    return out
