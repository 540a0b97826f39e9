"""YAML scenario files: network, disturbance timeline and run settings.

Example::

    network:
      case: three_bus_base          # start from a built-in case, or give the
                                    # fields below explicitly
      n_buses: 3
      slack_voltage: [1.0, 0.0]
      branches:
        - {from: 1, to: 2, r: 0.03, x: 0.15}
      loads:
        2: {type: dynamic, tau1: 3.0, tau2: 0.001, p_set: -3.284, q_set: -0.167}
    timeline:
      - {type: pulse, t: 15.0, bus: 2, duration: 0.1, p: 0.5, q: 0.1}
    run:
      command: simulate
      t_end: 40
      output_interval: 0.01
      initial: {2: [-3.2, -0.16]}

Complex values are written as ``[real, imag]``.  Every parse or schema error
is reported with the line number it refers to.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .cases import Case, builtin_case
from .events import EVENT_KINDS, Event, event_kind, validate_timeline
from .netmodel import LOAD_KINDS, Branch, Network, UltcDevice, load_kind, validate_network


class ScenarioError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class _Map(dict):
    line: Optional[int] = None


class _Seq(list):
    line: Optional[int] = None


class _LineLoader(yaml.SafeLoader):
    def construct_mapping(self, node, deep=False):
        out = _Map(super().construct_mapping(node, deep=True))
        out.line = node.start_mark.line + 1
        out.key_lines = {self.construct_object(k): k.start_mark.line + 1 for k, _ in node.value}
        return out

    def construct_sequence(self, node, deep=False):
        out = _Seq(super().construct_sequence(node, deep=True))
        out.line = node.start_mark.line + 1
        return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _LineLoader.construct_mapping)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _LineLoader.construct_sequence)


@dataclass
class RunSettings:
    command: Optional[str] = None
    t_end: Optional[float] = None
    output_interval: Optional[float] = None
    tol: Optional[float] = None
    initial: Dict[int, complex] = field(default_factory=dict)
    free_bus: Optional[int] = None
    expect: Optional[str] = None     # "collapse" marks a run whose collapse is the intended result
    sweep_range: Optional[Tuple[float, float]] = None


@dataclass
class Scenario:
    network: Network
    timeline: List[Event]
    run: RunSettings
    case: Optional[Case] = None


def _line(obj, key=None) -> Optional[int]:
    if key is not None and isinstance(obj, _Map):
        return getattr(obj, "key_lines", {}).get(key, obj.line)
    return getattr(obj, "line", None)


def _complex(v, where, line) -> complex:
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, list) and len(v) == 2 and all(isinstance(a, (int, float)) for a in v):
        return complex(v[0], v[1])
    raise ScenarioError(f"{where} must be a number or [real, imag]", line)


def _number(m, key, where, default=None, required=True):
    if key not in m:
        if required and default is None:
            raise ScenarioError(f"{where} is missing '{key}'", _line(m))
        return default
    v = m[key]
    if v is None and not required:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}: '{key}' must be a number", _line(m, key))
    return float(v)


def _int(m, key, where):
    if key not in m:
        raise ScenarioError(f"{where} is missing '{key}'", _line(m))
    v = m[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(f"{where}: '{key}' must be an integer", _line(m, key))
    return v


def _check_keys(m, allowed, where):
    for k in m:
        if k not in allowed:
            raise ScenarioError(f"{where}: unknown key '{k}'", _line(m, k))


def _dataclass_from(cls, m, where, skip=("type",), ints=(), complexes=()):
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(m, set(names) | set(skip), where)
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in m:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ScenarioError(f"{where} is missing '{f.name}'", _line(m))
            continue
        if f.name in ints:
            kw[f.name] = _int(m, f.name, where)
        elif f.name in complexes:
            kw[f.name] = None if m[f.name] is None else _complex(m[f.name], f"{where}: '{f.name}'", _line(m, f.name))
        else:
            kw[f.name] = _number(m, f.name, where, required=False)
    return cls(**kw)


def _parse_branch(m, i) -> Branch:
    where = f"branch {i}"
    if not isinstance(m, dict):
        raise ScenarioError(f"{where} must be a mapping", None)
    _check_keys(m, {"from", "to", "r", "x", "tap"}, where)
    tap = None
    if m.get("tap") is not None:
        t = m["tap"]
        if not isinstance(t, dict):
            raise ScenarioError(f"{where}: 'tap' must be a mapping", _line(m, "tap"))
        tap = _dataclass_from(UltcDevice, t, f"{where} tap", skip=(), ints=("controlled_bus",))
    return Branch(_int(m, "from", where), _int(m, "to", where),
                  complex(_number(m, "r", where), _number(m, "x", where)), tap)


def _parse_load(m, bus, line):
    where = f"load at bus {bus}"
    if not isinstance(m, dict):
        raise ScenarioError(f"{where} must be a mapping", line)
    kind = m.get("type")
    if kind not in LOAD_KINDS:
        raise ScenarioError(f"{where}: unknown type {kind!r}; must be one of {', '.join(LOAD_KINDS)}", _line(m, "type"))
    return _dataclass_from(LOAD_KINDS[kind], m, where, ints=("source_bus",))


def _parse_event(m, i) -> Event:
    where = f"event {i}"
    if not isinstance(m, dict):
        raise ScenarioError(f"{where} must be a mapping", None)
    kind = m.get("type")
    if kind not in EVENT_KINDS:
        raise ScenarioError(f"{where}: unknown type {kind!r}; must be one of {', '.join(EVENT_KINDS)}", _line(m, "type") or _line(m))
    return _dataclass_from(EVENT_KINDS[kind], m, where, ints=("bus",), complexes=("delta_y", "y_fault"))


def _parse_network(m):
    where = "network"
    if not isinstance(m, dict):
        raise ScenarioError("'network' must be a mapping", _line(m))
    _check_keys(m, {"case", "name", "n_buses", "slack_bus", "slack_voltage", "branches", "loads"}, where)
    case = None
    if "case" in m:
        try:
            case = builtin_case(str(m["case"]))
        except KeyError as exc:
            raise ScenarioError(str(exc.args[0]), _line(m, "case")) from None
        base = case.network
        if not any(k in m for k in ("n_buses", "branches", "loads", "slack_voltage", "slack_bus")):
            return base, case
    else:
        base = None
    n = _int(m, "n_buses", where) if "n_buses" in m or base is None else base.n_buses
    slack = _int(m, "slack_bus", where) if "slack_bus" in m else (base.slack_bus if base else 1)
    sv = _complex(m["slack_voltage"], "slack_voltage", _line(m, "slack_voltage")) if "slack_voltage" in m \
        else (base.slack_voltage if base else 1.0 + 0j)
    if "branches" in m:
        if not isinstance(m["branches"], list):
            raise ScenarioError("'branches' must be a list", _line(m, "branches"))
        branches = []
        for i, b in enumerate(m["branches"]):
            try:
                branches.append(_parse_branch(b, i))
            except ScenarioError as exc:
                if exc.line is None:
                    raise ScenarioError(str(exc), _line(m["branches"])) from None
                raise
    elif base is not None:
        branches = list(base.branches)
    else:
        raise ScenarioError("network is missing 'branches'", _line(m))
    loads = dict(base.loads) if base is not None else {}
    if "loads" in m:
        lm = m["loads"]
        if not isinstance(lm, dict):
            raise ScenarioError("'loads' must be a mapping of bus -> load", _line(m, "loads"))
        loads = {}
        for bus, spec in lm.items():
            line = _line(lm, bus)
            if isinstance(bus, bool) or not isinstance(bus, int):
                raise ScenarioError(f"load key {bus!r} must be a bus number", line)
            loads[bus] = _parse_load(spec, bus, line)
    name = str(m.get("name", base.name if base else "scenario"))
    net = Network(n, branches, loads, slack, sv, name)
    return net, case


def parse_scenario(text: str) -> Scenario:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ScenarioError(exc.problem or str(exc), mark.line + 1 if mark else None) from None
    except yaml.YAMLError as exc:
        raise ScenarioError(str(exc)) from None
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a mapping with a 'network' section", 1)
    _check_keys(doc, {"network", "timeline", "run"}, "scenario")
    if "network" not in doc:
        raise ScenarioError("scenario is missing the 'network' section", 1)
    net, case = _parse_network(doc["network"])
    problems = validate_network(net)
    if problems:
        raise ScenarioError("invalid network: " + "; ".join(problems), _line(doc, "network"))

    timeline: List[Event] = []
    tl = doc.get("timeline") or []
    if not isinstance(tl, list):
        raise ScenarioError("'timeline' must be a list of events", _line(doc, "timeline"))
    for i, ev in enumerate(tl):
        try:
            e = _parse_event(ev, i)
        except ScenarioError as exc:
            if exc.line is None:
                raise ScenarioError(str(exc), _line(tl)) from None
            raise
        if e.bus not in net.non_slack:
            raise ScenarioError(f"event {i} refers to bus {e.bus}, which is not a load bus", _line(ev, "bus"))
        timeline.append(e)
    bad = validate_timeline(timeline)
    if bad:
        raise ScenarioError("; ".join(bad), _line(tl))

    run = RunSettings()
    rm = doc.get("run") or _Map()
    if not isinstance(rm, dict):
        raise ScenarioError("'run' must be a mapping", _line(doc, "run"))
    _check_keys(rm, {"command", "t_end", "output_interval", "tol", "initial", "free_bus", "expect", "sweep_range"}, "run")
    run.command = rm.get("command")
    run.expect = rm.get("expect")
    if run.expect not in (None, "collapse", "completed"):
        raise ScenarioError("'expect' must be 'collapse' or 'completed'", _line(rm, "expect"))
    run.t_end = _number(rm, "t_end", "run", required=False)
    run.output_interval = _number(rm, "output_interval", "run", required=False)
    run.tol = _number(rm, "tol", "run", required=False)
    if "free_bus" in rm:
        run.free_bus = _int(rm, "free_bus", "run")
    init = rm.get("initial") or {}
    if not isinstance(init, dict):
        raise ScenarioError("'initial' must map bus -> [g, b]", _line(rm, "initial"))
    for bus, v in init.items():
        if bus not in net.non_slack:
            raise ScenarioError(f"initial admittance for unknown load bus {bus}", _line(init, bus))
        run.initial[bus] = _complex(v, f"initial admittance of bus {bus}", _line(init, bus))
    if not run.initial and case is not None:
        run.initial = dict(case.initial)
    if "sweep_range" in rm:
        sr = rm["sweep_range"]
        if not (isinstance(sr, list) and len(sr) == 2 and all(isinstance(v, (int, float)) for v in sr)
                and sr[0] < sr[1]):
            raise ScenarioError("'sweep_range' must be [lo, hi] with lo < hi", _line(rm, "sweep_range"))
        run.sweep_range = (float(sr[0]), float(sr[1]))
    if run.free_bus is None and case is not None:
        run.free_bus = case.free_bus
    if run.sweep_range is None and case is not None:
        run.sweep_range = case.sweep_range
    return Scenario(net, timeline, run, case)


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------------------
# export


def _plain(v):
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


def _record(obj, kind: Optional[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {"type": kind} if kind else {}
    for f in dataclasses.fields(obj):
        out[f.name] = _plain(getattr(obj, f.name))
    return out


def network_to_dict(net: Network) -> Dict[str, Any]:
    branches = []
    for br in net.branches:
        b = {"from": br.from_bus, "to": br.to_bus, "r": br.impedance.real, "x": br.impedance.imag}
        if br.tap is not None:
            b["tap"] = _record(br.tap, None)
        branches.append(b)
    return {
        "name": net.name,
        "n_buses": net.n_buses,
        "slack_bus": net.slack_bus,
        "slack_voltage": _plain(complex(net.slack_voltage)),
        "branches": branches,
        "loads": {k: _record(v, load_kind(v)) for k, v in sorted(net.loads.items())},
    }


def scenario_to_yaml(net: Network, timeline: List[Event] = (), run: Optional[RunSettings] = None) -> str:
    doc: Dict[str, Any] = {"network": network_to_dict(net)}
    doc["timeline"] = [_record(e, event_kind(e)) for e in timeline]
    if run is not None:
        r = {k: v for k, v in dataclasses.asdict(run).items() if v not in (None, {})}
        if "sweep_range" in r:
            r["sweep_range"] = list(r["sweep_range"])
        if "initial" in r:
            r["initial"] = {k: _plain(complex(v)) for k, v in r["initial"].items()}
        doc["run"] = r
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------------------
# annotated examples of the built-in scenarios

SCHEMA_NOTES = """\
# network:
#   name, n_buses, slack_bus (default 1), slack_voltage [re, im]
#   branches: list of {from, to, r, x} plus an optional tap changer
#     tap: {k, k_min, k_max, v_min, v_max, controlled_bus, rate}
#   loads: bus -> {type, ...}; one entry per non-slack bus
#     dynamic             tau1, tau2, p_set, q_set  (negative power = generation)
#     impedance_setpoint  tau_g, tau_b, g_set, b_set
#     polynomial          p0, q0, aP, bP, cP, aQ, bQ, cQ  (ZIP coefficients)
#     constant_power      p, q
#     slaved              g, b_ratio, source_bus  (b follows b_ratio * b of source_bus)
#   Instead of the fields above, `case: <name>` loads a built-in network;
#   any field given next to it overrides the built-in value.
# timeline: list of events, times in seconds
#   pulse            t, bus, duration, p, q, delta_y [g, b]  (temporary setpoints or shunt)
#   fault            t, bus, duration, y_fault [g, b]
#   load_shed        t, bus, dp, dq                          (permanent)
#   setpoint_step    t, bus, p, q                            (permanent)
#   controller_mode  t, bus, duration, g_set, b_set, tau_g, tau_b
# run: command, t_end, output_interval, tol, free_bus, sweep_range [lo, hi],
#   expect (collapse | completed),
#   initial: bus -> [g, b] starting admittance of dynamic buses
"""

SCENARIO_RUNS = {
    "loss_of_dg": ("simulate", 40.0),
    "loss_of_dg_then_small_pulse": ("simulate", 40.0),
    "fault": ("simulate", 40.0),
    "lsivc": ("simulate", 40.0),
    "lsivc_control": ("simulate", 40.0),
    "entrapment": ("simulate", 10.0),
    "entrapment_pecs": ("simulate", 20.0),
    "pulse": ("simulate", 20.0),
    "none": ("simulate", 20.0),
}

STATIC_RUNS = {"three_bus_portrait": "portrait", "switch_case": "trace"}


def builtin_scenario_files() -> Dict[str, str]:
    """File name -> annotated YAML for every built-in scenario (cases without timelines get one file)."""
    from .cases import case_names

    files: Dict[str, str] = {}
    for name in case_names():
        case = builtin_case(name)
        items = list(case.timelines.items()) or [(None, [])]
        for tl_name, timeline in items:
            if tl_name is None:
                run = RunSettings(command=STATIC_RUNS.get(name, "solve"), free_bus=case.free_bus,
                                  sweep_range=case.sweep_range)
                fname = f"{name}.yaml"
                what = f"network {name}, static analysis"
            else:
                command, t_end = SCENARIO_RUNS[tl_name]
                run = RunSettings(command=command, t_end=t_end, output_interval=0.01,
                                  initial=dict(case.initial), free_bus=case.free_bus,
                                  expect=case.expected.get(tl_name))
                fname = f"{name}-{tl_name}.yaml"
                what = f"network {name}, timeline {tl_name}"
            head = f"# {what}\n# run: voltmulti --scenario-file {fname}\n"
            if case.notes:
                head += f"# {case.notes}\n"
            files[fname] = head + "#\n" + SCHEMA_NOTES + "\n" + scenario_to_yaml(case.network, timeline, run)
    return files
