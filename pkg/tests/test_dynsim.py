import numpy as np
import pytest

import oracle
from shared import DYNAMIC_CASES, equilibrium_near, model_and_equilibria
from voltmulti import cases
from voltmulti.dynsim import (
    ATOL,
    COLLAPSE_WINDOW,
    RTOL,
    Model,
    consistent_state,
    simulate,
    state_derivatives,
)
from voltmulti.events import Pulse
from voltmulti.stability import EQUILIBRIUM_TOL, equilibrium_state


def _t_end(evs):
    return max(20.0, 2 * max(e.t + getattr(e, "duration", 0.0) for e in evs)) if evs else 20.0


SCENARIOS = [(name, tl) for name in cases.case_names() for tl in cases.builtin_case(name).timelines]


@pytest.fixture(scope="module")
def scenario_runs():
    out = {}
    for name, tl in SCENARIOS:
        c = cases.builtin_case(name)
        evs = c.timelines[tl]
        model = Model(c.network)
        tr = simulate(c.network, evs, c.initial_admittances(), _t_end(evs), model=model,
                      stop_on_collapse=c.expected.get(tl) != "collapse")
        out[name, tl] = (c, model, tr)
    return out


# -- state derivatives --------------------------------------------------------

def test_derivatives_vanish_at_equilibrium():
    for name in DYNAMIC_CASES:
        net, model, known = model_and_equilibria(name)
        for e in known:
            st = consistent_state(model, equilibrium_state(model, e))
            assert np.max(np.abs(state_derivatives(net, st, model))) < EQUILIBRIUM_TOL


def test_conductance_rate_by_substitution():
    net, model, known = model_and_equilibria("three_bus_base")
    st = consistent_state(model, model.initial_state(known[0].admittances))
    cfg = model.base_config()
    g2 = st.dyn[0]
    tau1 = net.loads[2].tau1
    # choose the setpoint so that p = P_set + tau1
    cfg.p_set[2] = g2 * abs(st.voltages[1]) ** 2 - tau1
    assert state_derivatives(net, st, model, cfg)[0] == pytest.approx(-1.0, abs=1e-12)


def test_tap_rate_below_deadband():
    c = cases.builtin_case("ultc_deadband")
    model = Model(c.network)
    st = consistent_state(model, model.initial_state())
    st.voltages = st.voltages.copy()
    st.voltages[2] = 0.98
    assert state_derivatives(c.network, st, model)[-1] == -1.0


def test_inconsistent_state_rejected():
    c = cases.builtin_case("three_bus_base")
    model = Model(c.network)
    with pytest.raises(ValueError):
        state_derivatives(c.network, model.initial_state(), model)


# -- trajectory invariants ------------------------------------------------------

@pytest.mark.parametrize("name,tl", SCENARIOS)
def test_power_balance_every_sample(scenario_runs, name, tl):
    c, model, tr = scenario_runs[name, tl]
    assert tr.t.size > 1
    mismatch = tr.slack_power - (tr.p + 1j * tr.q).sum(axis=1) - tr.losses
    assert np.max(np.abs(mismatch)) <= 1e-6


@pytest.mark.parametrize("name,tl", SCENARIOS)
def test_samples_satisfy_independent_power_flow(scenario_runs, name, tl):
    c, model, tr = scenario_runs[name, tl]
    net = c.network
    for i in np.linspace(0, tr.t.size - 1, 12).astype(int):
        dyn, taps = model.unpack(tr.states[i])
        _, V, y = model.solve_algebraic(dyn, taps, {})
        ratio = dict(zip(net.tap_branches, taps))
        Y = oracle.ybus(net.n_buses, [(b.from_bus, b.to_bus, b.impedance, ratio.get(j, 1.0))
                                      for j, b in enumerate(net.branches)])
        drawn = oracle.consumed_power(Y, V)[1:]
        # load convention: (g + jb)|V|^2 is consumed
        assert np.max(np.abs(drawn - y * np.abs(V[1:]) ** 2)) <= 1e-6


@pytest.mark.parametrize("name,tl", SCENARIOS)
def test_time_grid(scenario_runs, name, tl):
    _, _, tr = scenario_runs[name, tl]
    d = np.diff(tr.t)
    assert np.all(d > 0)
    assert np.max(d) <= 0.01 + 1e-9


def test_stationary_at_stable_equilibria():
    for name in DYNAMIC_CASES:
        net, model, known = model_and_equilibria(name)
        for e in known:
            if not e.stable:
                continue
            tr = simulate(net, [], equilibrium_state(model, e), 10.0, model=model)
            assert tr.termination == "completed"
            assert np.max(np.abs(tr.states - tr.states[0])) <= 1e-6


def test_tolerance_refinement():
    c = cases.builtin_case("thirteen_bus")
    evs = c.timelines["entrapment"]
    a = simulate(c.network, evs, c.initial_admittances(), 20.0)
    b = simulate(c.network, evs, c.initial_admittances(), 20.0, rtol=RTOL / 2, atol=ATOL / 2)
    assert np.array_equal(a.t, b.t)
    assert np.max(np.abs(a.vm[:, 1] - b.vm[:, 1])) <= 1e-4


def test_zero_duration_pulse_is_no_event():
    c = cases.builtin_case("thirteen_bus")
    with_pulse = simulate(c.network, [Pulse(3.0, 2, 0.0, p=0.5)], c.initial_admittances(), 10.0)
    without = simulate(c.network, [], c.initial_admittances(), 10.0)
    assert np.array_equal(with_pulse.t, without.t)
    assert np.array_equal(with_pulse.states, without.states)
    assert np.array_equal(with_pulse.vm, without.vm)


def test_csv_export():
    c = cases.builtin_case("ultc_deadband")
    tr = simulate(c.network, [], None, 0.05)
    text = tr.to_csv()
    lines = text.split("\n")
    assert lines[0] == "t,V1,V2,V3,g2,g3,b2,b3,P2,P3,Q2,Q3,K1"
    assert "\r" not in text and lines[-1] == ""
    assert len(lines) == tr.t.size + 2
    assert float(lines[1].split(",")[0]) == 0.0


# -- built-in scenarios -------------------------------------------------------

def test_thirteen_bus_stays_at_high_equilibrium():
    c = cases.builtin_case("thirteen_bus")
    tr = simulate(c.network, [], c.initial_admittances(), 20.0)
    assert tr.termination == "completed"
    assert np.all(np.abs(tr.vm[:, 1] - 1.15) < 0.03)


@pytest.mark.xfail(strict=True, reason="the 0.1 s consumption pulse is too short to leave the high equilibrium's basin")
def test_thirteen_bus_pulse_entraps_at_low_equilibrium(scenario_runs):
    _, _, tr = scenario_runs["thirteen_bus", "entrapment"]
    assert abs(tr.vm[-1, 1] - 0.69) < 0.03


def test_three_bus_alt_fault_moves_to_low_equilibrium(scenario_runs):
    _, _, tr = scenario_runs["three_bus_alt", "fault"]
    assert tr.termination == "completed"
    high = equilibrium_near("three_bus_alt", 2, tr.vm[tr.at(9.9), 1])
    low = equilibrium_near("three_bus_alt", 2, tr.vm[-1, 1])
    assert high.stable and low.stable
    assert np.max(low.vm[1:]) < np.min(high.vm[1:]) - 0.5
    g3 = tr.column("g", 3)
    assert g3[tr.at(9.9)] == pytest.approx(high.admittances[1].real, abs=1e-4)
    assert g3[-1] == pytest.approx(low.admittances[1].real, abs=1e-4)
    # the fault shunt holds bus 3 near zero while it lasts
    assert tr.vm[tr.at(10.05), 2] < 0.05


def test_ultc_deadband_outcomes(scenario_runs):
    _, _, pulsed = scenario_runs["ultc_deadband", "pulse"]
    _, _, quiet = scenario_runs["ultc_deadband", "none"]
    assert pulsed.vm[-1, 2] == pytest.approx(0.993, abs=0.005)
    assert quiet.vm[-1, 2] == pytest.approx(1.009, abs=0.005)


def test_ultc_taplimit_reaches_lower_limit(scenario_runs):
    c, _, tr = scenario_runs["ultc_taplimit", "pulse"]
    dev = c.network.branches[c.network.tap_branches[0]].tap
    K = tr.taps[:, 0]
    during = (tr.t >= 2.4) & (tr.t <= 2.4 + 0.25 + 1e-9)
    assert np.min(K[during]) == pytest.approx(dev.k_min, abs=1e-9)
    assert abs(K[-1] - K[0]) > 1e-3
    assert np.all(K >= dev.k_min - 1e-9) and np.all(K <= dev.k_max + 1e-9)


def test_collapse_detected_and_run_stopped():
    c = cases.builtin_case("three_bus_alt")
    tr = simulate(c.network, c.timelines["lsivc"], None, 50.0)
    assert tr.termination == "collapse_detected"
    assert tr.collapse_time is not None and tr.collapse_time > 25.0
    assert tr.t[-1] < tr.collapse_time + 0.02
    low = np.min(tr.vm, axis=1) < 0.01
    assert np.sum(low) * 0.01 >= COLLAPSE_WINDOW - 0.011


def test_collapse_recorded_when_continuing(scenario_runs):
    _, _, tr = scenario_runs["three_bus_alt", "lsivc"]
    assert tr.termination == "collapse_detected"
    assert tr.t[-1] == pytest.approx(50.0)
