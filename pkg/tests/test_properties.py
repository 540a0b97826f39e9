"""Randomized invariants over generated networks, states and solution sets."""
import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracle
from voltmulti.algebraic import solve_voltages_linear
from voltmulti.dynsim import Trajectory
from voltmulti.homotopy import DEDUP_TOL, dedup_solutions, find_all_solutions, two_bus_closed_form, two_bus_network
from voltmulti.netmodel import Branch, ConstantPower, Network, UltcDevice, build_admittance_matrix
from voltmulti.pecs import DetectorConfig, detect_entrapment
from voltmulti.scenario import parse_scenario, scenario_to_yaml
from voltmulti.stability import Equilibrium, classify

impedances = st.builds(complex, st.floats(0.001, 0.5), st.floats(0.01, 1.0))


@st.composite
def radial_networks(draw, max_buses=6):
    n = draw(st.integers(2, max_buses))
    branches = []
    for k in range(2, n + 1):
        parent = draw(st.integers(1, k - 1))
        tap = None
        if draw(st.booleans()) and k == n:
            tap = UltcDevice(k=draw(st.floats(0.85, 1.15)), k_min=0.8, k_max=1.2, v_min=0.98, v_max=1.02,
                             controlled_bus=k, rate=1.0)
        branches.append(Branch(parent, k, draw(impedances), tap=tap))
    loads = {k: ConstantPower(draw(st.floats(-1, 1)), draw(st.floats(-1, 1))) for k in range(2, n + 1)}
    return Network(n, branches, loads)


@settings(max_examples=60, deadline=None)
@given(net=radial_networks())
def test_admittance_matrix_matches_oracle(net):
    Y = build_admittance_matrix(net)
    ref = oracle.ybus(net.n_buses, oracle.network_branches(net))
    assert np.allclose(Y, ref, rtol=1e-12, atol=1e-12)
    assert np.array_equal(Y, Y.T)


@settings(max_examples=60, deadline=None)
@given(net=radial_networks(), seed=st.integers(0, 2 ** 32 - 1))
def test_linear_solve_satisfies_kcl(net, seed):
    rng = np.random.default_rng(seed)
    y = rng.uniform(-2, 2, net.n_buses - 1) + 1j * rng.uniform(-2, 2, net.n_buses - 1)
    sol = solve_voltages_linear(net, y)
    assume(sol.converged)
    drawn = oracle.consumed_power(build_admittance_matrix(net), sol.voltages)[1:]
    scale = max(1.0, float(np.max(np.abs(sol.voltages))) ** 2 * float(np.max(np.abs(y))))
    assert np.max(np.abs(drawn - y * np.abs(sol.voltages[1:]) ** 2)) < 1e-9 * scale


@settings(max_examples=25, deadline=None)
@given(r=st.floats(0.01, 0.5), x=st.floats(0.01, 0.5), p=st.floats(-2, 2), q=st.floats(-1, 1))
def test_two_bus_solution_sets_match_closed_form(r, x, p, q):
    closed = sorted(two_bus_closed_form(r, x, p, q))
    assume(closed)
    sols = find_all_solutions(two_bus_network(r, x, p, q))
    got = sorted(abs(s.voltages[1]) for _, s in sols)
    assert len(got) == len(closed)
    assert np.allclose(got, closed, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(r=st.floats(0.0, 0.5), x=st.floats(0.01, 0.5), p=st.floats(-2, 2), q=st.floats(-1, 1))
def test_closed_form_roots_solve_power_flow(r, x, p, q):
    # every closed-form magnitude is realized by some voltage phasor drawing exactly (p, q)
    Y = oracle.ybus(2, [(1, 2, complex(r, x), 1.0)])
    for vm in two_bus_closed_form(r, x, p, q):
        if vm < 1e-9:
            continue
        y = complex(p, q) / vm ** 2
        V = solve_voltages_linear(two_bus_network(r, x, p, q), np.array([y])).voltages
        assert abs(abs(V[1]) - vm) < 1e-8
        assert abs(oracle.consumed_power(Y, V)[1] - complex(p, q)) < 1e-8


class _Sol:
    def __init__(self, v):
        self.voltages = v


@settings(max_examples=60, deadline=None)
@given(points=st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=12),
       jitter=st.floats(0, DEDUP_TOL / 4))
def test_dedup_properties(points, jitter):
    sols = [(np.array([complex(a, b)]), _Sol(np.array([1.0, complex(a, b)]))) for a, b in points]
    noisy = sols + [(y + jitter, _Sol(s.voltages + jitter)) for y, s in sols]
    once = dedup_solutions(noisy)
    assert len(dedup_solutions(once)) == len(once)
    for i in range(len(once)):
        for j in range(i + 1, len(once)):
            assert np.max(np.abs(once[i][1].voltages - once[j][1].voltages)) >= DEDUP_TOL
    # every input lies within tolerance of a kept representative
    for _, s in noisy:
        assert min(np.max(np.abs(s.voltages - k[1].voltages)) for k in once) < 2 * DEDUP_TOL


@given(re=st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_classification_rule(re):
    eig = np.array(re) + 1j
    tag = classify(eig)
    if tag == "stable":
        assert np.all(np.array(re) < -1e-6)
    elif tag == "unstable":
        assert np.any(np.array(re) > 1e-6) and np.all(np.abs(re) > 1e-6)
    else:
        assert np.any(np.abs(re) <= 1e-6)


@given(v=st.floats(0.5, 1.5), k=st.floats(0.83, 1.17))
def test_tap_rate_rule(v, k):
    dev = UltcDevice(k=k, k_min=0.83, k_max=1.17, v_min=0.985, v_max=1.015, controlled_bus=3, rate=1.0)
    rate = dev.tap_rate(v, k)
    assert rate in (-1.0, 0.0, 1.0)
    if 0.985 <= v <= 1.015:
        assert rate == 0.0
    if rate < 0:
        assert v < 0.985 and k > 0.83
    if rate > 0:
        assert v > 1.015 and k < 1.17


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), steps=st.integers(2, 400))
def test_detector_silent_inside_normal_band(seed, steps):
    rng = np.random.default_rng(seed)
    n = 4
    t = np.arange(steps) * 0.01
    vm = np.column_stack([np.ones(steps)] + [rng.uniform(0.9, 1.1) + np.zeros(steps) for _ in range(n - 1)])
    g = np.zeros((steps, n - 1))
    tr = Trajectory("synthetic", [2, 3, 4], [2], t, vm, g, g, g, g, np.zeros((steps, 0)), np.zeros(steps),
                    np.zeros(steps), np.zeros((steps, 2)))
    low = Equilibrium(np.zeros(3, dtype=complex), np.array([1, 0.5, 0.5, 0.5], dtype=complex), np.array([-1.0]),
                      "stable", label="E2")
    high = Equilibrium(np.zeros(3, dtype=complex), vm[0].astype(complex), np.array([-1.0]), "stable", label="E1")
    assert detect_entrapment(tr, DetectorConfig(), [high, low]) is None


@settings(max_examples=40, deadline=None)
@given(net=radial_networks())
def test_scenario_round_trip(net):
    assert parse_scenario(scenario_to_yaml(net)).network == net
