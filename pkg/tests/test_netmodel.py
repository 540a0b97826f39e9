import numpy as np
import pytest

from voltmulti import cases
from voltmulti.netmodel import (
    Branch,
    ConstantPower,
    DynamicAdmittance,
    Network,
    Polynomial,
    UltcDevice,
    build_admittance_matrix,
    validate_network,
)


def two_bus(z=0.03 + 0.15j):
    return Network(2, [Branch(1, 2, z)], {2: ConstantPower(0.0, 0.0)})


def test_two_bus_off_diagonal_is_negative_reciprocal():
    Y = build_admittance_matrix(two_bus())
    # 1/(0.03+0.15j) = (0.03-0.15j)/(0.03^2+0.15^2)
    denom = 0.03 ** 2 + 0.15 ** 2
    expected = -complex(0.03 / denom, -0.15 / denom)
    assert Y[0, 1] == pytest.approx(expected, abs=1e-12)
    assert Y[0, 1] == pytest.approx(-(1.282051282 - 6.410256410j), abs=1e-8)


def test_rows_sum_to_zero_without_shunts():
    for name in ("three_bus_base", "thirteen_bus", "switch_case"):
        Y = build_admittance_matrix(cases.builtin_case(name).network)
        assert np.max(np.abs(Y.sum(axis=1))) < 1e-12


def test_thirteen_bus_entry_one_four():
    Y = build_admittance_matrix(cases.builtin_case("thirteen_bus").network)
    assert Y.shape == (13, 13)
    assert Y[0, 3] == pytest.approx(-1 / (0.041 + 0.131j), abs=1e-12)


def test_matrix_is_deterministic_and_symmetric():
    net = cases.builtin_case("thirteen_bus").network
    a, b = build_admittance_matrix(net), build_admittance_matrix(net)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(a, a.T)


def test_tap_stamp_matches_two_port_of_ideal_ratio():
    dev = UltcDevice(k=0.9, k_min=0.8, k_max=1.2, v_min=0.98, v_max=1.02, controlled_bus=2, rate=1.0)
    z = 0.01 + 0.1j
    net = Network(2, [Branch(1, 2, z, tap=dev)], {2: ConstantPower(0.0, 0.0)})
    Y = build_admittance_matrix(net)
    y = 1 / z
    # currents for V1 = k, V2 = 1 (no-load ideal ratio) must vanish
    I = Y @ np.array([0.9, 1.0])
    assert np.max(np.abs(I)) < 1e-12
    assert Y[1, 1] == pytest.approx(y)
    assert Y[0, 0] == pytest.approx(y / 0.81)
    assert Y[0, 1] == pytest.approx(-y / 0.9)
    # override through the tap_ratios argument
    Y2 = build_admittance_matrix(net, {0: 1.0})
    assert Y2[0, 0] == pytest.approx(y)


def test_zero_impedance_rejected():
    with pytest.raises(ValueError):
        build_admittance_matrix(two_bus(0j))


def test_builtin_cases_validate():
    for name in cases.case_names():
        assert validate_network(cases.builtin_case(name).network) == []


def test_seven_builtin_cases():
    assert cases.case_names() == ["three_bus_base", "three_bus_alt", "three_bus_portrait", "thirteen_bus",
                                  "ultc_deadband", "ultc_taplimit", "switch_case"]


def test_unknown_case_rejected():
    with pytest.raises(KeyError):
        cases.builtin_case("nope")


def test_disconnected_bus_reported():
    net = Network(3, [Branch(1, 2, 0.1j)], {2: ConstantPower(0, 0), 3: ConstantPower(0, 0)})
    problems = validate_network(net)
    assert len(problems) == 1 and "unreachable" in problems[0]


def test_zip_sum_violation_reported():
    net = Network(2, [Branch(1, 2, 0.1j)], {2: Polynomial(1.0, 0.5, aP=0.3, bP=0.3, cP=0.3)})
    problems = validate_network(net)
    assert len(problems) == 1 and "ZIP coefficient sum" in problems[0]


def test_other_invariants_reported():
    bad_tau = Network(2, [Branch(1, 2, 0.1j)], {2: DynamicAdmittance(0.0, 1.0, 0.1, 0.1)})
    assert any("time constant" in p for p in validate_network(bad_tau))
    missing = Network(3, [Branch(1, 2, 0.1j), Branch(2, 3, 0.1j)], {2: ConstantPower(0, 0)})
    assert any("no load" in p for p in validate_network(missing))
    nan = Network(2, [Branch(1, 2, complex(np.nan, 0.1))], {2: ConstantPower(0, 0)})
    assert validate_network(nan)
    dev = UltcDevice(k=1.5, k_min=0.8, k_max=1.2, v_min=0.98, v_max=1.02, controlled_bus=2, rate=1.0)
    tap = Network(2, [Branch(1, 2, 0.1j, tap=dev)], {2: ConstantPower(0, 0)})
    assert validate_network(tap)


def test_three_bus_base_parameters():
    net = cases.builtin_case("three_bus_base").network
    assert net.branches[0].impedance == 0.03 + 0.15j
    assert net.branches[1].impedance == 0.33 + 1.65j
    b2, b3 = net.loads[2], net.loads[3]
    assert (b2.p_set, b2.q_set, b2.tau1, b2.tau2) == (-3.284, -0.167, 3.0, 0.001)
    assert (b3.p_set, b3.q_set, b3.tau1, b3.tau2) == (-0.189, -0.222, 0.01, 0.01)


def test_thirteen_bus_loads():
    net = cases.builtin_case("thirteen_bus").network
    assert (net.loads[2].p_set, net.loads[2].q_set) == (-0.85, 0.1)
    ld = net.loads[13]
    assert (ld.p0, ld.q0) == (0.0, -1.0)
    assert (ld.aP, ld.bP, ld.cP, ld.aQ, ld.bQ, ld.cQ) == (0.01, 0.01, 0.985, 0.005, 0.005, 0.985)
    assert len(net.branches) == 12


def test_ultc_deadband_parameters():
    net = cases.builtin_case("ultc_deadband").network
    dev = net.branches[net.tap_branches[0]].tap
    assert (dev.v_min, dev.v_max, dev.k_min, dev.k_max) == (0.985, 1.015, 0.83, 1.17)
    assert net.branches[0].impedance == 0.069 + 0.258j
    assert net.slack_voltage == 1.01
    assert cases.ULTC_DEADBAND["cos_phi"] == 0.77


def test_switch_case_lines():
    net = cases.builtin_case("switch_case").network
    assert [b.impedance for b in net.branches] == [0.01 + 0.2j, 0.01 + 0.2j]


def test_tap_rate_rule():
    dev = UltcDevice(k=1.0, k_min=0.83, k_max=1.17, v_min=0.985, v_max=1.015, controlled_bus=3, rate=1.0)
    assert dev.tap_rate(0.98) == -1.0
    assert dev.tap_rate(1.02) == 1.0
    assert dev.tap_rate(1.0) == 0.0
    assert dev.tap_rate(0.98, k=0.83) == 0.0
    assert dev.tap_rate(1.02, k=1.17) == 0.0
