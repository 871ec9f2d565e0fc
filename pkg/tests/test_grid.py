import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaclr.grid import (IEEE13_PRIORITIES, Der, DerFleet, GridError, GridSystem, Line, Load, LoadSet,
                          NetworkModel, load_system, save_system, solve_power_flow, system_from_dict,
                          system_to_dict, voltage_penalty)
from oracles import dense_lindistflow, random_radial


def two_bus():
    return NetworkModel(("a", "b"), "a", (Line("a", "b", 0.01, 0.02),))


def test_two_bus_example():
    v = solve_power_flow(two_bus(), [0.0, -100.0], [0.0, -50.0])
    assert v[1] == pytest.approx(0.996, abs=1e-12)
    np.testing.assert_allclose(v, dense_lindistflow(two_bus(), [0, -100.0], [0, -50.0]), atol=1e-12)


def test_zero_injection_fixed_point(ieee13):
    v = solve_power_flow(ieee13.network, np.zeros(13), np.zeros(13))
    assert np.all(v == ieee13.network.root_voltage)


@pytest.mark.parametrize("seed", range(10))
def test_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    net = random_radial(int(rng.integers(4, 31)), rng)
    p, q = rng.normal(0, 200, net.n_buses), rng.normal(0, 100, net.n_buses)
    np.testing.assert_allclose(solve_power_flow(net, p, q), dense_lindistflow(net, p, q), atol=1e-9, rtol=0)


def test_eight_bus_oracle():
    rng = np.random.default_rng(8)
    net = random_radial(8, rng)
    p, q = rng.normal(0, 150, 8), rng.normal(0, 80, 8)
    assert np.max(np.abs(solve_power_flow(net, p, q) - dense_lindistflow(net, p, q))) < 1e-9


def test_sensitivity_matches_recursion(ieee13, rng):
    net = ieee13.network
    p, q = rng.normal(0, 100, 13), rng.normal(0, 50, 13)
    p[net.index[net.root]] = q[net.index[net.root]] = 0.0
    rs, xs = net.voltage_sensitivity
    v = net.root_voltage - 2 * (rs @ (-p / net.base_kva) + xs @ (-q / net.base_kva))
    np.testing.assert_allclose(v, solve_power_flow(net, p, q), atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_superposition(seed, a, b):
    rng = np.random.default_rng(seed)
    net = random_radial(int(rng.integers(3, 12)), rng)
    x = rng.normal(0, 100, (2, net.n_buses))
    y = rng.normal(0, 100, (2, net.n_buses))
    lhs = solve_power_flow(net, a * x[0] + b * y[0], a * x[1] + b * y[1])
    rhs = (a * solve_power_flow(net, *x) + b * solve_power_flow(net, *y)
           - (a + b - 1) * net.root_voltage)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_batched_injections(ieee13, rng):
    net = ieee13.network
    p, q = rng.normal(0, 50, (13, 5)), rng.normal(0, 50, (13, 5))
    batch = solve_power_flow(net, p, q)
    for k in range(5):
        np.testing.assert_allclose(batch[:, k], solve_power_flow(net, p[:, k], q[:, k]), atol=1e-14)


def test_bad_injections(ieee13):
    with pytest.raises(GridError):
        solve_power_flow(ieee13.network, np.zeros(12), np.zeros(12))
    with pytest.raises(GridError):
        solve_power_flow(ieee13.network, np.full(13, np.nan), np.zeros(13))


def test_voltage_penalty_examples():
    net = two_bus()
    assert voltage_penalty([1.0, 1.0], net, 1e8) == 0.0
    one = voltage_penalty([1.0, net.v_max + 0.01], net, 1e8)
    assert one == pytest.approx(-1e4, rel=1e-9)
    two = voltage_penalty([net.v_min - 0.01, net.v_max + 0.01], net, 1e8)
    assert two == pytest.approx(2 * one, rel=1e-9)


@given(st.lists(st.floats(0.5, 1.5), min_size=2, max_size=2))
def test_voltage_penalty_sign(v):
    net = two_bus()
    pen = voltage_penalty(v, net, 1e8)
    inside = all(net.v_min <= x <= net.v_max for x in v)
    assert pen <= 0 and (pen == 0) == inside


@pytest.mark.parametrize("lines, msg", [
    ((Line("a", "b", 0.01, 0.01),), "lines"),
    ((Line("a", "b", 0.01, 0.01), Line("b", "a", 0.01, 0.01)), "connected"),
    ((Line("a", "b", 0.0, 0.01), Line("b", "c", 0.01, 0.01)), "impedance"),
    ((Line("a", "b", 0.01, 0.01), Line("b", "z", 0.01, 0.01)), "unknown bus"),
])
def test_structural_errors(lines, msg):
    with pytest.raises(GridError, match=msg):
        NetworkModel(("a", "b", "c"), "a", lines)


def test_ieee13_analog(ieee13):
    net, loads, fleet = ieee13
    assert net.n_buses == 13 and len(net.lines) == 12
    assert tuple(loads.priorities) == IEEE13_PRIORITIES
    assert len(loads) == 15
    (storage,) = fleet.storage
    assert (storage.p_charge, storage.p_discharge) == (250, 250)
    assert (storage.soc_min, storage.soc_max) == (160, 1250)
    (mt,) = fleet.fuel
    assert (mt.p_min, mt.p_max, mt.fuel_reserve) == (0, 400, 1200)
    assert sorted(d.capacity for d in fleet.renewables) == [300, 300]
    for d in fleet.ders:
        assert (d.alpha_min, d.alpha_max) == (0.0, pytest.approx(np.pi / 4))


def test_ieee123_analog(ieee123):
    net, loads, fleet = ieee123
    assert net.n_buses == 123 and len(net.lines) == 122
    assert len(loads) == 20 and len(fleet) == 6
    assert (len(fleet.fuel), len(fleet.storage), len(fleet.renewables)) == (2, 2, 2)


def test_load_and_der_validation():
    with pytest.raises(GridError):
        LoadSet((Load("x", "a", 0.0, 0.0, 0.5),))
    with pytest.raises(GridError):
        LoadSet((Load("x", "a", 10.0, 1.0, 1.5),))
    with pytest.raises(GridError):
        Der("s", "storage", "a", p_charge=10, p_discharge=10, soc_min=100, soc_max=50, soc_init=60)
    with pytest.raises(GridError):
        Der("f", "fuel", "a", p_max=100, fuel_reserve=0)
    with pytest.raises(GridError):
        Der("r", "renewable", "a", p_max=100, alpha_max=np.pi / 2)


def test_unknown_attachment(ieee13):
    net, loads, fleet = ieee13
    bad = LoadSet((Load("L", "nowhere", 10.0, 5.0, 0.5),))
    with pytest.raises(GridError):
        GridSystem(net, bad, fleet)


def test_with_demands_keeps_power_factor(ieee13):
    loads = ieee13.loads
    new = loads.with_demands(np.full(len(loads), 77.0))
    np.testing.assert_allclose(new.demand_q / new.demand_p, loads.demand_q / loads.demand_p)


def test_json_round_trip(ieee123, tmp_path):
    save_system(ieee123, tmp_path / "g.json")
    back = load_system(tmp_path / "g.json")
    assert system_to_dict(back) == system_to_dict(ieee123)
    again = system_from_dict(json.loads(json.dumps(system_to_dict(back))))
    assert system_to_dict(again) == system_to_dict(ieee123)
