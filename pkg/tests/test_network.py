import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivgrid import fixtures as fx
from ivgrid.network import (Branch, Bus, ExogenousVector, ForecastBinding, InfeasibilitySource,
                            Network, ParseError, PQLoad, PVGenerator, Slack, ValidationError,
                            VoltageCollapse, ZipLoad, branch_matrix, device_current,
                            device_current_hessian, device_current_jacobian, network_to_dict,
                            parse_case, serialize_case)
from ivgrid.numerics import fd_jacobian, rel_error

TWO_BUS = """{
  "base_mva": 100,
  "buses": [{"id": 1}, {"id": 2}],
  "branches": [{"from": 1, "to": 2, "series_conductance": 1.0, "series_susceptance": 0.0}],
  "devices": [{"kind": "Slack", "bus": 1, "v_set_real": 1.0, "v_set_imag": 0.0},
              {"kind": "PQLoad", "bus": 2, "p": 0.1, "q": 0.0}],
  "forecast_bindings": []
}"""


def test_parse_minimal_two_bus():
    net = parse_case(TWO_BUS)
    assert len(net.buses) == 2 and len(net.devices) == 2 and len(net.branches) == 1
    assert parse_case(serialize_case(net)) == net


def test_duplicate_bus_rejected():
    doc = TWO_BUS.replace('{"id": 2}', '{"id": 1}')
    with pytest.raises(ValidationError):
        parse_case(doc)


def test_dangling_branch_rejected():
    with pytest.raises(ValidationError):
        parse_case(TWO_BUS.replace('"to": 2', '"to": 7'))


def test_malformed_document_reports_position():
    with pytest.raises(ParseError) as err:
        parse_case(TWO_BUS[:40])
    assert "line" in str(err.value)


@pytest.mark.parametrize("bad", [
    lambda: Network(1.0, (Bus(1),), (), (), ()),
    lambda: Network(1.0, (Bus(1), Bus(2)), (), (Slack(1, 1, 0), Slack(2, 1, 0)), ()),
    lambda: Network(1.0, (Bus(1, 3.0),), (), (Slack(1, 1, 0),), ()),
    lambda: Network(1.0, (Bus(1), Bus(2)), (Branch(1, 1, 1.0, 0.0),), (Slack(1, 1, 0),), ()),
    lambda: Network(1.0, (Bus(1), Bus(2)), (Branch(1, 2, 0.0, 0.0),), (Slack(1, 1, 0),), ()),
    lambda: Network(1.0, (Bus(1), Bus(2)), (), (Slack(1, 1, 0), ZipLoad(2, 1, 0, 0.5, 0.2, 0.2)), ()),
    lambda: Network(1.0, (Bus(1), Bus(2)), (), (Slack(1, 1, 0), PVGenerator(2, 0.1, 2.5)), ()),
    lambda: Network(1.0, (Bus(1), Bus(2)), (), (Slack(1, 1, 0), PQLoad(3, 0.1, 0.0)), ()),
])
def test_invariant_breaches(bad):
    with pytest.raises(ValidationError):
        bad()


def test_case14_round_trip_is_byte_stable():
    net = fx.case14()
    text = serialize_case(net)
    assert parse_case(text) == net
    assert serialize_case(parse_case(text)) == text


_devices = st.one_of(
    st.builds(PQLoad, st.just(2), st.floats(-2, 2), st.floats(-2, 2)),
    st.builds(lambda p0, q0, a, b: ZipLoad(2, p0, q0, a, b * (1 - a), 1 - a - b * (1 - a)),
              st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1), st.floats(0, 1)),
)


@settings(max_examples=40, deadline=None)
@given(st.lists(_devices, max_size=3), st.floats(0.5, 1.5), st.floats(-0.5, 0.5),
       st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 0.1))
def test_round_trip_random_networks(devs, vm, va, g, b, bsh):
    if g == 0 and b == 0:
        g = 1.0
    net = Network(100.0, (Bus(1), Bus(2, vm * np.cos(va), vm * np.sin(va))),
                  (Branch(1, 2, g, b, bsh),), (Slack(1, 1.0, 0.0), *devs, InfeasibilitySource(2)),
                  (ForecastBinding(2, "m", ("t",)),))
    assert parse_case(serialize_case(net)) == net


def test_pq_at_unit_voltage():
    assert device_current(PQLoad(0, 1.0, 0.5), 1.0, 0.0) == pytest.approx((1.0, -0.5))


def test_zero_pq():
    assert device_current(PQLoad(0, 0.0, 0.0), 0.3, -0.9) == (0.0, 0.0)
    np.testing.assert_array_equal(device_current_jacobian(PQLoad(0, 0, 0), 0.3, -0.9), 0.0)


def test_constant_impedance_zip():
    d = ZipLoad(0, 1.0, 0.0, 1.0, 0.0, 0.0)
    assert device_current(d, 0.5, 0.0) == pytest.approx((0.5, 0.0))
    j1 = device_current_jacobian(d, 0.5, 0.1)
    j2 = device_current_jacobian(d, 1.3, -0.4)
    np.testing.assert_allclose(j1, j2, atol=1e-14)


def test_generator_is_negated_load():
    g = PVGenerator(0, 0.4, 1.0)
    assert device_current(g, 1.0, 0.2, q_gen=0.1) == pytest.approx(
        tuple(-c for c in device_current(PQLoad(0, 0.4, 0.1), 1.0, 0.2)))


def test_voltage_collapse():
    with pytest.raises(VoltageCollapse):
        device_current(PQLoad(0, 1.0, 0.0), 1e-7, 0.0)


@pytest.mark.parametrize("dev", [
    PQLoad(0, 0.7, -0.3), ZipLoad(0, 0.5, 0.2, 0.2, 0.3, 0.5), ZipLoad(0, -0.4, 0.1, 0.0, 1.0, 0.0),
    PVGenerator(0, 0.6, 1.0)])
def test_device_partials_match_fd(dev, rng):
    worst_j = worst_h = 0.0
    for _ in range(1000):
        m, a = rng.uniform(0.5, 1.5), rng.uniform(-np.pi, np.pi)
        v = np.array([m * np.cos(a), m * np.sin(a)])
        jac = device_current_jacobian(dev, *v, q_gen=0.2)
        fd = fd_jacobian(lambda z: device_current(dev, *z, q_gen=0.2), v)
        worst_j = max(worst_j, rel_error(jac, fd))
        hess = device_current_hessian(dev, *v, q_gen=0.2)
        fdh = np.stack([fd_jacobian(lambda z: device_current_jacobian(dev, *z, q_gen=0.2)[r], v)
                        for r in range(2)])
        worst_h = max(worst_h, rel_error(hess, fdh))
    assert worst_j <= 1e-6
    assert worst_h <= 1e-6


def test_closed_series_loop_carries_no_current_at_flat_voltage():
    net = Network(1.0, (Bus(1), Bus(2), Bus(3)),
                  (Branch.from_impedance(1, 2, 0.01, 0.1), Branch.from_impedance(2, 3, 0.02, 0.2),
                   Branch.from_impedance(3, 1, 0.03, 0.05)), (Slack(1, 1.0, 0.0),), ())
    v = np.concatenate((np.ones(3), np.zeros(3)))
    np.testing.assert_allclose(branch_matrix(net) @ v, 0.0, atol=1e-12)


def test_branch_pi_model_shunt():
    net = Network(1.0, (Bus(1), Bus(2)), (Branch(1, 2, 0.0, -5.0, 0.2),), (Slack(1, 1.0, 0.0),), ())
    v = np.array([1.0, 1.0, 0.0, 0.0])
    # flat voltage: only the half shunts draw current, i = j(b/2)V
    np.testing.assert_allclose(branch_matrix(net) @ v, [0.0, 0.0, 0.1, 0.1], atol=1e-14)


def test_exogenous_vector():
    u = ExogenousVector.from_mapping({"temperature": 25.0, "irradiance": 600.0})
    assert u["irradiance"] == 600.0
    assert u.replace(temperature=30.0).as_dict() == {"temperature": 30.0, "irradiance": 600.0}
    with pytest.raises(ValueError):
        ExogenousVector(("a",), [np.nan])
    assert network_to_dict(fx.two_bus())["base_mva"] == 1.0
