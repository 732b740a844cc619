from dataclasses import replace

import numpy as np
import pytest

from ivgrid import fixtures as fx
from ivgrid import forecast as F
from ivgrid.network import (Bus, ExogenousVector, ForecastBinding, Network, PQLoad, VoltageCollapse,
                            device_current)
from ivgrid.numerics import fd_jacobian, rel_error
from helpers import small_model
from ivgrid.powerflow import (DidNotConverge, HybridSystem, MissingModel, PfOptions,
                              assemble_jacobian, assemble_residual, clamp_step, initial_state,
                              solve_power_flow)

V2 = (1.0 + np.sqrt(0.6)) / 2.0
U14 = fx.base_u()


def null_model(spec=("t",)):
    d = 2 + len(spec)
    return F.ForecastModel("null", (d, 3, 2), [np.zeros((3, d)), np.zeros((2, 3))],
                           [np.zeros(3), np.zeros(2)], spec)


def all_fixtures(shipped_models):
    return [
        ("two_bus", fx.two_bus(), {}, None),
        ("dispatch", fx.economic_dispatch(0.3, 0.1, True)[0], {}, None),
        ("three_bus", fx.three_bus(), {}, None),
        ("three_bus_ml", fx.three_bus("m"), {"m": small_model()}, U14),
        ("case14", fx.case14(with_models=False), {}, None),
        ("case14_ml", fx.case14(), shipped_models, U14),
    ]


def test_unloaded_two_bus():
    net = fx.two_bus(p=0.0)
    x = initial_state(HybridSystem(net))
    np.testing.assert_array_equal(assemble_residual(net, {}, x, None), 0.0)
    sol = solve_power_flow(net)
    assert sol.iterations <= 1
    np.testing.assert_allclose(sol.voltages, [1.0, 1.0])


def test_null_model_leaves_physics_unchanged():
    plain = fx.three_bus()
    with_null = replace(plain, forecast_bindings=(ForecastBinding(3, "null"),))
    u = ExogenousVector.from_mapping({"t": 20.0})
    x = initial_state(HybridSystem(plain)) + 0.01
    r0 = assemble_residual(plain, {}, x, None)
    r1 = assemble_residual(with_null, {"null": null_model()}, x, u)
    np.testing.assert_array_equal(r0, r1)
    np.testing.assert_array_equal(assemble_jacobian(plain, {}, x, None),
                                  assemble_jacobian(with_null, {"null": null_model()}, x, u))


def test_two_bus_residual_at_closed_form_root():
    x = np.array([1.0, 0.8873, 0.0, 0.0])
    assert np.max(np.abs(assemble_residual(fx.two_bus(), {}, x, None))) < 1e-4


def test_jacobian_matches_fd_on_all_fixtures(shipped_models, rng):
    for name, net, models, u in all_fixtures(shipped_models):
        system = HybridSystem(net, models, () if u is None else u.names)
        x0 = initial_state(system)
        for _ in range(3):
            x = x0 + rng.normal(0, 0.03, x0.size)
            jac = assemble_jacobian(net, models, x, u, system=system)
            fd = fd_jacobian(lambda z: assemble_residual(net, models, z, u, system=system), x)
            assert rel_error(jac, fd) <= 1e-6, name


def test_two_bus_closed_form():
    sol = solve_power_flow(fx.two_bus())
    assert sol.converged
    assert sol.bus_voltage(2).real == pytest.approx(V2, abs=1e-6)
    assert abs(sol.bus_voltage(2).imag) < 1e-12


def test_two_bus_quadratic_convergence():
    hist = solve_power_flow(fx.two_bus(), opts=PfOptions(tol=1e-14)).residual_history
    tail = [r for r in hist if r > 1e-13][-3:]
    assert len(tail) == 3
    for a, b in zip(tail, tail[1:]):
        assert b <= 1e3 * a * a


def test_model_trained_on_load_reproduces_solution(pq_model):
    net = Network(1.0, (Bus(1), Bus(2)), fx.two_bus().branches, fx.two_bus().devices[:1],
                  (ForecastBinding(2, "pq"),))
    sol = solve_power_flow(net, {"pq": pq_model})
    assert abs(sol.bus_voltage(2).real - V2) < 5e-3


def test_flat_and_case_starts_agree(shipped_models):
    for name, net, models, u in all_fixtures(shipped_models):
        flat = solve_power_flow(net, models, u)
        buses = tuple(Bus(b.id, 0.97 * np.cos(-0.05 * k), 0.97 * np.sin(-0.05 * k))
                      for k, b in enumerate(net.buses))
        case = solve_power_flow(replace(net, buses=buses), models, u, PfOptions(init="case"))
        np.testing.assert_allclose(flat.voltages, case.voltages, atol=1e-8, err_msg=name)


def test_slack_injection_equals_load_plus_losses(shipped_models):
    for name, net, models, u in all_fixtures(shipped_models):
        if models:
            continue
        sol = solve_power_flow(net, opts=PfOptions(tol=1e-12))
        system = sol.system
        v = sol.voltages
        consumed = 0.0
        for d in net.devices:
            k = system.idx[d.bus]
            if isinstance(d, PQLoad) or type(d).__name__ == "ZipLoad":
                ir, ii = device_current(d, v[k].real, v[k].imag)
                consumed += v[k].real * ir + v[k].imag * ii
        generated = sum(g.p for g in system.pv)
        losses, _ = system.losses(sol.state)
        assert sol.slack_injection[0] == pytest.approx(consumed - generated + losses, abs=1e-8), name


def test_case14_converges_quickly(shipped_models):
    sol = solve_power_flow(fx.case14(), shipped_models, U14)
    assert sol.converged and sol.iterations <= 25
    assert sol.residual_history[-1] <= 1e-8
    system = sol.system
    # PV buses hold their magnitude setpoints
    for g, k in zip(system.pv, system.pv_k):
        assert abs(sol.voltages[k]) == pytest.approx(g.v_set_mag, abs=1e-9)


def test_final_jacobian_is_retained(shipped_models):
    sol = solve_power_flow(fx.case14(), shipped_models, U14)
    np.testing.assert_allclose(sol.final_jacobian,
                               assemble_jacobian(fx.case14(), shipped_models, sol.state, U14), rtol=0, atol=0)
    b = np.arange(sol.state.size, dtype=float)
    np.testing.assert_allclose(sol.final_jacobian @ sol.lu.solve(b), b, atol=1e-9)


def test_overloaded_network_does_not_converge():
    with pytest.raises(DidNotConverge) as err:
        solve_power_flow(fx.two_bus(p=0.6, q=0.2), opts=PfOptions(max_iter=15))
    assert len(err.value.history) == 16
    assert err.value.state is not None


def test_missing_model():
    with pytest.raises(MissingModel):
        solve_power_flow(fx.three_bus("absent"), {}, U14)


def test_missing_feature_in_u():
    with pytest.raises(F.MissingFeature):
        solve_power_flow(fx.three_bus("m"), {"m": small_model()}, ExogenousVector.from_mapping({"temperature": 1.0}))


def test_voltage_collapse_guard():
    with pytest.raises(VoltageCollapse):
        assemble_residual(fx.two_bus(), {}, np.array([1.0, 0.0, 0.0, 0.0]), None)


def test_step_clamp():
    dx = np.array([0.5, -0.1, 3.0])
    out = clamp_step(dx, 2, 0.2)
    assert np.max(np.abs(out[:2])) == pytest.approx(0.2)
    np.testing.assert_allclose(out / dx, 0.4)
    np.testing.assert_array_equal(clamp_step(dx * 0.1, 2, 0.2), dx * 0.1)


def test_options_validation():
    with pytest.raises(ValueError):
        PfOptions(tol=0.0)
    with pytest.raises(ValueError):
        PfOptions(max_iter=0)
