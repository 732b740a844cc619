from dataclasses import replace

import numpy as np
import pytest

from ivgrid import fixtures as fx
from ivgrid.network import ExogenousVector, ForecastBinding
from ivgrid.opf import ObjectiveSpec, OpfOptions, OpfProblem, solve_opf
from ivgrid.powerflow import DidNotConverge
from ivgrid.robust import (AttackConfig, BilevelConfig, ScenarioDistribution, attack, attacker_defender,
                           defend, monte_carlo_eval, restart_points)
from ivgrid.sensitivity import MetricSpec

SLACK_P = MetricSpec("slack_active_power")
COST = MetricSpec("generation_cost")


def single_feature_problem(model, model_id, u=20.0):
    return OpfProblem(fx.resistive_two_bus(model_id), {model_id: model},
                      ExogenousVector.from_mapping({"u": u}), ObjectiveSpec({1: (1.0, 0.0, 0.0)}))


def run_attack(problem, bounds, **kw):
    base = solve_opf(problem)
    return attack(problem, base.z, SLACK_P, AttackConfig(bounds, **kw))


def test_inert_attacker_keeps_start():
    net = fx.three_bus()
    prob = OpfProblem(net, {}, ExogenousVector.from_mapping({"u": 3.0}),
                      ObjectiveSpec({1: (1.0, 0.0, 0.0), 2: (2.0, 0.0, 0.0)}))
    res = run_attack(prob, {"u": (0.0, 10.0)}, restarts=1)
    assert res.u["u"] == 3.0
    assert res.steps == 0


def test_attack_finds_interior_maximum():
    prob = single_feature_problem(fx.bump_model(), "bump", 15.0)
    res = run_attack(prob, {"u": (10.0, 40.0)})
    assert res.u["u"] == pytest.approx(30.0, abs=1e-3)
    assert res.value >= res.start_value


def test_attack_monotone_goes_to_bound():
    prob = single_feature_problem(fx.linear_feature_model(0.05), "linear", 2.0)
    res = run_attack(prob, {"u": (0.0, 5.0)}, restarts=2)
    assert res.u["u"] == 5.0
    assert res.value == pytest.approx(0.25, abs=1e-9)


def test_ascent_trace_is_monotone():
    prob = single_feature_problem(fx.bump_model(), "bump", 12.0)
    res = run_attack(prob, {"u": (10.0, 40.0)}, alpha=0.05, restarts=1)
    vals = [v for _, v in res.trace]
    assert len(vals) > 2
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_attack_is_deterministic():
    prob = single_feature_problem(fx.bump_model(), "bump", 12.0)
    a = run_attack(prob, {"u": (10.0, 40.0)}, seed=7)
    b = run_attack(prob, {"u": (10.0, 40.0)}, seed=7)
    assert a.trace == b.trace


def test_restart_points_within_bounds():
    cfg = AttackConfig({"u": (1.0, 2.0)}, restarts=6, seed=3)
    pts = restart_points(ExogenousVector.from_mapping({"u": 1.5}), cfg)
    assert pts[0]["u"] == 1.5 and len(pts) == 6
    assert all(1.0 <= p["u"] <= 2.0 for p in pts)


def test_defend_at_nominal_is_plain_opf(shipped_models):
    prob = fx.case14_problem(models=shipped_models)
    np.testing.assert_array_equal(defend(prob, prob.u).z.values, solve_opf(prob).z.values)


def test_defend_propagates_failure():
    net = fx.two_bus(p=0.6, q=0.2)
    prob = OpfProblem(net, {}, None, ObjectiveSpec({1: (1.0, 0.0, 0.0)}), options=OpfOptions(max_iter=20))
    with pytest.raises(DidNotConverge):
        defend(prob, None)


def test_single_round_is_composition(shipped_models):
    prob, cfg, _ = fx.robust_setup()
    prob = replace(prob, models=shipped_models)
    res = attacker_defender(BilevelConfig(prob, cfg, outer_rounds=1), COST)
    base = solve_opf(prob)
    atk = attack(prob, base.z, COST, cfg)
    sol = defend(prob, atk.u, base.z)
    assert len(res.trace) == 1
    assert res.u_worst == atk.u
    np.testing.assert_array_equal(res.z_robust.values, sol.z.values)
    assert res.trace[0] == (0, atk.value, float(sol.objective_value))


def test_no_models_means_no_redispatch():
    prob = OpfProblem(fx.case14(with_models=False), {}, fx.base_u(), ObjectiveSpec(fx.GEN_COSTS, 50.0),
                      dict(fx.GEN_BOUNDS))
    res = attacker_defender(BilevelConfig(prob, AttackConfig(dict(fx.ATTACK_BOUNDS))), COST)
    np.testing.assert_allclose(res.z_robust.values, solve_opf(prob).z.values, atol=1e-8)


def test_defense_objective_never_increases(shipped_models):
    prob, cfg, _ = fx.robust_setup()
    prob = replace(prob, models=shipped_models, options=OpfOptions(tol=1e-11))
    res = attacker_defender(BilevelConfig(prob, cfg, outer_rounds=3, stall_tol=0.0), COST)
    defense = [d for _, _, d in res.trace]
    assert len(defense) >= 2
    for a, b in zip(defense, defense[1:]):
        assert b <= a + 1e-12 * abs(a)


def test_monte_carlo_degenerate_cases(shipped_models):
    prob = fx.case14_problem(models=shipped_models)
    z = solve_opf(prob).z
    metrics = [MetricSpec("total_losses"), MetricSpec("voltage_magnitude", 14)]
    flat = ScenarioDistribution({"temperature": ("uniform", 30.0, 30.0)}, 5, 0)
    res = monte_carlo_eval(prob.net, shipped_models, z, flat, metrics, prob.u)
    assert res.failures == 0
    for s in res.stats.values():
        assert s.std == 0.0
        assert len(set(s.values)) == 1
    one = ScenarioDistribution({"temperature": ("normal", 30.0, 5.0, 10.0, 40.0)}, 1, 0)
    res = monte_carlo_eval(prob.net, shipped_models, z, one, metrics, prob.u)
    for s in res.stats.values():
        assert s.mean == s.max == s.values[0]


def test_monte_carlo_deterministic(shipped_models):
    prob = fx.case14_problem(models=shipped_models)
    z = solve_opf(prob).z
    dist = ScenarioDistribution({"temperature": ("normal", 30.0, 8.0, 10.0, 40.0),
                                 "irradiance": ("uniform", 200.0, 900.0)}, 20, 4)
    runs = [monte_carlo_eval(prob.net, shipped_models, z, dist, [COST], prob.u, prob.objective)
            for _ in range(2)]
    assert runs[0].to_csv() == runs[1].to_csv()
    assert runs[0].stats[COST.label].values == runs[1].stats[COST.label].values
    samples = dist.sample(prob.u)
    assert len(samples) == 20
    assert all(10.0 <= s["temperature"] <= 40.0 and 200.0 <= s["irradiance"] <= 900.0 for s in samples)


def test_monte_carlo_counts_failures():
    net = replace(fx.two_bus(p=0.15), forecast_bindings=(ForecastBinding(2, "linear"),))
    models = {"linear": fx.linear_feature_model(1.0)}
    u = ExogenousVector.from_mapping({"u": 0.0})
    prob = OpfProblem(net, models, u, ObjectiveSpec({1: (1.0, 0.0, 0.0)}))
    z = solve_opf(prob).z
    # beyond roughly u = 0.2 the extra current pushes the load past the nose point
    dist = ScenarioDistribution({"u": ("uniform", 0.0, 0.5)}, 20, 2)
    res = monte_carlo_eval(net, models, z, dist, [SLACK_P], u)
    assert 0 < res.failures < 20
    assert sum(res.stats[SLACK_P.label].counts) == 20 - res.failures


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig({"u": (0.0, 1.0)}, alpha=1.5)
    with pytest.raises(ValueError):
        AttackConfig({"u": (2.0, 1.0)})
    with pytest.raises(ValueError):
        ScenarioDistribution({"u": ("normal", 0.0, 1.0, 2.0, 1.0)})
    with pytest.raises(ValueError):
        ScenarioDistribution({"u": ("uniform", 0.0, 1.0)}, count=0)
