"""Reference networks, forecast models and problem setups used by tests and the CLI.

The 14-bus network uses the line and bus data of the standard IEEE 14-bus
test case (transformer taps dropped, bus 9 shunt modelled as a constant
impedance device). Two trained forecast models add weather-driven load at
seven buses; their weights ship in ``data/`` and can be rebuilt
deterministically with ``python3 -m ivgrid.fixtures``.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import forecast as F
from .network import (Branch, Bus, ExogenousVector, ForecastBinding, InfeasibilitySource, Network,
                      PQLoad, PVGenerator, Slack, ZipLoad, serialize_case)
from .opf import ObjectiveSpec, OpfOptions, OpfProblem

FEATURES = ("temperature", "irradiance")
U_RANGES = {"temperature": (10.0, 40.0), "irradiance": (0.0, 1000.0)}
BASE_U = {"temperature": 25.0, "irradiance": 600.0}


def two_bus(p=0.1, q=0.0, g=1.0, b=0.0):
    """Slack at 1+j0 feeding a PQ load over one series branch."""
    return Network(1.0, (Bus(1), Bus(2)), (Branch(1, 2, g, b),),
                   (Slack(1, 1.0, 0.0), PQLoad(2, p, q)), ())


def economic_dispatch(load=0.1, q=0.0, two_generators=False):
    """Lossless (purely reactive) lines; optionally a second costed generator.

    Returns ``(net, objective)``.
    """
    if not two_generators:
        net = Network(1.0, (Bus(1), Bus(2)), (Branch(1, 2, 0.0, -10.0),),
                      (Slack(1, 1.0, 0.0), PQLoad(2, load, q)), ())
        return net, ObjectiveSpec({1: (1.0, 0.0, 0.0)})
    net = Network(1.0, (Bus(1), Bus(2), Bus(3)),
                  (Branch(1, 2, 0.0, -10.0), Branch(3, 2, 0.0, -10.0)),
                  (Slack(1, 1.0, 0.0), PQLoad(2, load, q), PVGenerator(3, 0.0, 1.0)), ())
    return net, ObjectiveSpec({1: (1.0, 0.0, 0.0), 3: (2.0, 0.0, 0.0)})


def three_bus(model_id=None, infeasibility=True):
    """Meshed 3-bus network with a PV generator and optional forecast binding at bus 3."""
    devices = [Slack(1, 1.02, 0.0), PVGenerator(2, 0.3, 1.01), PQLoad(3, 0.5, 0.2)]
    if infeasibility:
        devices.append(InfeasibilitySource(3))
    bindings = (ForecastBinding(3, model_id),) if model_id else ()
    return Network(1.0, (Bus(1), Bus(2), Bus(3)),
                   (Branch.from_impedance(1, 2, 0.01, 0.1, 0.02),
                    Branch.from_impedance(2, 3, 0.02, 0.15, 0.0),
                    Branch.from_impedance(1, 3, 0.01, 0.12, 0.01)),
                   tuple(devices), bindings)


# --- 14-bus case -------------------------------------------------------------

# id, P_load MW, Q_load MVAr
_BUS_LOADS = [(1, 0.0, 0.0), (2, 21.7, 12.7), (3, 94.2, 19.0), (4, 47.8, -3.9), (5, 7.6, 1.6),
              (6, 11.2, 7.5), (7, 0.0, 0.0), (8, 0.0, 0.0), (9, 29.5, 16.6), (10, 9.0, 5.8),
              (11, 3.5, 1.8), (12, 6.1, 1.6), (13, 13.5, 5.8), (14, 14.9, 5.0)]
# from, to, r, x, total line charging
_LINES = [(1, 2, 0.01938, 0.05917, 0.0528), (1, 5, 0.05403, 0.22304, 0.0492),
          (2, 3, 0.04699, 0.19797, 0.0438), (2, 4, 0.05811, 0.17632, 0.034),
          (2, 5, 0.05695, 0.17388, 0.0346), (3, 4, 0.06701, 0.17103, 0.0128),
          (4, 5, 0.01335, 0.04211, 0.0), (4, 7, 0.0, 0.20912, 0.0), (4, 9, 0.0, 0.55618, 0.0),
          (5, 6, 0.0, 0.25202, 0.0), (6, 11, 0.09498, 0.19890, 0.0), (6, 12, 0.12291, 0.25581, 0.0),
          (6, 13, 0.06615, 0.13027, 0.0), (7, 8, 0.0, 0.17615, 0.0), (7, 9, 0.0, 0.11001, 0.0),
          (9, 10, 0.03181, 0.08450, 0.0), (9, 14, 0.12711, 0.27038, 0.0),
          (10, 11, 0.08205, 0.19207, 0.0), (12, 13, 0.22092, 0.19988, 0.0),
          (13, 14, 0.17093, 0.34802, 0.0)]
# bus, P MW, |V| setpoint
_PV_GENS = [(2, 40.0, 1.045), (3, 0.0, 1.01), (6, 0.0, 1.07), (8, 0.0, 1.09)]
SLACK_V = 1.06
RESIDENTIAL_BUSES = (10, 11, 12, 13, 14)
COMMERCIAL_BUSES = (4, 9)
# quadratic costs per pu output, (c2, c1, c0)
GEN_COSTS = {1: (4.3, 20.0, 0.0), 2: (25.0, 20.0, 0.0), 3: (10.0, 30.0, 0.0)}
GEN_BOUNDS = {"P_g@2": (0.0, 1.4), "P_g@3": (0.0, 1.0)}


def case14(with_models=True, infeasibility_bus=None):
    base = 100.0
    buses = tuple(Bus(b) for b, _, _ in _BUS_LOADS)
    branches = tuple(Branch.from_impedance(f, t, r, x, bsh) for f, t, r, x, bsh in _LINES)
    devices = [Slack(1, SLACK_V, 0.0)]
    devices += [PVGenerator(b, p / base, v) for b, p, v in _PV_GENS]
    devices += [PQLoad(b, p / base, q / base) for b, p, q in _BUS_LOADS if p or q]
    devices.append(ZipLoad(9, 0.0, -0.19, 1.0, 0.0, 0.0))
    if infeasibility_bus is not None:
        devices.append(InfeasibilitySource(infeasibility_bus))
    bindings = ()
    if with_models:
        bindings = tuple([ForecastBinding(b, "residential") for b in RESIDENTIAL_BUSES]
                         + [ForecastBinding(b, "commercial") for b in COMMERCIAL_BUSES])
    return Network(base, buses, branches, tuple(devices), bindings)


# --- forecast model recipes --------------------------------------------------


@dataclass(frozen=True)
class ModelRecipe:
    model_id: str
    device: object
    response: F.ExogenousResponse
    n: int = 2000
    data_seed: int = 11
    init_seed: int = 5
    hidden: tuple = (16, 16)
    epochs: int = 4000
    learning_rate: float = 0.3
    angle_deg: float = 30.0

    def training_data(self, n=None):
        return F.generate_training_data(self.device, self.response, (0.8, 1.2), U_RANGES,
                                        n or self.n, self.data_seed, self.angle_deg)

    def build(self, epochs=None, n=None):
        data = self.training_data(n)
        m0 = F.init_model(self.model_id, FEATURES, self.hidden, self.init_seed, data)
        cfg = F.TrainConfig(learning_rate=self.learning_rate, epochs=epochs or self.epochs,
                            seed=self.init_seed)
        return F.train(m0, data, cfg)


RECIPES = {
    "residential": ModelRecipe("residential", ZipLoad(0, 0.04, 0.015, 0.3, 0.3, 0.4),
                               F.ExogenousResponse(alpha_t=0.02, alpha_s=0.5)),
    "commercial": ModelRecipe("commercial", ZipLoad(0, 0.15, 0.05, 0.5, 0.2, 0.3),
                              F.ExogenousResponse(alpha_t=0.015, alpha_s=0.1), data_seed=12,
                              init_seed=6),
}


def _data_dir():
    return resources.files("ivgrid") / "data"


def load_models():
    """The shipped trained models keyed by id."""
    out = {}
    for name in RECIPES:
        out[name] = F.load_model((_data_dir() / f"{name}.json").read_text())
    return out


def base_u(**updates):
    return ExogenousVector.from_mapping({**BASE_U, **updates})


def case14_problem(u=None, models=None, tol=1e-6, infeasibility_weight=0.0):
    """Economic dispatch on the 14-bus case with the shipped forecast models."""
    return OpfProblem(case14(), models if models is not None else load_models(),
                      u if u is not None else base_u(),
                      ObjectiveSpec(GEN_COSTS, infeasibility_weight), dict(GEN_BOUNDS),
                      OpfOptions(tol=tol))


# --- robust dispatch -----------------------------------------------------------

ROBUST_SHORTFALL_WEIGHT = 50.0
ATTACK_BOUNDS = {"temperature": (10.0, 40.0), "irradiance": (600.0, 600.0)}


def robust_setup():
    """Problem, attack bounds and a hot-skewed temperature distribution for the 14-bus case.

    Slack output above its scheduled value counts as infeasibility and is
    penalized with ``ROBUST_SHORTFALL_WEIGHT`` in the generation cost.
    """
    from .robust import AttackConfig, ScenarioDistribution
    problem = case14_problem(infeasibility_weight=ROBUST_SHORTFALL_WEIGHT)
    dist = ScenarioDistribution({"temperature": ("normal", 32.0, 6.0, 10.0, 40.0)}, 500, 1)
    return problem, AttackConfig(dict(ATTACK_BOUNDS)), dist


# --- hand-built models ---------------------------------------------------------


def linear_feature_model(slope=0.05, feature="u", model_id="linear"):
    """Current ``(slope * u, 0)`` independent of voltage."""
    return F.ForecastModel(model_id, (3, 2), [np.array([[0.0, 0.0, slope], [0.0, 0.0, 0.0]])],
                           [np.zeros(2)], (feature,))


def bump_model(center=30.0, a=0.1, b=1.0, height=0.1, feature="u", model_id="bump"):
    """Voltage-independent current ``height * (tanh(a(u-c)+b) - tanh(a(u-c)-b))``.

    Smooth, symmetric about ``center`` and maximal there.
    """
    w1 = np.array([[0.0, 0.0, a], [0.0, 0.0, a]])
    b1 = np.array([-a * center + b, -a * center - b])
    w2 = np.array([[height, -height], [0.0, 0.0]])
    return F.ForecastModel(model_id, (3, 2, 2), [w1, w2], [b1, np.zeros(2)], (feature,))


def resistive_two_bus(model_id, g=1.0):
    """Slack feeding bus 2 over a conductance; bus 2 carries only a forecast binding."""
    return Network(1.0, (Bus(1), Bus(2)), (Branch(1, 2, g, 0.0),), (Slack(1, 1.0, 0.0),),
                   (ForecastBinding(2, model_id),))


def write_data(out_dir=None, epochs=None):
    out = Path(out_dir) if out_dir else Path(str(_data_dir()))
    out.mkdir(parents=True, exist_ok=True)
    (out / "case14.json").write_text(serialize_case(case14()))
    for name, recipe in RECIPES.items():
        model, hist = recipe.build(epochs=epochs)
        (out / f"{name}.json").write_text(F.save_model(model))
        print(f"{name}: mse {hist[0]:.3e} -> {hist[-1]:.3e}")
    (out / "base_u.json").write_text(json.dumps(BASE_U, indent=2) + "\n")
    (out / "case14_problem.json").write_text(json.dumps(problem_document(), indent=2) + "\n")


def problem_document():
    """OPF problem document for the CLI, referencing the files in ``data/``."""
    return {
        "case": "case14.json",
        "models": [f"{name}.json" for name in RECIPES],
        "u": "base_u.json",
        "objective": ObjectiveSpec(GEN_COSTS, ROBUST_SHORTFALL_WEIGHT).to_dict(),
        "bounds": {k: list(v) for k, v in GEN_BOUNDS.items()},
        "attack_bounds": {k: list(v) for k, v in ATTACK_BOUNDS.items()},
    }


if __name__ == "__main__":
    write_data(sys.argv[1] if len(sys.argv) > 1 else None)
