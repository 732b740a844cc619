"""Attacker-defender robust dispatch over exogenous features and Monte-Carlo evaluation.

The attacker maximizes a metric over bounded features by projected gradient
ascent with power flow at a fixed dispatch. The defender re-solves the OPF at
the attacker's worst case. Both alternate until the attack value stalls.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .network import ExogenousVector
from .numerics import SingularMatrix
from .opf import DecisionVector, OpfProblem, controls_from_decision, solve_opf
from .powerflow import DidNotConverge, HybridSystem, PfOptions, _names, solve_power_flow
from .network import VoltageCollapse
from .sensitivity import MetricSpec, gradient_step_u, metric_eval, total_gradient


class AllRestartsFailed(ArithmeticError):
    pass


_INNER_ERRORS = (DidNotConverge, SingularMatrix, VoltageCollapse)


@dataclass(frozen=True)
class AttackConfig:
    """Projected gradient ascent settings.

    ``alpha`` is the step as a fraction of each feature's bound width; steps
    follow the gradient direction scaled to unit max-norm in bound-normalized
    coordinates.
    """

    u_bounds: dict
    alpha: float = 0.5
    max_steps: int = 60
    convergence_tol: float = 1e-9
    restarts: int = 4
    seed: int = 0
    max_backtracks: int = 10
    min_step: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.restarts < 1 or self.max_steps < 0:
            raise ValueError("restarts must be >= 1 and max_steps >= 0")
        bounds = {}
        for name, (lo, hi) in dict(self.u_bounds).items():
            lo, hi = float(lo), float(hi)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"invalid bounds for {name}: {(lo, hi)}")
            bounds[name] = (lo, hi)
        object.__setattr__(self, "u_bounds", bounds)


@dataclass(frozen=True)
class AttackResult:
    u: ExogenousVector
    value: float
    steps: int
    start_value: float
    trace: tuple = ()


@dataclass
class _Evaluator:
    problem: OpfProblem
    dispatch: DecisionVector
    metric: MetricSpec
    system: HybridSystem = None
    controls: np.ndarray = None
    x: np.ndarray = None

    def __post_init__(self):
        self.system = HybridSystem(self.problem.net, self.problem.models, _names(self.problem.u))
        self.controls = controls_from_decision(self.system, self.dispatch)
        if self.metric.objective is None and self.metric.kind == "generation_cost":
            self.metric = replace(self.metric, objective=self.problem.objective)

    def solve(self, u, warm=True):
        sol = solve_power_flow(self.system.net, self.system.models, u, PfOptions(tol=1e-10),
                               controls=self.controls, x0=self.x if warm else None,
                               system=self.system, slack_schedule=self.dispatch.slack_schedule)
        self.x = sol.state
        return sol

    def value(self, u, warm=True):
        return metric_eval(self.metric, self.solve(u, warm))[0]

    def value_and_grad(self, u, warm=True):
        sol = self.solve(u, warm)
        return metric_eval(self.metric, sol)[0], total_gradient(sol, self.metric)


def _to_unit(u, names, lo, hi):
    width = hi - lo
    vals = np.array([u[n] for n in names])
    return np.where(width > 0, (vals - lo) / np.where(width > 0, width, 1.0), 0.0)


def _projected(s, d, free):
    d = np.where(free, d, 0.0)
    d = np.where((s >= 1.0) & (d > 0), 0.0, d)
    return np.where((s <= 0.0) & (d < 0), 0.0, d)


def _ascend(ev: _Evaluator, u0: ExogenousVector, cfg: AttackConfig):
    names = tuple(cfg.u_bounds)
    lo = np.array([cfg.u_bounds[n][0] for n in names])
    hi = np.array([cfg.u_bounds[n][1] for n in names])
    width = hi - lo
    free = width > 0
    unit_bounds = {n: (0.0, 1.0) for n in names}
    u = u0
    g, grad = ev.value_and_grad(u, warm=False)
    start = g
    trace = [(u.as_dict(), g)]
    alpha = cfg.alpha
    steps = 0
    while steps < cfg.max_steps:
        s = _to_unit(u, names, lo, hi)
        d = _projected(s, np.array([grad[u.index(n)] for n in names]) * width, free)
        big = float(np.max(np.abs(d))) if d.size else 0.0
        if big <= cfg.convergence_tol:
            break
        su = ExogenousVector(names, s)
        accepted = False
        for _ in range(cfg.max_backtracks + 1):
            s_new = gradient_step_u(su, d / big, alpha, "ascent", unit_bounds).values
            if float(np.max(np.abs(s_new - s))) < cfg.min_step:
                break
            u_new = u.replace(**{n: lo[k] + width[k] * s_new[k] for k, n in enumerate(names)})
            try:
                g_new, grad_new = ev.value_and_grad(u_new)
            except _INNER_ERRORS:
                g_new = -np.inf
            if g_new >= g:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        u, g, grad = u_new, g_new, grad_new
        steps += 1
        trace.append((u.as_dict(), g))
    return AttackResult(u, g, steps, start, tuple(trace))


def restart_points(u0: ExogenousVector, cfg: AttackConfig):
    """``u0`` followed by ``restarts - 1`` uniform draws inside the bounds."""
    rng = np.random.default_rng(cfg.seed)
    pts = [u0]
    for _ in range(cfg.restarts - 1):
        upd = {n: float(rng.uniform(lo, hi)) for n, (lo, hi) in cfg.u_bounds.items()}
        pts.append(u0.replace(**upd))
    return pts


def _clamp_u(u, cfg):
    return u.replace(**{n: min(max(u[n], lo), hi) for n, (lo, hi) in cfg.u_bounds.items()})


def attack(problem: OpfProblem, dispatch: DecisionVector, g: MetricSpec, cfg: AttackConfig,
           u0: ExogenousVector = None) -> AttackResult:
    """Worst-case exogenous vector for a fixed dispatch."""
    u0 = _clamp_u(u0 if u0 is not None else problem.u, cfg)
    ev = _Evaluator(problem, dispatch, g)
    best = None
    failures = []
    for k, start in enumerate(restart_points(u0, cfg)):
        try:
            res = _ascend(ev, start, cfg)
        except _INNER_ERRORS as exc:
            failures.append(f"restart {k}: {exc}")
            continue
        if best is None or res.value > best.value:
            best = res
    if best is None:
        raise AllRestartsFailed("; ".join(failures))
    return best


def defend(problem: OpfProblem, u_worst: ExogenousVector, dispatch: DecisionVector = None):
    """OPF at the worst-case features, warm-started from ``dispatch`` when given."""
    z0 = dispatch.as_dict() if dispatch is not None else problem.z0
    return solve_opf(replace(problem, u=u_worst, z0=z0))


@dataclass(frozen=True)
class BilevelConfig:
    problem: OpfProblem
    attack: AttackConfig
    outer_rounds: int = 3
    stall_tol: float = 1e-6

    def __post_init__(self):
        if self.outer_rounds < 1:
            raise ValueError("outer_rounds must be >= 1")


@dataclass(frozen=True)
class RobustDispatchResult:
    z_robust: DecisionVector
    z_base: DecisionVector
    u_worst: ExogenousVector
    trace: tuple
    converged: bool

    def to_dict(self):
        return {"z_robust": self.z_robust.to_dict(), "z_base": self.z_base.to_dict(),
                "u_worst": self.u_worst.as_dict(), "converged": self.converged,
                "trace": [{"round": r, "attack": a, "defense": d} for r, a, d in self.trace]}


def attacker_defender(cfg: BilevelConfig, g: MetricSpec) -> RobustDispatchResult:
    """Alternate worst-case attack and OPF re-dispatch."""
    problem = cfg.problem
    base = solve_opf(problem)
    z = base.z
    trace = []
    converged = False
    prev = None
    u_worst = problem.u
    for r in range(cfg.outer_rounds):
        try:
            atk = attack(problem, z, g, cfg.attack, u0=u_worst)
            sol = defend(problem, atk.u, z)
        except (AllRestartsFailed, *_INNER_ERRORS) as exc:
            raise type(exc)(f"round {r}: {exc}") from exc
        u_worst, z = atk.u, sol.z
        trace.append((r, atk.value, float(sol.objective_value)))
        if prev is not None and abs(atk.value - prev) <= cfg.stall_tol * max(1.0, abs(prev)):
            converged = True
            break
        prev = atk.value
    return RobustDispatchResult(z, base.z, u_worst, tuple(trace), converged)


# --- Monte Carlo -------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioDistribution:
    """Per-feature ``("uniform", lo, hi)`` or ``("normal", mean, std, lo, hi)``."""

    features: dict
    count: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for name, spec in self.features.items():
            kind = spec[0]
            if kind == "uniform":
                if len(spec) != 3 or spec[1] > spec[2]:
                    raise ValueError(f"bad uniform spec for {name}")
            elif kind == "normal":
                if len(spec) != 5 or spec[2] < 0 or spec[3] > spec[4]:
                    raise ValueError(f"bad normal spec for {name}")
                if not spec[3] <= spec[1] <= spec[4] and spec[2] == 0:
                    raise ValueError(f"degenerate normal for {name} lies outside its bounds")
            else:
                raise ValueError(f"unknown distribution {kind!r} for {name}")

    def sample(self, base: ExogenousVector):
        rng = np.random.default_rng(self.seed)
        cols = {}
        for name, spec in self.features.items():
            if spec[0] == "uniform":
                cols[name] = rng.uniform(spec[1], spec[2], self.count)
            else:
                _, mu, sd, lo, hi = spec
                out = np.empty(self.count)
                for k in range(self.count):
                    v = rng.normal(mu, sd)
                    while not lo <= v <= hi:
                        v = rng.normal(mu, sd)
                    out[k] = v
                cols[name] = out
        return [base.replace(**{n: float(c[k]) for n, c in cols.items()}) for k in range(self.count)]


@dataclass(frozen=True)
class MetricStats:
    mean: float
    max: float
    std: float
    bin_edges: tuple
    counts: tuple
    values: tuple = field(repr=False, default=())


@dataclass(frozen=True)
class MonteCarloResult:
    stats: dict
    failures: int
    count: int

    @property
    def failure_rate(self):
        return self.failures / self.count

    def to_dict(self):
        return {"count": self.count, "failures": self.failures,
                "metrics": {k: {"mean": s.mean, "max": s.max, "std": s.std,
                                "bin_edges": list(s.bin_edges), "counts": list(s.counts)}
                            for k, s in self.stats.items()}}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "bin_lo", "bin_hi", "count"])
        for k, s in self.stats.items():
            for j, c in enumerate(s.counts):
                w.writerow([k, repr(s.bin_edges[j]), repr(s.bin_edges[j + 1]), c])
        return buf.getvalue()


def monte_carlo_eval(net, models, dispatch: DecisionVector, dist: ScenarioDistribution, metrics,
                     base_u: ExogenousVector, objective=None, bins=20) -> MonteCarloResult:
    """Power flow at a fixed dispatch for each sampled feature vector."""
    system = HybridSystem(net, models, base_u.names)
    controls = controls_from_decision(system, dispatch)
    metrics = [replace(m, objective=objective) if m.objective is None and objective is not None
               else m for m in metrics]
    values = {m.label: [] for m in metrics}
    failures = 0
    for u in dist.sample(base_u):
        try:
            # flat start for each sample keeps samples independent of order
            sol = solve_power_flow(net, models, u, PfOptions(), controls=controls, system=system,
                                   slack_schedule=dispatch.slack_schedule)
        except _INNER_ERRORS:
            failures += 1
            continue
        for m in metrics:
            values[m.label].append(metric_eval(m, sol)[0])
    stats = {}
    for label, vals in values.items():
        a = np.array(vals)
        if a.size:
            counts, edges = np.histogram(a, bins=bins)
            stats[label] = MetricStats(float(a.mean()), float(a.max()), float(a.std()),
                                       tuple(float(e) for e in edges),
                                       tuple(int(c) for c in counts), tuple(float(v) for v in a))
        else:
            nan = float("nan")
            stats[label] = MetricStats(nan, nan, nan, (), ())
    return MonteCarloResult(stats, failures, dist.count)


__all__ = [
    "AllRestartsFailed", "AttackConfig", "AttackResult", "BilevelConfig", "MonteCarloResult",
    "RobustDispatchResult", "ScenarioDistribution", "attack", "attacker_defender", "defend",
    "monte_carlo_eval", "restart_points",
]
