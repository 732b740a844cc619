"""System metrics and adjoint sensitivities of metrics to exogenous features.

For a converged solution with residual ``F(w, u) = 0`` and stored Jacobian
``Y = dF/dw``, a metric ``g(w, u)`` has total derivative

    dg/du = dg/du|_w - a . dF/du,   Y^T a = dg/dw.

One transpose solve serves every forecast binding and feature. For power
flow ``w`` is the state; for OPF it is ``(z, lam, x)`` and ``Y`` is the KKT
Jacobian, so metrics that depend on the duals are handled the same way.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .network import ExogenousVector
from .opf import OpfSolution, kkt_u_block, lmp_terms
from .powerflow import PfSolution

METRIC_KINDS = ("slack_active_power", "total_generation_P", "total_losses", "voltage_magnitude",
                "lmp_estimate", "infeasibility_norm", "generation_cost", "generator_P")
_BUS_METRICS = ("voltage_magnitude", "lmp_estimate", "generator_P")
METRIC_UNITS = {"slack_active_power": "pu", "total_generation_P": "pu", "total_losses": "pu",
                "voltage_magnitude": "pu", "lmp_estimate": "cost/pu", "infeasibility_norm": "pu",
                "generation_cost": "cost", "generator_P": "pu"}
FEATURE_UNITS = {"temperature": "degC", "irradiance": "W/m2", "hour": "h"}


class UnconvergedSolution(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    kind: str
    bus: int = None
    objective: object = None  # ObjectiveSpec for generation_cost on power-flow solutions

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric {self.kind!r}; expected one of {METRIC_KINDS}")
        if self.kind in _BUS_METRICS and self.bus is None:
            raise ValueError(f"metric {self.kind} needs a bus")

    @property
    def label(self):
        return f"{self.kind}({self.bus})" if self.bus is not None else self.kind


@dataclass(frozen=True)
class _View:
    """Uniform access to power-flow and OPF solutions."""

    system: object
    x: np.ndarray
    c: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    nz: int
    z_cols: np.ndarray
    schedule: float
    objective: object
    opf: OpfSolution

    @property
    def n_unknowns(self):
        return self.nz + (2 if self.opf is not None else 1) * self.system.nx

    def to_unknowns(self, grad_y, grad_lam=None):
        nx = self.system.nx
        if self.opf is None:
            return grad_y[:nx].copy()
        lam = np.zeros(nx) if grad_lam is None else grad_lam
        return np.concatenate((grad_y[self.z_cols], lam, grad_y[:nx]))


def _view(solution, objective=None):
    if isinstance(solution, OpfSolution):
        lay = solution.layout
        return _View(lay.system, solution.x, solution.controls, solution.u, solution.lam, lay.nz,
                     lay.z_cols, solution.p_slack, objective or solution.problem.objective, solution)
    if isinstance(solution, PfSolution):
        return _View(solution.system, solution.state, solution.controls, solution.u, None, 0,
                     np.zeros(0, dtype=int), solution.slack_schedule, objective, None)
    raise TypeError(f"not a solution: {solution!r}")


def _check(solution):
    if not getattr(solution, "converged", False):
        raise UnconvergedSolution("sensitivities need a converged solution")


def _infeasibility_parts(view):
    """Squared infeasibility pieces: injections and slack shortfall over schedule."""
    system = view.system
    ci = view.c[system.npv:]
    ps, _, _ = system.slack_power(view.x, view.c, view.u)
    short = 0.0
    if view.schedule is not None:
        short = max(0.0, ps - view.schedule)
    return ci, short


def metric_terms(g: MetricSpec, solution):
    """Metric value, gradient over the solution unknowns and ``dg/dP_slack``.

    The last entry is the coefficient of any direct dependence on the slack
    injection, which is the only path by which a metric sees ``u`` without
    going through the unknowns.
    """
    view = _view(solution, g.objective)
    system = view.system
    n, nx = system.n, system.nx
    x, c, u = view.x, view.c, view.u
    if g.bus is not None and g.bus not in system.idx:
        raise KeyError(f"metric references unknown bus {g.bus}")
    gy = np.zeros(system.N)
    dps = 0.0
    kind = g.kind
    if kind == "lmp_estimate":
        if view.opf is None:
            raise ValueError("lmp_estimate needs an OPF solution")
        val, grad, dps = lmp_terms(view.opf, g.bus)
        return val, grad, dps
    ps, _, gps = system.slack_power(x, c, u, jac=True)
    if kind == "slack_active_power":
        val, dps = ps, 1.0
    elif kind == "total_generation_P":
        val = ps + float(np.sum(c[:system.npv]))
        gy[system.c_off:system.c_off + system.npv] = 1.0
        dps = 1.0
    elif kind == "generator_P":
        k = system.idx[g.bus]
        if k == system.slack_k:
            val, dps = ps, 1.0
        else:
            js = [j for j, kk in enumerate(system.pv_k) if kk == k]
            if not js:
                raise KeyError(f"no generator at bus {g.bus}")
            val = float(c[js[0]])
            gy[system.c_off + js[0]] = 1.0
    elif kind == "total_losses":
        val, gv = system.losses(x)
        gy[:2 * n] = gv
    elif kind == "voltage_magnitude":
        k = system.idx[g.bus]
        val = float(np.hypot(x[k], x[n + k]))
        gy[k] = x[k] / val
        gy[n + k] = x[n + k] / val
    elif kind == "infeasibility_norm":
        ci, short = _infeasibility_parts(view)
        val = float(np.sqrt(ci @ ci + short * short))
        if val > 0:
            gy[system.c_off + system.npv:system.u_off] = ci / val
            dps = short / val
    elif kind == "generation_cost":
        obj = view.objective
        if obj is None:
            raise ValueError("generation_cost needs an objective")
        val = 0.0
        for j, gen in enumerate(system.pv):
            f, df, _ = obj.cost(gen.bus, c[j])
            val += f
            gy[system.c_off + j] = df
        f, dps, _ = obj.cost(system.net.slack.bus, ps)
        val += f
        ci, short = _infeasibility_parts(view)
        w = obj.infeasibility_weight
        val += w * (ci @ ci + short * short)
        gy[system.c_off + system.npv:system.u_off] = 2.0 * w * ci
        dps += 2.0 * w * short
    gy += dps * gps
    return float(val), view.to_unknowns(gy), float(dps)


def metric_eval(g: MetricSpec, solution):
    """Metric value and its gradient over the unknowns of the solution."""
    _check(solution)
    val, grad, _ = metric_terms(g, solution)
    return val, grad


def _lu(solution):
    return solution.lu


def _indicator_rows(solution, bus_id):
    view = _view(solution)
    system = view.system
    k = system.idx[bus_id]
    if k == system.slack_k:
        return None
    return view.nz + k, view.nz + system.n + k


def state_current_sensitivity(solution, bus_id):
    """Derivative of the unknowns with respect to extra current drawn at a bus.

    Returns ``(dw/dI_real, dw/dI_imag)``. Current drawn at the slack bus does
    not enter any residual row, so both vectors are zero there.
    """
    _check(solution)
    view = _view(solution)
    rows = _indicator_rows(solution, bus_id)
    out = []
    for r in (0, 1):
        e = np.zeros(view.n_unknowns)
        if rows is not None:
            e[rows[r]] = 1.0
            out.append(-_lu(solution).solve(e))
        else:
            out.append(e)
    return tuple(out)


def residual_u_block(solution, only_binding=None):
    """Partial of the solution's residual (power flow or KKT) with respect to ``u``."""
    view = _view(solution)
    system = view.system
    if view.opf is None:
        return system.residual_u(view.x, view.c, view.u, only_binding)
    lay = view.opf.layout
    return kkt_u_block(view.opf.problem, lay, view.opf.z.values, view.lam, view.x, view.u,
                       only_binding)


def slack_power_u(solution, only_binding=None):
    view = _view(solution)
    system = view.system
    n, s = system.n, system.slack_k
    _, J, _ = system.kcl(view.x, view.c, view.u, jac=True, only_binding=only_binding)
    ucols = slice(system.u_off, system.N)
    return view.x[s] * J[s, ucols] + view.x[n + s] * J[n + s, ucols]


@dataclass(frozen=True)
class SensitivityEntry:
    device: str
    bus: int
    feature: str
    value: float


@dataclass(frozen=True)
class SensitivityReport:
    metric: str
    metric_value: float
    units: dict
    entries: tuple
    totals: dict = field(default_factory=dict)

    def value(self, device, feature):
        for e in self.entries:
            if e.device == device and e.feature == feature:
                return e.value
        raise KeyError((device, feature))

    def to_dict(self):
        return {"metric": self.metric, "metric_value": self.metric_value,
                "entries": [{"device": e.device, "bus": e.bus, "feature": e.feature, "value": e.value,
                             "units": self.units[e.feature]} for e in self.entries],
                "totals": [{"feature": f, "value": v, "units": self.units[f]}
                           for f, v in self.totals.items()]}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["device", "bus", "feature", "metric", "value", "units"])
        for e in self.entries:
            w.writerow([e.device, e.bus, e.feature, self.metric, repr(e.value), self.units[e.feature]])
        for f, v in self.totals.items():
            w.writerow(["TOTAL", "", f, self.metric, repr(v), self.units[f]])
        return buf.getvalue()


def adjoint(solution, grad):
    """Solve ``Y^T a = grad`` with the stored factorization."""
    return _lu(solution).solve_transpose(grad)


def exogenous_sensitivity(solution, g: MetricSpec, models=None, u=None):
    """Per-binding and total ``dg/du`` for every exogenous feature a model consumes."""
    _check(solution)
    view = _view(solution, g.objective)
    system = view.system
    if u is not None:
        uv = system.u_vector(u)
        if not np.array_equal(uv, view.u):
            raise UnconvergedSolution("solution was computed at a different exogenous vector")
    if models is not None:
        for bd in system.bound:
            if bd.binding.model not in models:
                from .powerflow import MissingModel
                raise MissingModel(bd.binding.model)
    val, grad, dps = metric_terms(g, solution)
    a = adjoint(solution, grad)
    entries = []
    totals = {name: 0.0 for name in system.u_names}
    for b, bd in enumerate(system.bound):
        contrib = -(a @ residual_u_block(solution, b))
        if dps != 0.0:
            contrib = contrib + dps * slack_power_u(solution, b)
        for j in bd.u_idx:
            name = system.u_names[j]
            entries.append(SensitivityEntry(bd.label, bd.binding.bus, name, float(contrib[j])))
            totals[name] += float(contrib[j])
    used = {e.feature for e in entries}
    totals = {k: v for k, v in totals.items() if k in used}
    munit = METRIC_UNITS[g.kind]
    units = {name: f"{munit}/{FEATURE_UNITS.get(name, 'unit')}" for name in system.u_names}
    return SensitivityReport(g.label, val, units, tuple(entries), totals)


def total_gradient(solution, g: MetricSpec):
    """``dg/du`` as an array over all exogenous features."""
    view = _view(solution, g.objective)
    system = view.system
    rep = exogenous_sensitivity(solution, g)
    return np.array([rep.totals.get(name, 0.0) for name in system.u_names])


def gradient_step_u(u: ExogenousVector, grad, alpha, direction="ascent", bounds=None):
    """One projected gradient step on the exogenous vector."""
    if direction not in ("ascent", "descent"):
        raise ValueError("direction must be 'ascent' or 'descent'")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if isinstance(grad, dict):
        grad = np.array([grad.get(name, 0.0) for name in u.names])
    sign = 1.0 if direction == "ascent" else -1.0
    vals = np.asarray(u.values, dtype=float) + sign * alpha * np.asarray(grad, dtype=float)
    for name, (lo, hi) in (bounds or {}).items():
        k = u.index(name)
        vals[k] = min(max(vals[k], lo), hi)
    return u.replace(values=vals)


__all__ = [
    "MetricSpec", "SensitivityReport", "UnconvergedSolution", "exogenous_sensitivity",
    "gradient_step_u", "metric_eval", "state_current_sensitivity", "total_gradient",
]
