"""Equality-constrained optimal power flow solved by Newton's method on the KKT system.

The Lagrangian is ``L = f(z, x) + lam . r(x, c(z), u)`` where ``r`` is the
power-flow residual. ``f`` is the quadratic generation cost of every costed
PV generator (a decision variable), the cost of the slack generator (a
function of the state through its injected power), a quadratic penalty on
infeasibility injections and a quadratic penalty for leaving box bounds.

KKT unknowns are stacked as ``(z, lam, x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import LUFactorization, SingularMatrix
from .powerflow import (DidNotConverge, HybridSystem, PfOptions, _names, clamp_step,
                        solve_power_flow)


@dataclass(frozen=True)
class ObjectiveSpec:
    """Quadratic generator costs keyed by bus id plus an infeasibility weight."""

    generator_costs: dict = field(default_factory=dict)
    infeasibility_weight: float = 0.0

    def __post_init__(self):
        costs = {int(k): tuple(float(c) for c in v) for k, v in dict(self.generator_costs).items()}
        for bus, c in costs.items():
            if len(c) != 3:
                raise ValueError(f"cost at bus {bus} needs (c2, c1, c0)")
            if c[0] < 0:
                raise ValueError(f"c2 at bus {bus} must be non-negative")
        if self.infeasibility_weight < 0:
            raise ValueError("infeasibility weight must be non-negative")
        object.__setattr__(self, "generator_costs", costs)

    @property
    def kind(self):
        if self.generator_costs and self.infeasibility_weight > 0:
            return "weighted_sum"
        if self.infeasibility_weight > 0:
            return "infeasibility_penalty"
        return "quadratic_generation_cost"

    def cost(self, bus, p):
        """Value, first and second derivative of the generator cost at ``bus``."""
        c2, c1, c0 = self.generator_costs.get(bus, (0.0, 0.0, 0.0))
        return c2 * p * p + c1 * p + c0, 2.0 * c2 * p + c1, 2.0 * c2

    def to_dict(self):
        return {"generator_costs": {str(k): list(v) for k, v in sorted(self.generator_costs.items())},
                "infeasibility_weight": self.infeasibility_weight}

    @classmethod
    def from_dict(cls, doc):
        return cls({int(k): v for k, v in doc.get("generator_costs", {}).items()},
                   float(doc.get("infeasibility_weight", 0.0)))


@dataclass(frozen=True)
class DecisionVector:
    labels: tuple
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    slack_schedule: float = None

    def __post_init__(self):
        for name in ("values", "lower", "upper"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "labels", tuple(self.labels))
        if not (len(self.labels) == self.values.size == self.lower.size == self.upper.size):
            raise ValueError("decision vector fields have inconsistent lengths")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")

    def project(self):
        return DecisionVector(self.labels, np.clip(self.values, self.lower, self.upper),
                              self.lower, self.upper, self.slack_schedule)

    def as_dict(self):
        return dict(zip(self.labels, (float(v) for v in self.values)))

    def to_dict(self):
        return {"labels": list(self.labels), "values": [float(v) for v in self.values],
                "lower": [float(v) for v in self.lower], "upper": [float(v) for v in self.upper],
                "slack_schedule": None if self.slack_schedule is None else float(self.slack_schedule)}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["labels"], doc["values"], doc["lower"], doc["upper"], doc.get("slack_schedule"))


def control_labels(system: HybridSystem):
    labels = [f"P_g@{g.bus}" for g in system.pv]
    for s in system.infeas:
        labels += [f"i_real@{s.bus}", f"i_imag@{s.bus}"]
    return labels


def controls_from_decision(system: HybridSystem, dv: DecisionVector):
    """Full control vector with the decision entries of ``dv`` substituted."""
    c = system.default_controls()
    pos = {lab: k for k, lab in enumerate(control_labels(system))}
    for lab, v in zip(dv.labels, dv.values):
        if lab not in pos:
            raise KeyError(f"decision {lab!r} does not match any generator or infeasibility source")
        c[pos[lab]] = v
    return c


@dataclass(frozen=True)
class OpfOptions:
    tol: float = 1e-6
    max_iter: int = 50
    dual_init: float = 0.0
    bound_penalty_weight: float = 1e4
    step_limit: float = 0.2
    regularization: float = 1e-8


@dataclass(frozen=True)
class OpfProblem:
    net: object
    models: dict
    u: object
    objective: ObjectiveSpec
    bounds: dict = field(default_factory=dict)
    options: OpfOptions = OpfOptions()
    z0: dict = None

    def system(self):
        return HybridSystem(self.net, self.models, _names(self.u))


@dataclass(frozen=True)
class _Layout:
    system: HybridSystem
    sel: np.ndarray        # positions of decision entries inside the control vector
    labels: tuple
    lower: np.ndarray
    upper: np.ndarray
    slack_bus: int

    @property
    def nz(self):
        return self.sel.size

    @property
    def z_cols(self):
        return self.system.c_off + self.sel


def layout(problem: OpfProblem, system=None):
    system = system or problem.system()
    obj = problem.objective
    all_labels = control_labels(system)
    sel = [j for j, g in enumerate(system.pv) if g.bus in obj.generator_costs]
    sel += list(range(system.npv, system.nc))
    labels = tuple(all_labels[j] for j in sel)
    for lab in problem.bounds:
        if lab not in labels:
            raise KeyError(f"bounds given for unknown decision {lab!r}")
    lo = np.array([problem.bounds.get(lab, (-np.inf, np.inf))[0] for lab in labels], dtype=float)
    hi = np.array([problem.bounds.get(lab, (-np.inf, np.inf))[1] for lab in labels], dtype=float)
    if np.any(lo > hi):
        raise ValueError("lower bound above upper bound")
    if not labels and system.net.slack.bus not in obj.generator_costs:
        raise ValueError("OPF problem has no decision variable and no costed slack generator")
    return _Layout(system, np.array(sel, dtype=int), labels, lo, hi, system.net.slack.bus)


def eval_objective(obj: ObjectiveSpec, lay: _Layout, z, bound_weight=0.0):
    """Decision-variable part of the objective: value, gradient and (diagonal) Hessian."""
    z = np.asarray(z, dtype=float)
    system = lay.system
    val = 0.0
    grad = np.zeros(z.size)
    hess = np.zeros((z.size, z.size))
    for k, j in enumerate(lay.sel):
        if j < system.npv:
            f, df, d2f = obj.cost(system.pv[j].bus, z[k])
        else:
            w = obj.infeasibility_weight
            f, df, d2f = w * z[k] ** 2, 2.0 * w * z[k], 2.0 * w
        val += f
        grad[k] += df
        hess[k, k] += d2f
    if bound_weight > 0:
        pen, dpen, d2pen = bound_penalty(z, lay.lower, lay.upper, bound_weight)
        val += pen
        grad += dpen
        hess += np.diag(d2pen)
    return val, grad, hess


def bound_penalty(z, lo, hi, weight):
    over = np.maximum(0.0, z - hi)
    under = np.maximum(0.0, lo - z)
    val = float(weight * np.sum(over ** 2 + under ** 2))
    grad = 2.0 * weight * (over - under)
    d2 = np.where((over > 0) | (under > 0), 2.0 * weight, 0.0)
    return val, grad, d2


def full_controls(lay: _Layout, z, base=None):
    c = lay.system.default_controls() if base is None else np.array(base, dtype=float)
    c[lay.sel] = z
    return c


def lagrangian(problem: OpfProblem, lay: _Layout, z, lam, x, u, order=2):
    """Objective value, Lagrangian gradient over ``y`` and (order 2) Hessian over ``y``.

    Also returns the residual and its Jacobian over ``y``.
    """
    system = lay.system
    n, s = system.n, system.slack_k
    obj = problem.objective
    c = full_controls(lay, z)
    K0, _, _ = system.kcl(x, c, u)
    ps = x[s] * K0[s] + x[n + s] * K0[n + s]
    fs, dfs, d2fs = obj.cost(lay.slack_bus, ps)
    mu = np.array(lam[:2 * n], dtype=float)
    mu[s] = dfs * x[s]
    mu[n + s] = dfs * x[n + s]
    K, J, H = system.kcl(x, c, u, jac=True, mu=mu if order >= 2 else None)
    r, Jr = system.residual(x, c, u, jac=True)
    fz, gz, hz = eval_objective(obj, lay, z, problem.options.bound_penalty_weight)
    _, _, gps = system.slack_power(x, c, u, jac=True, K=K, J=J)
    grad = Jr.T @ lam + dfs * gps
    grad[lay.z_cols] += gz
    out = {"f": fz + fs, "grad": grad, "r": r, "Jr": Jr, "p_slack": ps, "slack_cost": (fs, dfs, d2fs)}
    if order >= 2:
        for j, k in enumerate(system.pv_k):
            H[k, k] += 2.0 * lam[2 * n + j]
            H[n + k, n + k] += 2.0 * lam[2 * n + j]
        H += d2fs * np.outer(gps, gps)
        for row, col in ((s, s), (n + s, n + s)):
            H[col] += dfs * J[row]
            H[:, col] += dfs * J[row]
        H[np.ix_(lay.z_cols, lay.z_cols)] += hz
        out["H"] = H
    return out


def _split(lay, w):
    nz, nx = lay.nz, lay.system.nx
    return w[:nz], w[nz:nz + nx], w[nz + nx:]


def _kkt_parts(problem, lay, w, u, order):
    z, lam, x = _split(lay, w)
    return lagrangian(problem, lay, z, lam, x, u, order)


def _kkt_vector(lay, parts):
    g = parts["grad"]
    return np.concatenate((g[lay.z_cols], parts["r"], g[:lay.system.nx]))


def _kkt_matrix(lay, parts):
    H, Jr = parts["H"], parts["Jr"]
    zc = lay.z_cols
    xc = np.arange(lay.system.nx)
    nz, nx = lay.nz, lay.system.nx
    A = np.zeros((nz + 2 * nx, nz + 2 * nx))
    A[:nz, :nz] = H[np.ix_(zc, zc)]
    A[:nz, nz:nz + nx] = Jr[:, zc].T
    A[:nz, nz + nx:] = H[np.ix_(zc, xc)]
    A[nz:nz + nx, :nz] = Jr[:, zc]
    A[nz:nz + nx, nz + nx:] = Jr[:, xc]
    A[nz + nx:, :nz] = H[np.ix_(xc, zc)]
    A[nz + nx:, nz:nz + nx] = Jr[:, xc].T
    A[nz + nx:, nz + nx:] = H[np.ix_(xc, xc)]
    return A


def assemble_kkt(problem: OpfProblem, full_state, lay=None):
    lay = lay or layout(problem)
    u = lay.system.u_vector(problem.u)
    return _kkt_vector(lay, _kkt_parts(problem, lay, np.asarray(full_state, float), u, 1))


def assemble_kkt_jacobian(problem: OpfProblem, full_state, lay=None):
    lay = lay or layout(problem)
    u = lay.system.u_vector(problem.u)
    return _kkt_matrix(lay, _kkt_parts(problem, lay, np.asarray(full_state, float), u, 2))


def kkt_u_block(problem, lay, z, lam, x, u, only_binding=None):
    """Partial derivative of the KKT vector with respect to ``u``.

    With ``only_binding`` set, only the terms that flow through that forecast
    binding are kept; summing over bindings gives the full block.
    """
    system = lay.system
    n, s = system.n, system.slack_k
    c = full_controls(lay, z)
    K0, J0, _ = system.kcl(x, c, u, jac=True)
    ps, _, gps = system.slack_power(x, c, u, jac=True, K=K0, J=J0)
    _, dfs, d2fs = problem.objective.cost(lay.slack_bus, ps)
    mu = np.array(lam[:2 * n], dtype=float)
    mu[s] = dfs * x[s]
    mu[n + s] = dfs * x[n + s]
    _, Jb, Hb = system.kcl(x, c, u, jac=True, mu=mu, only_binding=only_binding)
    ucols = slice(system.u_off, system.N)
    Hu = Hb[:, ucols].copy()
    dps_u = x[s] * Jb[s, ucols] + x[n + s] * Jb[n + s, ucols]
    Hu += d2fs * np.outer(gps, dps_u)
    Hu[s] += dfs * Jb[s, ucols]
    Hu[n + s] += dfs * Jb[n + s, ucols]
    ru = np.zeros((system.nx, system.nu))
    ru[:2 * n] = Jb[:, ucols]
    ru[s] = 0.0
    ru[n + s] = 0.0
    return np.vstack((Hu[lay.z_cols], ru, Hu[:system.nx]))


@dataclass(eq=False)
class OpfSolution:
    problem: OpfProblem
    layout: _Layout
    z: DecisionVector
    x: np.ndarray
    lam: np.ndarray
    u: np.ndarray
    controls: np.ndarray
    converged: bool
    iterations: int
    kkt_residual: float
    history: list
    final_kkt_jacobian: np.ndarray
    objective_value: float
    p_slack: float
    lu: LUFactorization = field(repr=False, default=None)

    @property
    def system(self):
        return self.layout.system

    @property
    def state(self):
        return self.x

    @property
    def unknowns(self):
        return np.concatenate((self.z.values, self.lam, self.x))

    @property
    def voltages(self):
        return self.system.voltages(self.x)

    def lmp(self):
        return {b.id: lmp_estimate(self, b.id) for b in self.system.net.buses}

    def to_dict(self):
        v = self.voltages
        lmps = self.lmp()
        sysm = self.system
        n = sysm.n
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "kkt_residual": float(self.kkt_residual),
            "history": [float(h) for h in self.history],
            "objective_value": float(self.objective_value),
            "dispatch": self.z.to_dict(),
            "slack_p": float(self.p_slack),
            "buses": [{"id": b.id, "vm": float(abs(v[k])), "va_deg": float(np.degrees(np.angle(v[k]))),
                       "lambda_real": float(self.lam[k]), "lambda_imag": float(self.lam[n + k]),
                       "lmp": float(lmps[b.id])}
                      for k, b in enumerate(sysm.net.buses)],
        }


def lmp_estimate(sol: OpfSolution, bus_id):
    """Marginal cost per unit active power at a bus, from the current-balance duals.

    At the slack bus the current rows are replaced by voltage constraints, so
    the slack generator's marginal cost is reported instead.
    """
    return lmp_terms(sol, bus_id)[0]


def lmp_terms(sol: OpfSolution, bus_id):
    """LMP estimate, its gradient over the KKT unknowns and its derivative in slack power.

    The last value multiplies the partial of the slack injection with respect
    to anything the unknowns do not capture (the exogenous features).
    """
    system = sol.system
    lay = sol.layout
    n = system.n
    k = system.idx[bus_id]
    nz, nx = lay.nz, system.nx
    grad = np.zeros(nz + 2 * nx)
    if k == system.slack_k:
        c = sol.controls
        _, _, gps = system.slack_power(sol.x, c, sol.u, jac=True)
        _, dfs, d2fs = sol.problem.objective.cost(lay.slack_bus, sol.p_slack)
        grad[:nz] = d2fs * gps[lay.z_cols]
        grad[nz + nx:] = d2fs * gps[:nx]
        return float(dfs), grad, float(d2fs)
    vr, vi = sol.x[k], sol.x[n + k]
    lr, li = sol.lam[k], sol.lam[n + k]
    d = vr * vr + vi * vi
    num = lr * vr + li * vi
    val = num / d
    grad[nz + k] = vr / d
    grad[nz + n + k] = vi / d
    grad[nz + nx + k] = lr / d - 2.0 * vr * num / d ** 2
    grad[nz + nx + n + k] = li / d - 2.0 * vi * num / d ** 2
    return float(val), grad, 0.0


def _factor(A, reg, lay, Jx):
    try:
        return LUFactorization(A)
    except SingularMatrix:
        pass
    try:
        return LUFactorization(A + reg * np.eye(A.shape[0]))
    except SingularMatrix as exc:
        try:
            LUFactorization(Jx)
            block = "Hessian/decision block"
        except SingularMatrix:
            block = "power-flow constraint block"
        err = SingularMatrix(f"KKT matrix singular after diagonal shift {reg:g}; "
                             f"rank deficiency in the {block}")
        err.block = block
        raise err from exc


def initial_decision(problem: OpfProblem, lay: _Layout):
    system = lay.system
    c = system.default_controls()
    z = c[lay.sel].copy()
    if problem.z0:
        for k, lab in enumerate(lay.labels):
            if lab in problem.z0:
                z[k] = problem.z0[lab]
    lo = np.where(np.isfinite(lay.lower), lay.lower, -np.inf)
    hi = np.where(np.isfinite(lay.upper), lay.upper, np.inf)
    return np.clip(z, lo, hi)


def solve_opf(problem: OpfProblem, x0=None) -> OpfSolution:
    """Newton iterations on the KKT conditions, warm-started from a power flow."""
    opts = problem.options
    lay = layout(problem)
    system = lay.system
    u = system.u_vector(problem.u)
    z = initial_decision(problem, lay)
    try:
        pf = solve_power_flow(system.net, system.models, problem.u, PfOptions(max_iter=50),
                              controls=full_controls(lay, z), x0=x0, system=system)
        x = pf.state
    except DidNotConverge as exc:
        if exc.state is None:
            raise
        x = exc.state
    lam = np.full(system.nx, float(opts.dual_init))
    w = np.concatenate((z, lam, x))
    nz, nx = lay.nz, system.nx
    history = []
    for it in range(opts.max_iter + 1):
        parts = _kkt_parts(problem, lay, w, u, 2)
        F = _kkt_vector(lay, parts)
        norm = float(np.max(np.abs(F)))
        history.append(norm)
        if not np.isfinite(norm):
            raise DidNotConverge("KKT residual became non-finite", history, w)
        A = _kkt_matrix(lay, parts)
        if norm <= opts.tol:
            lu = _factor(A, opts.regularization, lay, parts["Jr"][:, :nx])
            zf, lamf, xf = _split(lay, w)
            c = full_controls(lay, zf)
            dv = DecisionVector(lay.labels, zf, lay.lower, lay.upper, parts["p_slack"])
            return OpfSolution(problem, lay, dv, xf.copy(), lamf.copy(), u, c, True, it, norm,
                               history, A, parts["f"], parts["p_slack"], lu)
        if it == opts.max_iter:
            break
        lu = _factor(A, opts.regularization, lay, parts["Jr"][:, :nx])
        dw = lu.solve(-F)
        # clamp on the voltage entries only
        dv_idx = np.arange(nz + nx, nz + nx + 2 * system.n)
        big = float(np.max(np.abs(dw[dv_idx]))) if dv_idx.size else 0.0
        if big > opts.step_limit:
            dw = dw * (opts.step_limit / big)
        w = w + dw
    raise DidNotConverge(f"OPF did not converge in {opts.max_iter} iterations "
                         f"(KKT residual {history[-1]:.3e})", history, w)


__all__ = [
    "DecisionVector", "ObjectiveSpec", "OpfOptions", "OpfProblem", "OpfSolution",
    "assemble_kkt", "assemble_kkt_jacobian", "clamp_step", "control_labels", "controls_from_decision",
    "eval_objective", "lmp_estimate", "solve_opf",
]
