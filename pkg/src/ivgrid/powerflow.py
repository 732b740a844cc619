"""Hybrid physics + forecast-model power flow in current-voltage form.

Unknowns ``x`` are all real bus voltages, then all imaginary bus voltages,
then one reactive output ``Q_g`` per PV generator. Controls ``c`` hold the
active-power setpoint of every PV generator followed by the (real,
imaginary) injection of every infeasibility source. Exogenous features ``u``
enter only through forecast models.

Derivatives are assembled over the stacked vector ``y = [x, c, u]`` so the
same code serves power flow, the KKT system and the sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import forecast
from .network import (ExogenousVector, InfeasibilitySource, Network, PQLoad, PVGenerator,
                      ZipLoad, branch_matrix, device_terms, pv_terms, V_FLOOR, VoltageCollapse)
from .numerics import LUFactorization, SingularMatrix


class MissingModel(KeyError):
    pass


class DidNotConverge(ArithmeticError):
    def __init__(self, message, history=(), state=None):
        super().__init__(message)
        self.history = list(history)
        self.state = state


@dataclass(frozen=True)
class _Bound:
    binding: object
    model: object
    k: int
    u_idx: np.ndarray
    label: str


class HybridSystem:
    """Index bookkeeping and derivative assembly for one network + model set."""

    def __init__(self, net: Network, models=None, u_names=()):
        models = dict(models or {})
        self.net = net
        self.models = models
        self.u_names = tuple(u_names)
        self.n = n = len(net.buses)
        self.idx = {b.id: k for k, b in enumerate(net.buses)}
        slack = net.slack
        self.slack_k = self.idx[slack.bus]
        self.v_slack = (slack.v_set_real, slack.v_set_imag)
        self.pv = net.devices_of(PVGenerator)
        self.pv_k = [self.idx[g.bus] for g in self.pv]
        self.infeas = net.devices_of(InfeasibilitySource)
        self.infeas_k = [self.idx[s.bus] for s in self.infeas]
        self.loads = [(d, self.idx[d.bus]) for d in net.devices if isinstance(d, (PQLoad, ZipLoad))]
        self.npv = len(self.pv)
        self.nx = 2 * n + self.npv
        self.nc = self.npv + 2 * len(self.infeas)
        self.nu = len(self.u_names)
        self.N = self.nx + self.nc + self.nu
        self.c_off = self.nx
        self.u_off = self.nx + self.nc
        self.gbr = branch_matrix(net)
        self.bound = []
        for fb in net.forecast_bindings:
            if fb.model not in models:
                raise MissingModel(f"no forecast model {fb.model!r} for bus {fb.bus}")
            m = models[fb.model]
            names = fb.features or m.input_spec
            if len(names) != len(m.input_spec):
                raise forecast.MissingFeature(
                    f"binding at bus {fb.bus} maps {len(names)} features, model {m.id!r} needs "
                    f"{len(m.input_spec)}")
            try:
                u_idx = np.array([self.u_names.index(f) for f in names], dtype=int)
            except ValueError:
                missing = [f for f in names if f not in self.u_names]
                raise forecast.MissingFeature(f"exogenous vector lacks {missing}") from None
            self.bound.append(_Bound(fb, m, self.idx[fb.bus], u_idx, f"{fb.model}@{fb.bus}"))

    # --- layout helpers ----------------------------------------------------

    def x_from_voltages(self, v, q_gen=None):
        x = np.zeros(self.nx)
        x[:self.n] = np.real(v)
        x[self.n:2 * self.n] = np.imag(v)
        if q_gen is not None:
            x[2 * self.n:] = q_gen
        return x

    def voltages(self, x):
        return x[:self.n] + 1j * x[self.n:2 * self.n]

    def default_controls(self):
        c = np.zeros(self.nc)
        c[:self.npv] = [g.p for g in self.pv]
        return c

    def u_vector(self, u):
        if u is None:
            return np.zeros(0)
        if isinstance(u, ExogenousVector):
            if u.names != self.u_names:
                return np.array([u[name] for name in self.u_names])
            return np.asarray(u.values, dtype=float)
        return np.array([float(u[name]) for name in self.u_names])

    def rows_of_bus(self, k):
        return k, self.n + k

    # --- raw KCL --------------------------------------------------------------

    def kcl(self, x, c, u, jac=False, mu=None, only_binding=None):
        """Sum of currents out of every bus, optionally with derivatives.

        Returns ``(K, J, H)``: ``K`` has length 2n (real rows then imaginary
        rows), ``J`` is the 2n x N Jacobian over ``y`` and ``H`` the
        ``mu``-weighted sum of row Hessians (N x N). ``only_binding`` keeps
        only the contribution of one forecast binding.
        """
        n = self.n
        K = np.zeros(2 * n)
        J = np.zeros((2 * n, self.N)) if jac or mu is not None else None
        H = np.zeros((self.N, self.N)) if mu is not None else None
        vr, vi = x[:n], x[n:2 * n]

        def scatter(k, cur, jl, hl, cols):
            K[k] += cur[0]
            K[n + k] += cur[1]
            if J is not None:
                J[k, cols] += jl[0]
                J[n + k, cols] += jl[1]
            if H is not None and hl is not None:
                w = mu[k] * hl[0] + mu[n + k] * hl[1]
                H[np.ix_(cols, cols)] += w

        if only_binding is None:
            K += self.gbr @ x[:2 * n]
            if J is not None:
                J[:, :2 * n] += self.gbr
            for d, k in self.loads:
                cur, jl, hl = device_terms(d, vr[k], vi[k])
                scatter(k, cur, jl, hl, [k, n + k])
            for j, k in enumerate(self.pv_k):
                cur, jl, hl = pv_terms(c[j], x[2 * n + j], vr[k], vi[k])
                scatter(k, cur, jl, hl, [k, n + k, 2 * n + j, self.c_off + j])
            for s, k in enumerate(self.infeas_k):
                col = self.c_off + self.npv + 2 * s
                K[k] -= c[self.npv + 2 * s]
                K[n + k] -= c[self.npv + 2 * s + 1]
                if J is not None:
                    J[k, col] -= 1.0
                    J[n + k, col + 1] -= 1.0
        for b, bd in enumerate(self.bound):
            if only_binding is not None and b != only_binding:
                continue
            k = bd.k
            if abs(complex(vr[k], vi[k])) <= V_FLOOR:
                raise VoltageCollapse(f"|V| at bus {bd.binding.bus} at or below {V_FLOOR:g}")
            xin = np.concatenate(([vr[k], vi[k]], u[bd.u_idx]))
            cols = [k, n + k, *(self.u_off + bd.u_idx)]
            if H is not None:
                cur, jl, hl = forecast.hessian_raw(bd.model, xin)
            elif J is not None:
                (cur, jl), hl = forecast.value_and_grad_raw(bd.model, xin), None
            else:
                cur, jl, hl = forecast.forward_raw(bd.model, xin), None, None
            if J is None:
                K[k] += cur[0]
                K[n + k] += cur[1]
            else:
                scatter(k, cur, jl, hl, cols)
        return K, J, H

    # --- power-flow residual -----------------------------------------------

    def residual(self, x, c, u, jac=False):
        """Power-flow residual (length nx) and, optionally, its Jacobian over ``y``."""
        n, s = self.n, self.slack_k
        K, J, _ = self.kcl(x, c, u, jac=jac)
        r = np.empty(self.nx)
        r[:2 * n] = K
        r[s] = x[s] - self.v_slack[0]
        r[n + s] = x[n + s] - self.v_slack[1]
        for j, (g, k) in enumerate(zip(self.pv, self.pv_k)):
            r[2 * n + j] = x[k] ** 2 + x[n + k] ** 2 - g.v_set_mag ** 2
        if not jac:
            return r, None
        Jr = np.zeros((self.nx, self.N))
        Jr[:2 * n] = J
        Jr[s] = 0.0
        Jr[n + s] = 0.0
        Jr[s, s] = 1.0
        Jr[n + s, n + s] = 1.0
        for j, k in enumerate(self.pv_k):
            Jr[2 * n + j, k] = 2.0 * x[k]
            Jr[2 * n + j, n + k] = 2.0 * x[n + k]
        return r, Jr

    def residual_u(self, x, c, u, only_binding=None):
        """Partial derivative of the residual with respect to ``u`` (nx x nu)."""
        n, s = self.n, self.slack_k
        _, J, _ = self.kcl(x, c, u, jac=True, only_binding=only_binding)
        out = np.zeros((self.nx, self.nu))
        out[:2 * n] = J[:, self.u_off:]
        out[s] = 0.0
        out[n + s] = 0.0
        return out

    # --- slack quantities -------------------------------------------------------

    def slack_power(self, x, c, u, jac=False, K=None, J=None):
        """Active and reactive power injected by the slack, with the gradient of P over ``y``."""
        n, s = self.n, self.slack_k
        if K is None or (jac and J is None):
            K, J, _ = self.kcl(x, c, u, jac=jac)
        vr, vi = x[s], x[n + s]
        ir, ii = K[s], K[n + s]
        p = vr * ir + vi * ii
        q = vi * ir - vr * ii
        if not jac:
            return p, q, None
        grad = vr * J[s] + vi * J[n + s]
        grad[s] += ir
        grad[n + s] += ii
        return p, q, grad

    def losses(self, x):
        v = x[:2 * self.n]
        return float(v @ self.gbr @ v), (self.gbr + self.gbr.T) @ v


@dataclass(frozen=True)
class PfOptions:
    tol: float = 1e-8
    max_iter: int = 25
    step_limit: float = 0.2
    init: str = "flat"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.init not in ("flat", "case"):
            raise ValueError("init must be 'flat' or 'case'")


@dataclass(eq=False)
class PfSolution:
    system: HybridSystem
    state: np.ndarray
    controls: np.ndarray
    u: np.ndarray
    converged: bool
    iterations: int
    residual_history: list
    final_jacobian: np.ndarray
    slack_injection: tuple
    lu: LUFactorization = field(repr=False, default=None)
    slack_schedule: float = None

    @property
    def net(self):
        return self.system.net

    @property
    def voltages(self):
        return self.system.voltages(self.state)

    def bus_voltage(self, bus_id):
        return complex(self.voltages[self.system.idx[bus_id]])

    def to_dict(self):
        v = self.voltages
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_history": [float(r) for r in self.residual_history],
            "buses": [{"id": b.id, "vm": float(abs(v[k])), "va_deg": float(np.degrees(np.angle(v[k]))),
                       "v_real": float(v[k].real), "v_imag": float(v[k].imag)}
                      for k, b in enumerate(self.net.buses)],
            "slack": {"p": float(self.slack_injection[0]), "q": float(self.slack_injection[1])},
            "vm_min": float(np.min(np.abs(v))),
            "vm_max": float(np.max(np.abs(v))),
        }


def initial_state(system: HybridSystem, init="flat"):
    net = system.net
    n = system.n
    if init == "case":
        v = np.array([b.v_init_real + 1j * b.v_init_imag for b in net.buses])
    else:
        v = np.ones(n, dtype=complex)
        for g, k in zip(system.pv, system.pv_k):
            v[k] = g.v_set_mag
    v[system.slack_k] = complex(*system.v_slack)
    return system.x_from_voltages(v)


def assemble_residual(net, models, x, u, controls=None, system=None):
    system = system or HybridSystem(net, models, _names(u))
    c = system.default_controls() if controls is None else np.asarray(controls, float)
    return system.residual(np.asarray(x, float), c, system.u_vector(u))[0]


def assemble_jacobian(net, models, x, u, controls=None, system=None):
    system = system or HybridSystem(net, models, _names(u))
    c = system.default_controls() if controls is None else np.asarray(controls, float)
    _, Jr = system.residual(np.asarray(x, float), c, system.u_vector(u), jac=True)
    return Jr[:, :system.nx]


def _names(u):
    if u is None:
        return ()
    if isinstance(u, ExogenousVector):
        return u.names
    return tuple(u)


def clamp_step(dx, n_volt, limit):
    """Scale ``dx`` so no voltage component moves more than ``limit``."""
    big = float(np.max(np.abs(dx[:n_volt]))) if n_volt else 0.0
    if big > limit:
        return dx * (limit / big)
    return dx


def solve_power_flow(net, models=None, u=None, opts=PfOptions(), controls=None, x0=None,
                     system=None, slack_schedule=None):
    """Newton-Raphson on the hybrid KCL equations.

    ``controls`` overrides PV setpoints and infeasibility injections (the
    dispatch); by default the case values are used and infeasibility
    injections are zero.
    """
    system = system or HybridSystem(net, models, _names(u))
    uv = system.u_vector(u)
    c = system.default_controls() if controls is None else np.asarray(controls, dtype=float)
    x = initial_state(system, opts.init) if x0 is None else np.array(x0, dtype=float)
    nx = system.nx
    history = []
    for it in range(opts.max_iter + 1):
        r, Jr = system.residual(x, c, uv, jac=True)
        norm = float(np.max(np.abs(r))) if r.size else 0.0
        history.append(norm)
        if not np.isfinite(norm):
            raise DidNotConverge("residual became non-finite", history, x)
        if norm <= opts.tol:
            jac = Jr[:, :nx]
            lu = LUFactorization(jac)
            p, q, _ = system.slack_power(x, c, uv)
            return PfSolution(system, x, c, uv, True, it, history, jac, (p, q), lu, slack_schedule)
        if it == opts.max_iter:
            break
        dx = LUFactorization(Jr[:, :nx]).solve(-r)
        x = x + clamp_step(dx, 2 * system.n, opts.step_limit)
    raise DidNotConverge(f"no convergence in {opts.max_iter} iterations "
                         f"(residual {history[-1]:.3e})", history, x)


__all__ = [
    "DidNotConverge", "HybridSystem", "MissingModel", "PfOptions", "PfSolution",
    "assemble_jacobian", "assemble_residual", "solve_power_flow", "SingularMatrix",
]
