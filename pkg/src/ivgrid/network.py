"""Grid data model, case documents and physics-device currents.

All currents use the load convention: a positive current flows out of the
bus into the device. Generators therefore contribute the negative of their
injection. Quantities are per-unit throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

V_FLOOR = 1e-6


class ParseError(ValueError):
    def __init__(self, message, position=None):
        self.position = position
        where = f" (at {position})" if position is not None else ""
        super().__init__(f"{message}{where}")


class ValidationError(ValueError):
    pass


class VoltageCollapse(ArithmeticError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    v_init_real: float = 1.0
    v_init_imag: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_conductance: float
    series_susceptance: float
    total_shunt_susceptance: float = 0.0

    @classmethod
    def from_impedance(cls, from_bus, to_bus, r, x, b=0.0):
        z2 = r * r + x * x
        return cls(from_bus, to_bus, r / z2, -x / z2, b)


@dataclass(frozen=True)
class Slack:
    bus: int
    v_set_real: float = 1.0
    v_set_imag: float = 0.0


@dataclass(frozen=True)
class PQLoad:
    bus: int
    p: float
    q: float = 0.0


@dataclass(frozen=True)
class PVGenerator:
    bus: int
    p: float
    v_set_mag: float = 1.0


@dataclass(frozen=True)
class ZipLoad:
    bus: int
    p0: float
    q0: float
    z_frac: float
    i_frac: float
    p_frac: float


@dataclass(frozen=True)
class InfeasibilitySource:
    bus: int


PhysicsDevice = Union[Slack, PQLoad, PVGenerator, ZipLoad, InfeasibilitySource]

DEVICE_KINDS = {
    "Slack": Slack,
    "PQLoad": PQLoad,
    "PVGenerator": PVGenerator,
    "ZipLoad": ZipLoad,
    "InfeasibilitySource": InfeasibilitySource,
}


@dataclass(frozen=True)
class ForecastBinding:
    """Attach forecast model ``model`` at ``bus``.

    ``features`` names the exogenous entries fed to the model, in the order of
    the model's ``input_spec``. An empty tuple means "use the model's own
    feature names".
    """

    bus: int
    model: str
    features: tuple = ()


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple
    branches: tuple = ()
    devices: tuple = ()
    forecast_bindings: tuple = ()

    def __post_init__(self):
        for name in ("buses", "branches", "devices", "forecast_bindings"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        validate(self)

    @property
    def bus_ids(self):
        return [b.id for b in self.buses]

    def bus_index(self, bus_id):
        for k, b in enumerate(self.buses):
            if b.id == bus_id:
                return k
        raise KeyError(f"no bus {bus_id}")

    @property
    def slack(self) -> Slack:
        return next(d for d in self.devices if isinstance(d, Slack))

    def devices_of(self, kind):
        return [d for d in self.devices if isinstance(d, kind)]


def validate(net: Network):
    if not net.base_mva > 0:
        raise ValidationError("base_mva must be positive")
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus id")
    known = set(ids)
    for b in net.buses:
        mag = math.hypot(b.v_init_real, b.v_init_imag)
        if not 0.0 < mag <= 2.0:
            raise ValidationError(f"bus {b.id}: initial voltage magnitude {mag} outside (0, 2]")
    for br in net.branches:
        if br.from_bus == br.to_bus:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus} connects a bus to itself")
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise ValidationError(f"branch references unknown bus {end}")
        if br.series_conductance == 0.0 and br.series_susceptance == 0.0:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus} has zero series admittance")
    slacks = [d for d in net.devices if isinstance(d, Slack)]
    if len(slacks) != 1:
        raise ValidationError(f"expected exactly one slack device, found {len(slacks)}")
    gen_buses = []
    for d in net.devices:
        if d.bus not in known:
            raise ValidationError(f"{type(d).__name__} references unknown bus {d.bus}")
        if isinstance(d, ZipLoad) and abs(d.z_frac + d.i_frac + d.p_frac - 1.0) > 1e-9:
            raise ValidationError(f"ZipLoad at bus {d.bus}: fractions do not sum to 1")
        if isinstance(d, PVGenerator) and not 0.0 < d.v_set_mag <= 2.0:
            raise ValidationError(f"PVGenerator at bus {d.bus}: v_set_mag outside (0, 2]")
        if isinstance(d, (Slack, PVGenerator)):
            gen_buses.append(d.bus)
    if len(set(gen_buses)) != len(gen_buses):
        raise ValidationError("at most one voltage-controlling generator per bus")
    for fb in net.forecast_bindings:
        if fb.bus not in known:
            raise ValidationError(f"forecast binding references unknown bus {fb.bus}")


# --- device currents -----------------------------------------------------


def _power_law(a_r, a_i, b_r, b_i, p, vr, vi):
    """Current ``I = (a.V, b.V) * |V|^(2p)`` with value, gradient and Hessian in (vr, vi).

    Constant power is ``p = -1``, constant current ``p = -1/2`` and constant
    impedance ``p = 0``.
    """
    d = vr * vr + vi * vi
    v = np.array([vr, vi])
    dp = d ** p
    dp1 = p * d ** (p - 1) if p != 0 else 0.0
    dp2 = p * (p - 1) * d ** (p - 2) if p != 0 else 0.0
    cur = np.empty(2)
    jac = np.empty((2, 2))
    hess = np.empty((2, 2, 2))
    eye = np.eye(2)
    for row, coef in enumerate((np.array([a_r, a_i]), np.array([b_r, b_i]))):
        lin = coef @ v
        cur[row] = lin * dp
        jac[row] = coef * dp + lin * dp1 * 2.0 * v
        hess[row] = (2.0 * dp1 * (np.outer(coef, v) + np.outer(v, coef))
                     + 2.0 * lin * dp1 * eye + 4.0 * lin * dp2 * np.outer(v, v))
    return cur, jac, hess


def _pq(p, q, vr, vi):
    # conj((P + jQ) / V)
    return _power_law(p, q, -q, p, -1.0, vr, vi)


def _check_voltage(vr, vi):
    if math.hypot(vr, vi) <= V_FLOOR:
        raise VoltageCollapse(f"|V| = {math.hypot(vr, vi):.3e} at or below {V_FLOOR:g}")


def device_terms(d, vr, vi, q_gen=0.0):
    """Current of a physics device with analytic first and second partials in (vr, vi)."""
    zeros = (np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2, 2)))
    if isinstance(d, (Slack, InfeasibilitySource)):
        # slack rows are replaced by voltage constraints; infeasibility
        # injections are controls handled by the assembler
        return zeros
    _check_voltage(vr, vi)
    if isinstance(d, PQLoad):
        return _pq(d.p, d.q, vr, vi)
    if isinstance(d, PVGenerator):
        cur, jac, hess = _pq(d.p, q_gen, vr, vi)
        return -cur, -jac, -hess
    if isinstance(d, ZipLoad):
        cur, jac, hess = zeros[0].copy(), zeros[1].copy(), zeros[2].copy()
        for frac, p in ((d.z_frac, 0.0), (d.i_frac, -0.5), (d.p_frac, -1.0)):
            if frac == 0.0:
                continue
            c, j, h = _power_law(frac * d.p0, frac * d.q0, -frac * d.q0, frac * d.p0, p, vr, vi)
            cur += c
            jac += j
            hess += h
        return cur, jac, hess
    raise TypeError(f"unknown device {d!r}")


def device_current(d, v_real, v_imag, q_gen=0.0):
    """Return ``(i_real, i_imag)`` drawn by ``d`` at voltage ``v_real + j v_imag``."""
    cur, _, _ = device_terms(d, v_real, v_imag, q_gen)
    return float(cur[0]), float(cur[1])


def device_current_jacobian(d, v_real, v_imag, q_gen=0.0):
    """2x2 matrix ``[[dIr/dVr, dIr/dVi], [dIi/dVr, dIi/dVi]]``."""
    return device_terms(d, v_real, v_imag, q_gen)[1]


def device_current_hessian(d, v_real, v_imag, q_gen=0.0):
    """Second partials, shape (2, 2, 2): output, then the two voltage components."""
    return device_terms(d, v_real, v_imag, q_gen)[2]


def pv_terms(p, q, vr, vi):
    """Generator current in the local variables (vr, vi, q, p).

    Returns value (2,), Jacobian (2, 4) and Hessian (2, 4, 4).
    """
    _check_voltage(vr, vi)
    cur, jv, hv = _pq(p, q, vr, vi)
    # the current is bilinear in (p, q): unit-p and unit-q currents give the
    # remaining first and mixed second partials
    cp, jp, _ = _pq(1.0, 0.0, vr, vi)
    cq, jq, _ = _pq(0.0, 1.0, vr, vi)
    jac = np.zeros((2, 4))
    jac[:, :2] = jv
    jac[:, 2] = cq
    jac[:, 3] = cp
    hess = np.zeros((2, 4, 4))
    hess[:, :2, :2] = hv
    hess[:, :2, 2] = hess[:, 2, :2] = jq
    hess[:, :2, 3] = hess[:, 3, :2] = jp
    return -cur, -jac, -hess


def branch_matrix(net: Network):
    """Constant 2n x 2n matrix mapping (V_R, V_I) to branch currents out of each bus."""
    n = len(net.buses)
    idx = {b.id: k for k, b in enumerate(net.buses)}
    m = np.zeros((2 * n, 2 * n))
    for br in net.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        g, b, bh = br.series_conductance, br.series_susceptance, 0.5 * br.total_shunt_susceptance
        for a, c in ((f, t), (t, f)):
            # I_a = y (V_a - V_c) + j bh V_a
            m[a, a] += g
            m[a, n + a] += -b - bh
            m[a, c] -= g
            m[a, n + c] += b
            m[n + a, a] += b + bh
            m[n + a, n + a] += g
            m[n + a, c] -= b
            m[n + a, n + c] -= g
    return m


# --- case documents ------------------------------------------------------

_DEVICE_FIELDS = {
    "Slack": ("v_set_real", "v_set_imag"),
    "PQLoad": ("p", "q"),
    "PVGenerator": ("p", "v_set_mag"),
    "ZipLoad": ("p0", "q0", "z_frac", "i_frac", "p_frac"),
    "InfeasibilitySource": (),
}


def _num(obj, key, where):
    try:
        v = obj[key]
    except (KeyError, TypeError):
        raise ValidationError(f"{where}: missing field '{key}'") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{where}: field '{key}' must be a number")
    if not math.isfinite(v):
        raise ValidationError(f"{where}: field '{key}' is not finite")
    return v


def network_from_dict(doc) -> Network:
    if not isinstance(doc, dict):
        raise ValidationError("case document must be an object")
    buses = [Bus(int(_num(b, "id", f"buses[{k}]")), float(b.get("v_init_real", 1.0)),
                 float(b.get("v_init_imag", 0.0)))
             for k, b in enumerate(doc.get("buses", []))]
    branches = [Branch(int(_num(b, "from", f"branches[{k}]")), int(_num(b, "to", f"branches[{k}]")),
                       float(_num(b, "series_conductance", f"branches[{k}]")),
                       float(_num(b, "series_susceptance", f"branches[{k}]")),
                       float(b.get("total_shunt_susceptance", 0.0)))
                for k, b in enumerate(doc.get("branches", []))]
    devices = []
    for k, d in enumerate(doc.get("devices", [])):
        kind = d.get("kind") if isinstance(d, dict) else None
        if kind not in DEVICE_KINDS:
            raise ValidationError(f"devices[{k}]: unknown kind {kind!r}")
        vals = {f: float(_num(d, f, f"devices[{k}]")) for f in _DEVICE_FIELDS[kind]}
        devices.append(DEVICE_KINDS[kind](bus=int(_num(d, "bus", f"devices[{k}]")), **vals))
    bindings = [ForecastBinding(int(_num(fb, "bus", f"forecast_bindings[{k}]")), str(fb["model"]),
                                tuple(fb.get("features", ())))
                for k, fb in enumerate(doc.get("forecast_bindings", []))]
    return Network(float(_num(doc, "base_mva", "case")), buses, branches, devices, bindings)


def network_to_dict(net: Network) -> dict:
    devices = []
    for d in net.devices:
        kind = type(d).__name__
        entry = {"kind": kind, "bus": d.bus}
        for f in _DEVICE_FIELDS[kind]:
            entry[f] = getattr(d, f)
        devices.append(entry)
    return {
        "base_mva": net.base_mva,
        "buses": [{"id": b.id, "v_init_real": b.v_init_real, "v_init_imag": b.v_init_imag}
                  for b in net.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus,
                      "series_conductance": br.series_conductance,
                      "series_susceptance": br.series_susceptance,
                      "total_shunt_susceptance": br.total_shunt_susceptance}
                     for br in net.branches],
        "devices": devices,
        "forecast_bindings": [{"bus": fb.bus, "model": fb.model, "features": list(fb.features)}
                              for fb in net.forecast_bindings],
    }


def parse_case(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, position=f"line {exc.lineno} column {exc.colno}") from None
    return network_from_dict(doc)


def serialize_case(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=2) + "\n"


def load_case(path) -> Network:
    with open(path) as fh:
        return parse_case(fh.read())


@dataclass(frozen=True)
class ExogenousVector:
    """Named exogenous features (temperature, irradiance, ...) in a fixed order."""

    names: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        object.__setattr__(self, "names", tuple(self.names))
        if vals.shape != (len(self.names),):
            raise ValueError("one value per feature name expected")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate feature name")
        if not np.all(np.isfinite(vals)):
            raise ValueError("exogenous values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_mapping(cls, mapping):
        names = tuple(mapping)
        return cls(names, [float(mapping[k]) for k in names])

    def as_dict(self):
        return {k: float(v) for k, v in zip(self.names, self.values)}

    def index(self, name):
        return self.names.index(name)

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def __len__(self):
        return len(self.names)

    def replace(self, values=None, **updates):
        vals = np.array(self.values if values is None else values, dtype=float)
        for k, v in updates.items():
            vals[self.names.index(k)] = v
        return ExogenousVector(self.names, vals)

    def __eq__(self, other):
        return (isinstance(other, ExogenousVector) and self.names == other.names
                and np.array_equal(self.values, other.values))

    __hash__ = None
