"""Differentiable current-voltage forecast models.

A model maps ``(v_real, v_imag, *features)`` to the current ``(i_real, i_imag)``
drawn by a forecasted device. The network is a small fully-connected tanh
MLP with an affine input/output normalization baked in, so callers work in
raw per-unit voltages and physical feature units.

Input-derivative layout used by :func:`backward` and :func:`hessian`: column
0 is ``v_real``, column 1 is ``v_imag`` and columns ``2:`` follow
``input_spec``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .network import ParseError, PQLoad, ZipLoad, device_current, device_terms

MIN_SCALE = 1e-6


class MissingFeature(KeyError):
    pass


class DivergedTraining(ArithmeticError):
    pass


class ShapeMismatch(ValueError):
    pass


class ModelParseError(ParseError):
    pass


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ForecastModel:
    id: str
    layer_dims: tuple
    weights: tuple = field(repr=False)
    biases: tuple = field(repr=False)
    input_spec: tuple = ()
    activation: str = "tanh"
    in_center: np.ndarray = field(default=None, repr=False)
    in_scale: np.ndarray = field(default=None, repr=False)
    out_center: np.ndarray = field(default=None, repr=False)
    out_scale: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        spec = tuple(self.input_spec)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "input_spec", spec)
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(dims) < 2 or dims[-1] != 2:
            raise ShapeMismatch("output dimension must be 2")
        if dims[0] != 2 + len(spec):
            raise ShapeMismatch(f"input dimension {dims[0]} != 2 + {len(spec)} features")
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        if len(ws) != len(dims) - 1 or len(bs) != len(dims) - 1:
            raise ShapeMismatch("one weight matrix and bias per layer expected")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise ShapeMismatch(f"layer {k}: weight {w.shape} / bias {b.shape} "
                                    f"inconsistent with layer_dims {dims}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite weights")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        d = dims[0]
        defaults = {"in_center": np.zeros(d), "in_scale": np.ones(d),
                    "out_center": np.zeros(2), "out_scale": np.ones(2)}
        for name, default in defaults.items():
            val = getattr(self, name)
            val = _frozen(default if val is None else val)
            if val.shape != default.shape:
                raise ShapeMismatch(f"{name} has shape {val.shape}, expected {default.shape}")
            object.__setattr__(self, name, val)
        if np.any(self.in_scale <= 0) or np.any(self.out_scale <= 0):
            raise ValueError("normalization scales must be positive")

    @property
    def n_inputs(self):
        return self.layer_dims[0]

    def with_params(self, weights, biases):
        return ForecastModel(self.id, self.layer_dims, weights, biases, self.input_spec,
                             self.activation, self.in_center, self.in_scale,
                             self.out_center, self.out_scale)


def init_model(model_id, input_spec=(), hidden=(16, 16), seed=0, data=None):
    """Randomly initialized model; normalization is fitted to ``data`` when given."""
    input_spec = tuple(input_spec)
    dims = (2 + len(input_spec), *hidden, 2)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for k in range(len(dims) - 1):
        limit = math.sqrt(6.0 / (dims[k] + dims[k + 1]))
        ws.append(rng.uniform(-limit, limit, size=(dims[k + 1], dims[k])))
        bs.append(np.zeros(dims[k + 1]))
    norm = {}
    if data is not None:
        x, y = data.inputs(input_spec), data.targets()
        lo, hi = x.min(axis=0), x.max(axis=0)
        norm["in_center"] = 0.5 * (lo + hi)
        norm["in_scale"] = np.maximum(0.5 * (hi - lo), MIN_SCALE)
        ylo, yhi = y.min(axis=0), y.max(axis=0)
        norm["out_center"] = 0.5 * (ylo + yhi)
        # one shared output scale keeps the training loss proportional to the
        # physical mean-squared error
        norm["out_scale"] = np.full(2, max(0.5 * float(np.max(yhi - ylo)), MIN_SCALE))
    return ForecastModel(model_id, dims, ws, bs, input_spec, **norm)


def _input_row(m, v_real, v_imag, u):
    x = np.empty(m.n_inputs)
    x[0], x[1] = v_real, v_imag
    for k, name in enumerate(m.input_spec):
        try:
            x[2 + k] = u[name]
        except (KeyError, ValueError, IndexError):
            raise MissingFeature(f"model {m.id!r} needs feature {name!r}") from None
    return x


def _as_input(m, v_real, v_imag, u):
    if u is None:
        u = {}
    if isinstance(u, np.ndarray):
        if u.shape != (m.n_inputs - 2,):
            raise MissingFeature(f"model {m.id!r} expects {m.n_inputs - 2} features")
        return np.concatenate(([v_real, v_imag], u))
    return _input_row(m, v_real, v_imag, u)


def forward_raw(m: ForecastModel, x):
    """Evaluate the model on a full input row (or a batch of rows)."""
    h = (np.asarray(x, dtype=float) - m.in_center) / m.in_scale
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        h = np.tanh(h @ w.T + b)
    out = h @ m.weights[-1].T + m.biases[-1]
    return m.out_center + m.out_scale * out


def forward(m: ForecastModel, v_real, v_imag, u=None):
    """Predicted ``(i_real, i_imag)``; ``u`` is a mapping or a feature array."""
    y = forward_raw(m, _as_input(m, v_real, v_imag, u))
    return float(y[0]), float(y[1])


def value_and_grad_raw(m: ForecastModel, x):
    """Output (2,) and input Jacobian (2, d) by one reverse sweep per output."""
    xn = (np.asarray(x, dtype=float) - m.in_center) / m.in_scale
    acts = [xn]
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        acts.append(np.tanh(w @ acts[-1] + b))
    out = m.weights[-1] @ acts[-1] + m.biases[-1]
    # adjoint seeds for both outputs at once: rows are outputs
    adj = np.diag(m.out_scale) @ m.weights[-1]
    for k in range(len(m.weights) - 2, -1, -1):
        adj = (adj * (1.0 - acts[k + 1] ** 2)) @ m.weights[k]
    return m.out_center + m.out_scale * out, adj / m.in_scale


def backward(m: ForecastModel, v_real, v_imag, u=None):
    """Input Jacobian of the forecast, shape (2, 2 + n_features).

    Row 0 holds ``dI_R / d(v_real, v_imag, features)``, row 1 the same for
    ``I_I``.
    """
    return value_and_grad_raw(m, _as_input(m, v_real, v_imag, u))[1]


def hessian_raw(m: ForecastModel, x):
    """Value, Jacobian and per-output input Hessians (2, d, d).

    Propagates first and second input derivatives forward through each
    layer: for ``h = tanh(a)``, ``dh = s' da`` and
    ``d2h = s'' da da^T + s' d2a``.
    """
    xn = (np.asarray(x, dtype=float) - m.in_center) / m.in_scale
    d = xn.size
    h = xn
    jac = np.eye(d)
    hess = np.zeros((d, d, d))
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        a = w @ h + b
        ja = w @ jac
        ha = np.einsum("ij,jkl->ikl", w, hess)
        t = np.tanh(a)
        s1 = 1.0 - t * t
        s2 = -2.0 * t * s1
        h = t
        jac = s1[:, None] * ja
        hess = s2[:, None, None] * np.einsum("ik,il->ikl", ja, ja) + s1[:, None, None] * ha
    w, b = m.weights[-1], m.biases[-1]
    out = w @ h + b
    jo = w @ jac
    ho = np.einsum("ij,jkl->ikl", w, hess)
    inv = 1.0 / m.in_scale
    value = m.out_center + m.out_scale * out
    jac_x = m.out_scale[:, None] * jo * inv[None, :]
    hess_x = m.out_scale[:, None, None] * ho * np.outer(inv, inv)[None, :, :]
    return value, jac_x, hess_x


def hessian(m: ForecastModel, v_real, v_imag, u=None):
    """Second input derivatives of both outputs, shape (2, d, d), d = 2 + n_features."""
    return hessian_raw(m, _as_input(m, v_real, v_imag, u))[2]


# --- training ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainingSet:
    v_real: np.ndarray
    v_imag: np.ndarray
    features: dict
    y_real: np.ndarray
    y_imag: np.ndarray

    def __post_init__(self):
        n = len(self.v_real)
        if n == 0:
            raise ValueError("training set is empty")
        cols = [self.v_real, self.v_imag, self.y_real, self.y_imag, *self.features.values()]
        for c in cols:
            if len(c) != n:
                raise ValueError("all columns must have the same length")
            if not np.all(np.isfinite(c)):
                raise ValueError("training data must be finite")

    def __len__(self):
        return len(self.v_real)

    def inputs(self, input_spec):
        cols = [self.v_real, self.v_imag]
        for name in input_spec:
            if name not in self.features:
                raise MissingFeature(f"training set lacks feature {name!r}")
            cols.append(self.features[name])
        return np.column_stack(cols).astype(float)

    def targets(self):
        return np.column_stack([self.y_real, self.y_imag]).astype(float)

    def to_dict(self):
        return {
            "features": list(self.features),
            "samples": {
                "v_real": [float(v) for v in self.v_real],
                "v_imag": [float(v) for v in self.v_imag],
                **{k: [float(v) for v in vals] for k, vals in self.features.items()},
                "y_real": [float(v) for v in self.y_real],
                "y_imag": [float(v) for v in self.y_imag],
            },
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            s = doc["samples"]
            feats = {k: np.asarray(s[k], dtype=float) for k in doc.get("features", [])}
            return cls(np.asarray(s["v_real"], float), np.asarray(s["v_imag"], float), feats,
                       np.asarray(s["y_real"], float), np.asarray(s["y_imag"], float))
        except (KeyError, TypeError) as exc:
            raise ModelParseError(f"malformed training set: {exc}") from None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 2000
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    l2_penalty: float = 0.0
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")


def _batch_loss_grads(ws, bs, xn, yn):
    """Normalized-space MSE and its gradients with respect to weights and biases."""
    acts = [xn]
    for w, b in zip(ws[:-1], bs[:-1]):
        acts.append(np.tanh(acts[-1] @ w.T + b))
    out = acts[-1] @ ws[-1].T + bs[-1]
    err = out - yn
    n = xn.shape[0]
    loss = float(np.mean(err ** 2))
    delta = 2.0 * err / (n * err.shape[1])
    gw = [None] * len(ws)
    gb = [None] * len(ws)
    for k in range(len(ws) - 1, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ ws[k]) * (1.0 - acts[k] ** 2)
    return loss, gw, gb


def _loss(ws, bs, xn, yn):
    h = xn
    for w, b in zip(ws[:-1], bs[:-1]):
        h = np.tanh(h @ w.T + b)
    return float(np.mean((h @ ws[-1].T + bs[-1] - yn) ** 2))


def mse(m: ForecastModel, data: TrainingSet):
    pred = forward_raw(m, data.inputs(m.input_spec))
    return float(np.mean((pred - data.targets()) ** 2))


def train(m: ForecastModel, data: TrainingSet, cfg: TrainConfig = TrainConfig()):
    """Fit the weights by (mini-batch) gradient descent with momentum.

    The model's normalization is kept fixed. Returns the trained copy and the
    physical mean-squared error recorded after every epoch (entry 0 is the
    initial error).
    """
    x = data.inputs(m.input_spec)
    y = data.targets()
    xn = (x - m.in_center) / m.in_scale
    yn = (y - m.out_center) / m.out_scale
    # loss in normalized units equals physical mse divided by scale^2
    to_phys = float(np.mean(m.out_scale ** 2))
    ws = [w.copy() for w in m.weights]
    bs = [b.copy() for b in m.biases]
    vw = [np.zeros_like(w) for w in ws]
    vb = [np.zeros_like(b) for b in bs]
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    bsz = n if cfg.batch_size <= 0 or cfg.batch_size >= n else cfg.batch_size
    history = [mse(m, data)]
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.epochs):
            order = rng.permutation(n) if bsz < n else None
            for start in range(0, n, bsz):
                sel = slice(None) if order is None else order[start:start + bsz]
                _, gw, gb = _batch_loss_grads(ws, bs, xn[sel], yn[sel])
                for k in range(len(ws)):
                    gw[k] = gw[k] + 2.0 * cfg.l2_penalty * ws[k]
                    vw[k] = cfg.momentum * vw[k] - cfg.learning_rate * gw[k]
                    vb[k] = cfg.momentum * vb[k] - cfg.learning_rate * gb[k]
                    ws[k] = ws[k] + vw[k]
                    bs[k] = bs[k] + vb[k]
            loss = _loss(ws, bs, xn, yn) * to_phys
            if not math.isfinite(loss) or not all(np.all(np.isfinite(w)) for w in ws):
                raise DivergedTraining(f"loss became non-finite after {len(history)} epochs")
            history.append(loss)
    return m.with_params(ws, bs), history


# --- synthetic data ------------------------------------------------------


@dataclass(frozen=True)
class ExogenousResponse:
    """Affine temperature/irradiance modulation of a device's nominal power.

    ``P(u) = P_nom (1 + alpha_t (T - t_ref)) (1 - alpha_s irradiance / 1000)``,
    applied to both active and reactive power.
    """

    alpha_t: float = 0.0
    alpha_s: float = 0.0
    t_ref: float = 25.0
    temperature: str = "temperature"
    irradiance: str = "irradiance"

    def factor(self, u):
        t = u.get(self.temperature, self.t_ref)
        s = u.get(self.irradiance, 0.0)
        return (1.0 + self.alpha_t * (t - self.t_ref)) * (1.0 - self.alpha_s * s / 1000.0)


def scaled_device(device, k):
    if isinstance(device, PQLoad):
        return PQLoad(device.bus, device.p * k, device.q * k)
    if isinstance(device, ZipLoad):
        return ZipLoad(device.bus, device.p0 * k, device.q0 * k,
                       device.z_frac, device.i_frac, device.p_frac)
    raise TypeError(f"no exogenous response defined for {type(device).__name__}")


def ground_truth_current(device, response, v_real, v_imag, u):
    return device_current(scaled_device(device, response.factor(u)), v_real, v_imag)


def generate_training_data(device, response, v_range=(0.8, 1.2), u_ranges=None, n=1000,
                           seed=0, angle_deg=15.0):
    """Sample voltages and features uniformly and label them with the ground truth."""
    lo, hi = v_range
    if not (0.0 < lo <= hi <= 2.0):
        raise ValueError(f"voltage range {v_range} must lie within (0, 2]")
    if n < 1:
        raise ValueError("n must be >= 1")
    u_ranges = dict(u_ranges or {})
    rng = np.random.default_rng(seed)
    mag = rng.uniform(lo, hi, n)
    ang = np.deg2rad(rng.uniform(-angle_deg, angle_deg, n))
    feats = {}
    for name, (a, b) in u_ranges.items():
        if a > b:
            raise ValueError(f"range for {name} is inverted")
        feats[name] = rng.uniform(a, b, n)
    vr, vi = mag * np.cos(ang), mag * np.sin(ang)
    yr, yi = np.empty(n), np.empty(n)
    for s in range(n):
        u = {k: v[s] for k, v in feats.items()}
        yr[s], yi[s] = ground_truth_current(device, response, vr[s], vi[s], u)
    return TrainingSet(vr, vi, feats, yr, yi)


# --- persistence -----------------------------------------------------------


def _nested(a):
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(m: ForecastModel) -> dict:
    return {
        "id": m.id,
        "layer_dims": list(m.layer_dims),
        "activation": m.activation,
        "input_spec": list(m.input_spec),
        "normalization": {
            "in_center": _nested(m.in_center),
            "in_scale": _nested(m.in_scale),
            "out_center": _nested(m.out_center),
            "out_scale": _nested(m.out_scale),
        },
        "weights": [{"W": _nested(w), "b": _nested(b)} for w, b in zip(m.weights, m.biases)],
    }


def save_model(m: ForecastModel) -> str:
    """Model weights document.

    Floats are written with Python's shortest round-trip representation
    (at most 17 significant digits), so loading restores every weight bit
    for bit.
    """
    return json.dumps(model_to_dict(m), indent=1) + "\n"


def model_from_dict(doc) -> ForecastModel:
    try:
        norm = doc["normalization"]
        layers = doc["weights"]
        return ForecastModel(
            id=str(doc["id"]),
            layer_dims=tuple(int(d) for d in doc["layer_dims"]),
            weights=[np.array(l["W"], dtype=float) for l in layers],
            biases=[np.array(l["b"], dtype=float) for l in layers],
            input_spec=tuple(doc["input_spec"]),
            activation=doc.get("activation", "tanh"),
            in_center=norm["in_center"], in_scale=norm["in_scale"],
            out_center=norm["out_center"], out_scale=norm["out_scale"],
        )
    except ShapeMismatch:
        raise
    except (KeyError, TypeError, IndexError) as exc:
        raise ModelParseError(f"malformed model document: {exc!r}") from None
    except ValueError as exc:
        if "inhomogeneous" in str(exc) or "could not convert" in str(exc):
            raise ShapeMismatch(str(exc)) from None
        raise


def load_model(text: str) -> ForecastModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{exc.msg} at line {exc.lineno} column {exc.colno}") from None
    return model_from_dict(doc)


# --- comparison with a constant-power surrogate ----------------------------


def fit_pq_surrogate(current_fn, voltages):
    """Least-squares constant (P, Q) whose current ``conj((P + jQ) / V)`` best matches ``current_fn``."""
    rows, rhs = [], []
    for v in voltages:
        vr, vi = v.real, v.imag
        d = vr * vr + vi * vi
        # i_real = (P vr + Q vi)/d, i_imag = (P vi - Q vr)/d
        rows += [[vr / d, vi / d], [vi / d, -vr / d]]
        rhs += list(current_fn(vr, vi))
    (p, q), *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    return PQLoad(0, float(p), float(q))


def sensitivity_curves(model, device, response, u, v_grid):
    """Voltage partials of ground truth, trained model and best-fit PQ surrogate along ``v_grid``.

    ``v_grid`` holds real voltage magnitudes (angle zero). Returns the
    surrogate and a list of row dicts with the 2x2 partials of each and the
    Frobenius error of model and surrogate against the ground truth.
    """
    truth = scaled_device(device, response.factor(dict(u)))
    voltages = [complex(v, 0.0) for v in v_grid]
    surrogate = fit_pq_surrogate(lambda vr, vi: device_current(truth, vr, vi), voltages)
    rows = []
    for v in voltages:
        jt = device_terms(truth, v.real, v.imag)[1]
        jm = backward(model, v.real, v.imag, u)[:, :2]
        js = device_terms(surrogate, v.real, v.imag)[1]
        rows.append({"v": v.real, "truth": jt, "model": jm, "surrogate": js,
                     "model_error": float(np.linalg.norm(jm - jt)),
                     "surrogate_error": float(np.linalg.norm(js - jt))})
    return surrogate, rows


def curves_csv(rows):
    names = ("dIr_dVr", "dIr_dVi", "dIi_dVr", "dIi_dVi")
    head = ["v"] + [f"{who}_{n}" for who in ("truth", "model", "surrogate") for n in names]
    head += ["model_error", "surrogate_error"]
    lines = [",".join(head)]
    for r in rows:
        vals = [r["v"]]
        for who in ("truth", "model", "surrogate"):
            vals += list(np.asarray(r[who]).ravel())
        vals += [r["model_error"], r["surrogate_error"]]
        lines.append(",".join(repr(float(x)) for x in vals))
    return "\n".join(lines) + "\n"
