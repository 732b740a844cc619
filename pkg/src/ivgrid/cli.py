"""Command-line entry point: ``ivgrid <subcommand> ...``.

Exit status is 0 on success, 1 when a solver fails and 2 for usage or input
errors. Result documents are written atomically and start with a header
block holding the tool version, SHA-256 digests of the inputs and the seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from . import forecast as F
from .network import (ExogenousVector, ParseError, PQLoad, ValidationError, VoltageCollapse,
                      ZipLoad, parse_case)
from .numerics import SingularMatrix
from .opf import DecisionVector, ObjectiveSpec, OpfOptions, OpfProblem, solve_opf
from .powerflow import DidNotConverge, MissingModel, PfOptions, solve_power_flow
from .robust import (AllRestartsFailed, AttackConfig, BilevelConfig, ScenarioDistribution,
                     attacker_defender, monte_carlo_eval)
from .sensitivity import MetricSpec, UnconvergedSolution, exogenous_sensitivity

TOOL = "ivgrid"


class UsageError(Exception):
    pass


_SOLVER_ERRORS = (DidNotConverge, SingularMatrix, VoltageCollapse, AllRestartsFailed,
                  F.DivergedTraining, UnconvergedSolution)
_INPUT_ERRORS = (ParseError, ValidationError, MissingModel, F.MissingFeature, F.ShapeMismatch,
                 KeyError, ValueError, OSError)


# --- I/O helpers ---------------------------------------------------------------


class _Inputs:
    """Reads input files and remembers their digests for the header block."""

    def __init__(self):
        self.digests = {}

    def text(self, path):
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"input file not found: {path}")
        data = p.read_bytes()
        self.digests[str(path)] = hashlib.sha256(data).hexdigest()
        return data.decode("utf-8")

    def json(self, path):
        try:
            return json.loads(self.text(path))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", position=f"line {exc.lineno} column {exc.colno}")


def _header(args, inputs, seed=None):
    return {"tool": TOOL, "version": __version__, "command": args.command,
            "inputs": dict(sorted(inputs.digests.items())), "seed": seed}


def _atomic_write(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise UsageError(f"output directory does not exist: {path.parent}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_doc(header, payload):
    return json.dumps({"header": header, **payload}, indent=2) + "\n"


def _csv_doc(header, rows):
    buf = io.StringIO()
    buf.write("".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in header.items()))
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _range(text, name):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"{name} must look like LO:HI, got {text!r}") from None
    if lo > hi:
        raise UsageError(f"{name} is inverted: {text}")
    return lo, hi


def _named_ranges(items, flag):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{flag} must look like NAME=LO:HI, got {item!r}")
        name, rng = item.split("=", 1)
        out[name] = _range(rng, flag)
    return out


def _metric(text):
    kind, _, bus = text.partition(":")
    try:
        return MetricSpec(kind, int(bus) if bus else None)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --- loading problems --------------------------------------------------------------


def _load_models(inputs, paths, base=Path(".")):
    models = {}
    for p in paths or []:
        m = F.load_model(inputs.text(base / p))
        models[m.id] = m
    return models


def _load_u(inputs, path, base=Path(".")):
    if path is None:
        return ExogenousVector((), [])
    doc = inputs.json(base / path)
    doc.pop("header", None)
    return ExogenousVector.from_mapping(doc)


def _load_problem(args, inputs):
    """OPF problem from ``--problem`` or from ``--case/--models/--u/--objective``."""
    if getattr(args, "problem", None):
        doc = inputs.json(args.problem)
        base = Path(args.problem).parent
        net = parse_case(inputs.text(base / doc["case"]))
        models = _load_models(inputs, doc.get("models", []), base)
        u = _load_u(inputs, doc.get("u"), base)
        obj = ObjectiveSpec.from_dict(doc.get("objective", {}))
        bounds = {k: tuple(v) for k, v in doc.get("bounds", {}).items()}
        opts = OpfOptions(**doc.get("options", {}))
        return OpfProblem(net, models, u, obj, bounds, opts), doc
    if not args.case:
        raise UsageError("either --problem or --case is required")
    net = parse_case(inputs.text(args.case))
    models = _load_models(inputs, args.models)
    u = _load_u(inputs, args.u)
    obj = ObjectiveSpec.from_dict(inputs.json(args.objective)) if getattr(args, "objective", None) \
        else ObjectiveSpec({net.slack.bus: (1.0, 0.0, 0.0)})
    return OpfProblem(net, models, u, obj), {}


# --- subcommands -----------------------------------------------------------------


_PRESETS = {
    "residential": (ZipLoad(0, 0.04, 0.015, 0.3, 0.3, 0.4), F.ExogenousResponse(0.02, 0.5)),
    "commercial": (ZipLoad(0, 0.15, 0.05, 0.5, 0.2, 0.3), F.ExogenousResponse(0.015, 0.1)),
}


def _device(text, alpha_t, alpha_s):
    if text in _PRESETS:
        dev, resp = _PRESETS[text]
        if alpha_t is not None or alpha_s is not None:
            resp = F.ExogenousResponse(resp.alpha_t if alpha_t is None else alpha_t,
                                       resp.alpha_s if alpha_s is None else alpha_s)
        return dev, resp
    kind, _, vals = text.partition(":")
    try:
        nums = [float(v) for v in vals.split(",")] if vals else []
        if kind == "pq" and len(nums) == 2:
            dev = PQLoad(0, *nums)
        elif kind == "zip" and len(nums) == 5:
            dev = ZipLoad(0, *nums)
        else:
            raise ValueError
    except (ValueError, ValidationError):
        raise UsageError(f"--device must be a preset {sorted(_PRESETS)}, pq:P,Q or "
                         f"zip:P0,Q0,Z,I,P; got {text!r}") from None
    return dev, F.ExogenousResponse(alpha_t or 0.0, alpha_s or 0.0)


def cmd_gen_data(args):
    inputs = _Inputs()
    dev, resp = _device(args.device, args.alpha_t, args.alpha_s)
    v_range = _range(args.v_range, "--v-range")
    if not 0.0 < v_range[0] <= v_range[1] <= 2.0:
        raise UsageError("--v-range must lie within (0, 2]")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    u_ranges = _named_ranges(args.u_range, "--u-range")
    data = F.generate_training_data(dev, resp, v_range, u_ranges, args.n, args.seed, args.angle_deg)
    _atomic_write(args.out, _json_doc(_header(args, inputs, args.seed), data.to_dict()))
    y = data.targets()
    print(f"samples {len(data)}; i_real mean {y[:, 0].mean():.6g} std {y[:, 0].std():.6g}; "
          f"i_imag mean {y[:, 1].mean():.6g} std {y[:, 1].std():.6g}")
    return 0


def cmd_train(args):
    inputs = _Inputs()
    doc = inputs.json(args.data)
    data = F.TrainingSet.from_dict(doc)
    features = tuple(args.features.split(",")) if args.features else tuple(doc.get("features", []))
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else ()
    m0 = F.init_model(args.id, features, hidden, args.seed, data)
    cfg = F.TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                        seed=args.seed, l2_penalty=args.l2)
    model, hist = F.train(m0, data, cfg)
    doc = {"header": _header(args, inputs, args.seed), **F.model_to_dict(model)}
    _atomic_write(args.out, json.dumps(doc, indent=1) + "\n")
    print(f"trained {model.id}: mse {hist[0]:.6g} -> {hist[-1]:.6g} over {cfg.epochs} epochs")
    return 0


def cmd_pf(args):
    inputs = _Inputs()
    net = parse_case(inputs.text(args.case))
    models = _load_models(inputs, args.models)
    u = _load_u(inputs, args.u)
    sol = solve_power_flow(net, models, u, PfOptions(args.tol, args.max_iter, args.step_limit, args.init))
    res = sol.to_dict()
    header = _header(args, inputs)
    if args.format == "csv":
        rows = [["bus", "vm", "va_deg", "v_real", "v_imag"]]
        rows += [[b["id"], repr(b["vm"]), repr(b["va_deg"]), repr(b["v_real"]), repr(b["v_imag"])]
                 for b in res["buses"]]
        _atomic_write(args.out, _csv_doc(header, rows))
    else:
        _atomic_write(args.out, _json_doc(header, res))
    print(f"converged in {sol.iterations} iterations; vm min {res['vm_min']:.6f} "
          f"max {res['vm_max']:.6f}; slack P {res['slack']['p']:.6f} Q {res['slack']['q']:.6f}")
    return 0


def cmd_opf(args):
    inputs = _Inputs()
    problem, _ = _load_problem(args, inputs)
    sol = solve_opf(problem)
    res = sol.to_dict()
    header = _header(args, inputs)
    if args.format == "csv":
        rows = [["bus", "vm", "va_deg", "lambda_real", "lambda_imag", "lmp"]]
        rows += [[b["id"], repr(b["vm"]), repr(b["va_deg"]), repr(b["lambda_real"]),
                  repr(b["lambda_imag"]), repr(b["lmp"])] for b in res["buses"]]
        _atomic_write(args.out, _csv_doc(header, rows))
    else:
        _atomic_write(args.out, _json_doc(header, res))
    print(f"converged in {sol.iterations} iterations; objective {sol.objective_value:.6f}; "
          f"KKT residual {sol.kkt_residual:.3e}")
    return 0


def cmd_sens(args):
    inputs = _Inputs()
    g = _metric(args.metric)
    problem, _ = _load_problem(args, inputs)
    mode = args.solution or ("opf" if args.problem or args.objective else "pf")
    if mode == "opf":
        sol = solve_opf(problem)
    else:
        sol = solve_power_flow(problem.net, problem.models, problem.u, PfOptions(tol=1e-10))
    rep = exogenous_sensitivity(sol, g)
    header = _header(args, inputs)
    if args.format == "json":
        _atomic_write(args.out, _json_doc(header, rep.to_dict()))
    else:
        _atomic_write(args.out, _csv_doc(header, list(csv.reader(io.StringIO(rep.to_csv())))))
    print(f"{g.label} = {rep.metric_value:.6g}; {len(rep.entries)} entries written to {args.out}")
    return 0


def cmd_robust(args):
    inputs = _Inputs()
    problem, doc = _load_problem(args, inputs)
    g = _metric(args.metric)
    bounds = _named_ranges(args.bounds, "--bounds") or {k: tuple(v) for k, v in
                                                         doc.get("attack_bounds", {}).items()}
    if not bounds:
        raise UsageError("--bounds NAME=LO:HI is required")
    acfg = AttackConfig(bounds, alpha=args.alpha, max_steps=args.max_steps, restarts=args.restarts,
                        seed=args.seed)
    res = attacker_defender(BilevelConfig(problem, acfg, args.rounds), g)
    header = _header(args, inputs, args.seed)
    if args.format == "csv":
        rows = [["round", "attack", "defense"]] + [[r, repr(a), repr(d)] for r, a, d in res.trace]
        _atomic_write(args.out, _csv_doc(header, rows))
    else:
        _atomic_write(args.out, _json_doc(header, res.to_dict()))
    print(f"{len(res.trace)} rounds (converged: {res.converged}); worst u {res.u_worst.as_dict()}; "
          f"final attack value {res.trace[-1][1]:.6g}")
    return 0


def _dist(items, samples, seed):
    feats = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--dist must look like NAME=uniform:LO:HI or NAME=normal:MU:SD:LO:HI")
        name, spec = item.split("=", 1)
        kind, *vals = spec.split(":")
        try:
            feats[name] = (kind, *(float(v) for v in vals))
        except ValueError:
            raise UsageError(f"bad numbers in --dist {item!r}") from None
    try:
        return ScenarioDistribution(feats, samples, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_mc(args):
    inputs = _Inputs()
    problem, _ = _load_problem(args, inputs)
    ddoc = inputs.json(args.dispatch)
    ddoc = ddoc.get("z_robust" if args.which == "robust" else "z_base", ddoc) \
        if "z_robust" in ddoc else ddoc.get("dispatch", ddoc)
    dispatch = DecisionVector.from_dict(ddoc)
    dist = _dist(args.dist, args.samples, args.seed)
    metrics = [_metric(m) for m in args.metrics.split(",")]
    res = monte_carlo_eval(problem.net, problem.models, dispatch, dist, metrics, problem.u,
                           problem.objective)
    header = _header(args, inputs, args.seed)
    if args.format == "csv":
        _atomic_write(args.out, _csv_doc(header, list(csv.reader(io.StringIO(res.to_csv())))))
    else:
        _atomic_write(args.out, _json_doc(header, res.to_dict()))
    means = ", ".join(f"{k} mean {s.mean:.6g}" for k, s in res.stats.items())
    print(f"{res.count} samples, {res.failures} failed; {means}")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog=TOOL, description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, problem=False, fmt="json"):
        sp.add_argument("--case")
        sp.add_argument("--models", action="append", default=[], help="model document (repeatable)")
        sp.add_argument("--u", help="exogenous feature document (name: value)")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--format", choices=("json", "csv"), default=fmt)
        if problem:
            sp.add_argument("--problem", help="OPF problem document")
            sp.add_argument("--objective", help="objective document")

    sp = sub.add_parser("gen-data", help="generate synthetic I-V training data")
    sp.add_argument("--device", default="residential")
    sp.add_argument("--alpha-t", type=float)
    sp.add_argument("--alpha-s", type=float)
    sp.add_argument("--v-range", default="0.8:1.2")
    sp.add_argument("--u-range", action="append", help="NAME=LO:HI (repeatable)")
    sp.add_argument("--angle-deg", type=float, default=15.0)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train an I-V forecast model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--id", default="model")
    sp.add_argument("--features", help="comma-separated feature names (default: all in data)")
    sp.add_argument("--hidden", default="16,16")
    sp.add_argument("--epochs", type=int, default=2000)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--batch-size", type=int, default=0)
    sp.add_argument("--l2", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("pf", help="hybrid power flow")
    common(sp)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--max-iter", type=int, default=25)
    sp.add_argument("--step-limit", type=float, default=0.2)
    sp.add_argument("--init", choices=("flat", "case"), default="flat")
    sp.set_defaults(func=cmd_pf)

    sp = sub.add_parser("opf", help="hybrid optimal power flow")
    common(sp, problem=True)
    sp.set_defaults(func=cmd_opf)

    sp = sub.add_parser("sens", help="sensitivity of a metric to exogenous features")
    common(sp, problem=True, fmt="csv")
    sp.add_argument("--metric", required=True, help="KIND or KIND:BUS")
    sp.add_argument("--solution", choices=("pf", "opf"))
    sp.set_defaults(func=cmd_sens)

    sp = sub.add_parser("robust", help="attacker-defender robust dispatch")
    common(sp, problem=True)
    sp.add_argument("--metric", default="generation_cost")
    sp.add_argument("--bounds", action="append", help="NAME=LO:HI (repeatable)")
    sp.add_argument("--rounds", type=int, default=3)
    sp.add_argument("--restarts", type=int, default=4)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--max-steps", type=int, default=60)
    sp.set_defaults(func=cmd_robust)

    sp = sub.add_parser("mc", help="Monte-Carlo evaluation of a fixed dispatch")
    common(sp, problem=True, fmt="csv")
    sp.add_argument("--dispatch", required=True, help="opf or robust result document")
    sp.add_argument("--which", choices=("robust", "base"), default="robust")
    sp.add_argument("--dist", action="append", help="NAME=uniform:LO:HI or NAME=normal:MU:SD:LO:HI")
    sp.add_argument("--samples", type=int, default=500)
    sp.add_argument("--metrics", default="infeasibility_norm,generation_cost")
    sp.set_defaults(func=cmd_mc)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{TOOL} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except _SOLVER_ERRORS as exc:
        print(f"{TOOL} {args.command}: solver failure: {exc}", file=sys.stderr)
        hist = getattr(exc, "history", None)
        if hist:
            print(f"residual history: {[float(h) for h in hist]}", file=sys.stderr)
        return 1
    except _INPUT_ERRORS as exc:
        print(f"{TOOL} {args.command}: input error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
