"""Command-line interface: ``parapod run``, ``parapod sweep`` and ``parapod model``.

Exit codes: 0 on success, 1 on a solver failure, 2 on a configuration error.
"""

import argparse
import copy
import csv
import dataclasses
import json
import logging
import math
import os
import subprocess
import sys
import time

import jsonschema

from . import __version__
from .analysis import (CostModel, coarse_accuracy_diagnostics, reference_trajectory,
                       speedup_model)
from .discretization import ProblemSpec, build_grid
from .exceptions import ConfigurationError, ParapodError
from .parareal import DRIVER_RANK_TOL, AdaptiveParareal, TimePartition
from .pod import write_basis

log = logging.getLogger("parapod")

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "problem": {"kind": "kolmogorov", "dim": 3, "domain_length": 2.0 * math.pi,
                "abc_frequency": 1.0, "reaction": 0.0, "forcing_scale": 1.0},
    "grid": {"scheme": None},
    "time": {"fine_step": 1.0e-2, "coarse_step": 0.5, "warmup_time": 5.0,
             "interval": 5.0, "snapshot_stride": 5},
    "pod": {"gamma1": 1.0 - 5.0e-6, "gamma2": 1.0 - 5.0e-6, "gamma3": 1.0 - 2.0e-8,
            "rank_tol": DRIVER_RANK_TOL},
    "parareal": {"mode": "adaptive", "m_l": 1, "p": 1, "tol": 1e-8, "max_iter": None,
                 "tol_lin": 1e-10},
    "output": {"dump_bases": False},
}

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}


def _section(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "grid", "time"],
    "properties": {
        "problem": _section({
            "kind": {"enum": ["kolmogorov", "abc"]},
            "epsilon": _NUM, "dim": {"enum": [1, 2, 3]}, "domain_length": _NUM,
            "abc_frequency": _NUM, "reaction": _NUM, "forcing_scale": _NUM,
        }, required=["kind", "epsilon"]),
        "grid": _section({
            "resolution": {"oneOf": [_POS_INT, {"type": "array", "items": _POS_INT}]},
            "scheme": {"enum": ["fe", "fd", None]},
        }, required=["resolution"]),
        "time": _section({
            "n_subintervals": _POS_INT, "fine_step": _NUM, "coarse_step": _NUM,
            "warmup_time": _NUM, "interval": _NUM, "snapshot_stride": _POS_INT,
        }, required=["n_subintervals"]),
        # a pod section is all-or-nothing for the energy fractions
        "pod": _section({"gamma1": _NUM, "gamma2": _NUM, "gamma3": _NUM, "rank_tol": _NUM},
                        required=["gamma1", "gamma2", "gamma3"]),
        "parareal": _section({
            "mode": {"enum": ["adaptive", "plain"]}, "m_l": _NONNEG_INT, "p": _NONNEG_INT,
            "tol": _NUM, "max_iter": {"oneOf": [_NONNEG_INT, {"type": "null"}]},
            "tol_lin": _NUM,
        }),
        "output": _section({"dump_bases": {"type": "boolean"}}),
    },
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["config", "version", "timings", "pod_dimensions", "iterations",
                 "stop_reason", "max_error", "n_dof", "outputs"],
    "properties": {
        "config": CONFIG_SCHEMA,
        "version": {"type": "object", "required": ["parapod", "git"],
                    "properties": {"parapod": {"type": "string"},
                                   "git": {"type": ["string", "null"]}}},
        "timings": {"type": "object", "additionalProperties": {"type": "number"}},
        "pod_dimensions": {"type": "array", "items": {
            "type": "object", "required": ["k", "n"],
            "properties": {"k": _NONNEG_INT, "n": _NONNEG_INT},
            "additionalProperties": _NONNEG_INT}},
        "iterations": _NONNEG_INT,
        "stop_reason": {"enum": ["converged", "k_max"]},
        "max_error": {"type": "array", "items": _NUM},
        "n_dof": _POS_INT,
        "threads": _POS_INT,
        "outputs": {"type": "array", "items": {
            "type": "object", "required": ["name", "bytes"],
            "properties": {"name": {"type": "string"}, "bytes": _POS_INT}}},
    },
}

# library field names -> config paths, for error messages
_FIELD_PATHS = {
    "diffusion": "problem.epsilon", "dim": "problem.dim", "field_kind": "problem.kind",
    "domain_length": "problem.domain_length", "reaction": "problem.reaction",
    "final_time": "time.n_subintervals", "warmup_time": "time.warmup_time",
    "resolution": "grid.resolution", "scheme": "grid.scheme",
    "fine_step": "time.fine_step", "coarse_step": "time.coarse_step",
    "n_subintervals": "time.n_subintervals", "snapshot_stride": "time.snapshot_stride",
    "gamma1": "pod.gamma1", "gamma2": "pod.gamma2", "gamma3": "pod.gamma3",
    "m_l": "parareal.m_l", "p": "parareal.p", "mode": "parareal.mode",
    "n_workers": "threads",
}


# -- configuration ---------------------------------------------------------------

def _schema_error(exc):
    path = [str(p) for p in exc.absolute_path]
    if exc.validator == "required":
        missing = [r for r in exc.validator_value if r not in exc.instance]
        path.append(missing[0])
    field = ".".join(path) or "<root>"
    return ConfigurationError(f"{field}: {exc.message}", field=field)


def validate_config(cfg):
    """Check ``cfg`` against :data:`CONFIG_SCHEMA`; raise on the first error."""
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: [str(p) for p in e.path])
    if errors:
        raise _schema_error(errors[0])


def with_defaults(cfg):
    """Validate ``cfg`` and fill every section with the default parameters."""
    validate_config(cfg)
    full = copy.deepcopy(DEFAULTS)
    for section, values in cfg.items():
        full.setdefault(section, {}).update(copy.deepcopy(values))
    return full


def load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path!r} not found", field="config") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}", field="config") from None


def apply_overrides(cfg, overrides):
    """Set dotted-path ``overrides`` (``{"parareal.m_l": 1}``) on a copy of ``cfg``."""
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".")
        out.setdefault(section, {})[key] = value
    return out


def build(cfg, threads=1):
    """Turn a defaulted config into ``(system, partition, estimator)``."""
    pr, gr, tm, pod, par = (cfg[s] for s in ("problem", "grid", "time", "pod", "parareal"))
    try:
        T0 = tm["warmup_time"]
        spec = ProblemSpec(field_kind=pr["kind"], diffusion=pr["epsilon"], dim=pr["dim"],
                           domain_length=pr["domain_length"],
                           abc_frequency=pr["abc_frequency"], reaction=pr["reaction"],
                           forcing_scale=pr["forcing_scale"], warmup_time=T0,
                           final_time=T0 + tm["n_subintervals"] * tm["interval"])
        partition = TimePartition(T0, spec.final_time, tm["n_subintervals"], tm["fine_step"],
                                  tm["coarse_step"], tm["snapshot_stride"])
        est = AdaptiveParareal(mode=par["mode"], gamma1=pod["gamma1"], gamma2=pod["gamma2"],
                               gamma3=pod["gamma3"], m_l=par["m_l"], p=par["p"],
                               tol=par["tol"], max_iter=par["max_iter"],
                               n_workers=threads, tol_lin=par["tol_lin"],
                               rank_tol=pod["rank_tol"])
        est._validate_params()
        if not T0 > 0:
            raise ConfigurationError("warmup span required", field="warmup_time")
        system = build_grid(spec, gr["resolution"], gr["scheme"])
    except ConfigurationError as exc:
        path = _FIELD_PATHS.get(exc.field, exc.field)
        raise ConfigurationError(f"{path}: {exc}", field=path) from None
    return system, partition, est


# -- run -------------------------------------------------------------------------

def _git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(os.path.abspath(__file__)), timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def write_errors_csv(path, curve):
    with open(path, "w", newline="") as fh:
        fh.write("k,n,t,rel_error\n")
        for k, n, t, e in curve.rows():
            fh.write(f"{k},{n},{t:.15e},{e:.15e}\n")


def write_diagnostics_csv(path, curve):
    with open(path, "w", newline="") as fh:
        fh.write("k,n,t,fg_gap,coarse_err\n")
        for k, n, t, fg, ce in curve.diagnostic_rows():
            fh.write(f"{k},{n},{t:.15e},{fg:.15e},{ce:.15e}\n")


def execute(cfg, output_dir, threads=1):
    """Run one configured solve and write its outputs; returns the summary dict.

    ``cfg`` must already carry its defaults.  Library errors propagate.
    """
    system, partition, est = build(cfg, threads)
    os.makedirs(output_dir, exist_ok=True)
    t0 = time.perf_counter()
    ref = reference_trajectory(system, partition, cfg["parareal"]["tol_lin"])
    t_ref = time.perf_counter() - t0
    est.fit(system, partition,
            callback=lambda r: log.info("iteration %d done (%s)", r.k,
                                        ", ".join(f"{p}={s:.2f}s"
                                                  for p, s in r.timings.items())))
    run_ = est.run_
    t0 = time.perf_counter()
    curve = coarse_accuracy_diagnostics(run_, ref, system.mass)
    t_analysis = time.perf_counter() - t0

    names = ["errors.csv", "diagnostics.csv"]
    write_errors_csv(os.path.join(output_dir, names[0]), curve)
    write_diagnostics_csv(os.path.join(output_dir, names[1]), curve)
    if cfg["output"]["dump_bases"]:
        os.makedirs(os.path.join(output_dir, "bases"), exist_ok=True)
        dumps = [("bases/basis_k0.podb", run_.basis0)]
        dumps += [(f"bases/basis_k{run_.k}_n{n}.podb", b) for n, b in sorted(run_.bases.items())]
        for name, b in dumps:
            write_basis(os.path.join(output_dir, name), b.modes_, b.singular_values_)
            names.append(name)

    timings = {"reference": t_ref, **run_.timings, "analysis": t_analysis}
    summary = {
        "config": cfg,
        "version": {"parapod": __version__, "git": _git_revision()},
        "timings": timings,
        "pod_dimensions": [dict(k=k, n=n, **dims)
                           for (k, n), dims in sorted(run_.pod_dims.items())],
        "iterations": run_.k,
        "stop_reason": run_.stop_reason,
        "max_error": [curve.max_error(k) for k in range(run_.k + 1)],
        "n_dof": system.n_dof,
        "threads": int(threads),
        "outputs": [],
    }
    for name in names:
        size = os.path.getsize(os.path.join(output_dir, name))
        summary["outputs"].append({"name": name, "bytes": size})
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    with open(os.path.join(output_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def _report(exc):
    print(f"error: {exc}", file=sys.stderr)
    ctx = getattr(exc, "context", None)
    if ctx:
        print("  context: " + ", ".join(f"{k}={v}" for k, v in sorted(ctx.items())),
              file=sys.stderr)


def _run_overrides(args):
    return {"parareal.mode": args.mode, "parareal.m_l": args.ml, "parareal.p": args.p,
            "parareal.max_iter": args.max_iter,
            "output.dump_bases": True if args.dump_bases else None}


def cmd_run(args):
    cfg = with_defaults(apply_overrides(load_config(args.config), _run_overrides(args)))
    summary = execute(cfg, args.output, args.threads)
    print(f"{summary['stop_reason']} after {summary['iterations']} iterations; "
          f"final max error {summary['max_error'][-1]:.3e}; outputs in {args.output}")
    return EXIT_OK


# -- sweep -----------------------------------------------------------------------

def _parse_axis(text):
    """``eps=0.5,0.1`` / ``mlp=0:0,1:1`` / ``mode=plain,adaptive`` -> [(label, overrides)]."""
    name, sep, values = (text or "").partition("=")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not sep or not items:
        raise ConfigurationError(f"empty sweep axis {text!r}", field="axis")
    cells = []
    try:
        for v in items:
            if name == "eps":
                cells.append((f"eps={v}", {"problem.epsilon": float(v)}))
            elif name == "mlp":
                m_l, p = (int(x) for x in v.split(":"))
                cells.append((f"mlp={m_l}_{p}", {"parareal.m_l": m_l, "parareal.p": p}))
            elif name == "mode":
                cells.append((f"mode={v}", {"parareal.mode": v}))
            else:
                raise ConfigurationError(f"unknown sweep axis {name!r}", field="axis")
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad sweep value in {text!r}: {exc}", field="axis") from None
    return cells


def cmd_sweep(args):
    base = apply_overrides(load_config(args.config), _run_overrides(args))
    cells = _parse_axis(args.axis)
    # validate every cell before spending time on any of them
    configs = [(label, with_defaults(apply_overrides(base, ov))) for label, ov in cells]
    for _, cfg in configs:
        build(cfg)
    os.makedirs(args.output, exist_ok=True)
    rows, failed = [], False
    for label, cfg in configs:
        out = os.path.join(args.output, label)
        try:
            summary = execute(cfg, out, args.threads)
        except ParapodError as exc:
            failed = True
            log.error("cell %s failed: %s", label, exc)
            rows.append([label, f"failed: {type(exc).__name__}: {exc}", "", "", ""])
            continue
        errs = summary["max_error"]
        hit = next((k for k, e in enumerate(errs) if e <= args.threshold), None)
        rows.append([label, "ok", "" if hit is None else hit, summary["iterations"],
                     f"{errs[-1]:.15e}"])
    with open(os.path.join(args.output, "aggregate.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "status", f"iterations_to_{args.threshold:g}", "iterations",
                    "final_max_error"])
        w.writerows(rows)
    print(f"{len(rows)} cells, {sum(r[1] == 'ok' for r in rows)} ok; "
          f"aggregate in {os.path.join(args.output, 'aggregate.csv')}")
    return EXIT_SOLVER if failed else EXIT_OK


# -- model -----------------------------------------------------------------------

def _harvest(summary_path):
    """Problem-size inputs of the cost model measured from a finished run."""
    with open(summary_path) as fh:
        summary = json.load(fh)
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    cfg = summary["config"]
    tm = cfg["time"]
    dims = summary["pod_dimensions"]
    per_interval = round(tm["interval"] / tm["fine_step"])
    return {
        "N_g": summary["n_dof"], "N": tm["n_subintervals"],
        "k_max": max(summary["iterations"], 1),
        "m_max": max(max(d.get("final", d.get("window", 1)) for d in dims), 1),
        "n_s": per_interval // tm["snapshot_stride"] + 1,
        "n_max": max([d.get("window_inputs", 0) for d in dims] + [1]),
        "interval": tm["interval"], "fine_step": tm["fine_step"],
        "coarse_step": tm["coarse_step"], "warmup_time": tm["warmup_time"],
    }, summary["timings"]


def cmd_model(args):
    data = load_config(args.cost)
    measured = None
    if args.from_run:
        harvested, measured = _harvest(args.from_run)
        data = {**data, **harvested}
    names = {f.name for f in dataclasses.fields(CostModel)}
    unknown = sorted(set(data) - names)
    missing = sorted(names - set(data))
    if unknown or missing:
        field = (missing or unknown)[0]
        raise ConfigurationError(f"cost model field {field!r} is "
                                 f"{'missing' if missing else 'unknown'}", field=field)
    try:
        cm = CostModel(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid cost model: {exc}", field="cost") from None
    result = {"inputs": dataclasses.asdict(cm), **dataclasses.asdict(speedup_model(cm))}
    if measured is not None:
        result["measured_timings"] = measured
    text = json.dumps(result, indent=2)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def _add_run_options(p):
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--mode", choices=["adaptive", "plain"])
    p.add_argument("--ml", type=int, help="left-neighbour window count m_l")
    p.add_argument("--p", type=int, help="previous-iteration window count p")
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: available CPUs)")
    p.add_argument("--dump-bases", action="store_true", help="write PODB basis dumps")


def make_parser():
    parser = argparse.ArgumentParser(prog="parapod", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"parapod {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one parareal solve")
    _add_run_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a one-parameter grid of solves")
    _add_run_options(p)
    p.add_argument("--axis", required=True,
                   help="eps=0.5,0.1 | mlp=0:0,1:1 | mode=plain,adaptive")
    p.add_argument("--threshold", type=float, default=1e-3)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("model", help="evaluate the parallel speed-up model")
    p.add_argument("--cost", required=True, help="JSON file with CostModel fields")
    p.add_argument("--from-run", dest="from_run",
                   help="summary.json whose problem sizes replace those in --cost")
    p.add_argument("--output", help="also write the result to this file")
    p.set_defaults(func=cmd_model)
    return parser


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        _report(ConfigurationError("threads must be >= 1", field="threads"))
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _report(exc)
        return EXIT_CONFIG
    except ParapodError as exc:
        _report(exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
