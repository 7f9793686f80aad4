"""Command-line interface: ``diffest {simulate,estimate,check,study,summarize}``.

Every flag has a config-file key of the same name (dashes become
underscores).  Config files are INI-style ``key = value`` text; section names
only group keys.  Precedence is flags, then ``DIFFEST_SEED`` (for seeds),
then the config file, then built-in defaults.

Exit codes: 0 ok, 2 usage or input error, 3 simulation failure, 4 no root,
5 failed check, 6 output not writable.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import estfun as ef
from .errors import AllCensored, ConfigError, DiffestError, ModelMismatch, StateEscape
from .estimator import NO_ROOT, RootSolverConfig, Sample, estimate
from .model_core import builtin_model
from .path_sim import SimConfig, read_path_csv, simulate_path, subsample, write_path_csv
from .study import StudyConfig, default_workers, resummarize, run_study, write_outputs

EXIT_OK, EXIT_USAGE, EXIT_SIM, EXIT_NO_ROOT, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4, 5, 6
SEED_ENV = "DIFFEST_SEED"


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return [int(float(v)) for v in str(text).split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _seed(text) -> int:
    return int(text, 0) if isinstance(text, str) else int(text)


def _count(text) -> int:
    # accepts 1e5 style counts
    value = float(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


SOLVER_KEYS = {
    "search_lo": (float, 0.01),
    "search_hi": (float, 1.99),
    "scan_points": (_count, 256),
    "xtol": (float, 1e-10),
    "max_iter": (_count, 200),
    "policy": (str, "nearest"),
    "reference": (float, None),
}

KEYS = {
    "simulate": {
        "model": (str, None), "theta": (float, None), "steps": (_count, None),
        "seed": (_seed, None), "x0": (float, 0.0), "scheme": (str, "milstein"),
        "out": (str, "path.csv"),
    },
    "estimate": {
        "model": (str, None), "estfun": (str, None), "data": (str, None),
        "self_sim": (_bool, False), "theta0": (float, 1.0), "steps": (_count, 10_000),
        "n": (_count, None), "seed": (_seed, 0), "x0": (float, 0.0), "scheme": (str, "milstein"),
        **SOLVER_KEYS,
    },
    "check": {
        "model": (str, None), "estfun": (str, None), "grid": (str, None),
        "theta": (float, 1.0), "mc": (_bool, False), "mc_x": (float, 1.0),
        "mc_reps": (_count, 100_000), "deltas": (str, "0.5,0.25,0.125,0.0625,0.03125"),
        "seed": (_seed, 0),
    },
    "study": {
        "model": (str, None), "estfuns": (_str_list, None), "theta0": (float, None),
        "x0": (float, 0.0), "n_list": (_int_list, None), "replicates": (_count, 500),
        "fine_steps": (_count, None), "base_seed": (_seed, 0), "output_dir": (str, "study_out"),
        "scheme": (str, "milstein"), "chunk_size": (_count, 100), "record_timing": (_bool, False),
        "compute_mixing": (_bool, True), "workers": (_count, None),
        **SOLVER_KEYS,
    },
    "summarize": {"input": (str, None), "verify": (_bool, False)},
}

REQUIRED = {
    "simulate": ("model", "theta", "steps", "seed"),
    "estimate": ("model", "estfun"),
    "check": ("model", "estfun"),
    "study": ("model", "estfuns", "theta0", "n_list"),
    "summarize": ("input",),
}

FLAG_ONLY_BOOLS = {"self_sim", "mc", "verify", "record_timing"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in KEYS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="INI-style key = value file (or a bundled config name)")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        for key in keys:
            flag = "--" + key.replace("_", "-")
            if key in FLAG_ONLY_BOOLS:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, dest=key, default=None)
    return parser


def _resolve_config_path(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = resources.files("diffest") / "configs" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise UsageError(f"config file {name!r} not found")


def read_config(name: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    path = _resolve_config_path(name)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        values.update(parser[section])
    return values


def merge_options(command: str, args: argparse.Namespace) -> dict:
    keys = KEYS[command]
    config = read_config(args.config) if args.config else {}
    unknown = sorted(set(config) - set(keys))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    merged = {}
    env_seed = os.environ.get(SEED_ENV)
    for key, (convert, default) in keys.items():
        raw = getattr(args, key)
        if raw is None and key in ("seed", "base_seed") and env_seed:
            raw = env_seed
        if raw is None:
            raw = config.get(key)
        if raw is None:
            merged[key] = default
            continue
        try:
            merged[key] = convert(raw)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    missing = [k for k in REQUIRED[command] if merged.get(k) is None]
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return merged


def _solver(opts) -> RootSolverConfig:
    try:
        return RootSolverConfig(**{k: opts[k] for k in SOLVER_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(opts, as_json=False) -> int:
    model = builtin_model(opts["model"])
    try:
        path = simulate_path(model, opts["theta"], SimConfig(opts["steps"], opts["seed"], opts["x0"], opts["scheme"]))
    except StateEscape as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM
    try:
        with open(opts["out"], "w", encoding="utf-8", newline="\n") as fh:
            write_path_csv(path, fh)
    except OSError as exc:
        print(f"cannot write {opts['out']}: {exc}", file=sys.stderr)
        return EXIT_IO
    summary = {"out": opts["out"], "rows": path.n_steps + 1, "final": float(path.values[-1]),
               "min": float(path.values.min()), "max": float(path.values.max())}
    if as_json:
        _emit(summary)
    else:
        print(f"wrote {summary['rows']} rows to {summary['out']}: final={summary['final']:.6g} "
              f"min={summary['min']:.6g} max={summary['max']:.6g}")
    return EXIT_OK


def _load_sample(opts, model) -> Sample:
    if opts["data"]:
        try:
            with open(opts["data"], encoding="utf-8") as fh:
                path = read_path_csv(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read {opts['data']}: {exc}") from exc
    elif opts["self_sim"]:
        cfg = SimConfig(opts["steps"], opts["seed"], opts["x0"], opts["scheme"])
        try:
            path = simulate_path(model, opts["theta0"], cfg)
        except StateEscape as exc:
            raise SimulationFailed(str(exc)) from exc
    else:
        raise UsageError("give --data FILE or --self-sim")
    if opts["n"] is not None:
        path = subsample(path, opts["n"])
    return Sample(path.values, path.step)


class SimulationFailed(Exception):
    pass


def cmd_estimate(opts, as_json=True) -> int:
    model = builtin_model(opts["model"])
    spec = ef.builtin_estfun(opts["estfun"], model)
    try:
        sample = _load_sample(opts, model)
    except SimulationFailed as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM
    result = estimate(spec, sample, _solver(opts))
    _emit(result.to_dict())
    return EXIT_NO_ROOT if result.status == NO_ROOT else EXIT_OK


def _parse_grid(text, model):
    if text is None:
        return ef.default_grid(model)
    if ":" in text:
        lo, hi, count = text.split(":")
        return np.linspace(float(lo), float(hi), int(count))
    return np.array([float(v) for v in text.split(",")])


def _defect_report(spec, model, opts) -> ef.CheckReport:
    deltas = [float(d) for d in opts["deltas"].split(",")]
    details = {"x": opts["mc_x"], "theta": opts["theta"], "mc_reps": opts["mc_reps"]}
    try:
        res = ef.martingale_defect_order(spec, model, opts["mc_x"], opts["theta"], deltas,
                                         opts["mc_reps"], opts["seed"])
    except AllCensored as exc:
        details.update(verdict="defect consistent with exact martingale", points=exc.points)
        return ef.CheckReport(spec.name, "martingale_defect_order", True, 0.0, deltas, details)
    # order 2 or more versus order 1: split at 1.5
    passed = math.isfinite(res.slope) and res.slope > 1.5
    details.update(slope=res.slope, slope_se=ef._json_float(res.slope_se), points=res.points)
    return ef.CheckReport(spec.name, "martingale_defect_order", passed,
                          ef._json_float(res.slope), deltas, details)


def cmd_check(opts, as_json=True) -> int:
    model = builtin_model(opts["model"])
    spec = ef.builtin_estfun(opts["estfun"], model)
    try:
        grid = model.state_space.clip_probe(_parse_grid(opts["grid"], model))
    except ValueError as exc:
        raise UsageError(f"bad --grid: {exc}") from exc
    reports = [
        ef.check_jacobsen(spec, model, grid, opts["theta"]),
        ef.check_efficiency(spec, model, grid, opts["theta"]).to_check_report(),
    ]
    if opts["mc"]:
        reports.append(_defect_report(spec, model, opts))
    _emit([r.to_dict() for r in reports])
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def study_config_from(opts) -> StudyConfig:
    return StudyConfig(
        model_name=opts["model"], estfun_names=opts["estfuns"], theta0=opts["theta0"],
        n_list=opts["n_list"], replicates=opts["replicates"], fine_steps=opts["fine_steps"],
        x0=opts["x0"], base_seed=opts["base_seed"], solver=_solver(opts),
        output_dir=opts["output_dir"], scheme=opts["scheme"], chunk_size=opts["chunk_size"],
        record_timing=opts["record_timing"], compute_mixing=opts["compute_mixing"],
    )


def cmd_study(opts, as_json=False) -> int:
    config = study_config_from(opts)
    try:
        config.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"output directory {out} is not writable: {exc}", file=sys.stderr)
        return EXIT_IO
    result = run_study(config, workers=opts["workers"] or default_workers())
    try:
        manifest = write_outputs(result, out)
    except OSError as exc:
        print(f"writing outputs failed: {exc}", file=sys.stderr)
        return EXIT_IO
    if as_json:
        _emit({"manifest": manifest, "groups": len(result.summaries)})
    else:
        for path, rows in manifest.items():
            print(f"{rows:8d}  {path}")
        for (n, f), s in result.summaries.items():
            print(f"n={n} {f}: converged={s.count_converged} no_root={s.count_no_root} "
                  f"degenerate={s.count_degenerate} sim_failed={s.count_sim_failed} ks={s.ks_stat}")
    return EXIT_OK


def cmd_summarize(opts, as_json=True) -> int:
    try:
        doc = resummarize(opts["input"])
        stored = json.loads((Path(opts["input"]) / "summary.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot summarize {opts['input']}: {exc}") from exc
    _emit(doc)
    if opts["verify"] and doc != stored:
        print("summary.json does not match replicates.csv", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "check": cmd_check,
    "study": cmd_study,
    "summarize": cmd_summarize,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        opts = merge_options(args.command, args)
        return COMMANDS[args.command](opts, args.json)
    except (UsageError, ModelMismatch, ConfigError, KeyError, ValueError) as exc:
        sub.print_usage(sys.stderr)
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"diffest {args.command}: error: {message}", file=sys.stderr)
        return EXIT_USAGE
    except DiffestError as exc:
        print(f"diffest {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
