"""Command-line front end: ``claimcomb simulate | combine | report``.

Every subcommand accepts ``--config FILE`` (JSON); flags given on the
command line override the file. Exit codes: 0 ok, 2 config error, 3 data
error, 4 solver error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import combiners, data, pipeline
from ._backend import backend_name
from .exceptions import (
    InfeasibleConfigError,
    InvalidInputError,
    SchemaError,
    SolverError,
    UndefinedMetricError,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4

log = logging.getLogger("claimcomb")


class ConfigError(Exception):
    pass


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _pick(args, cfg, key, default=None, required=False):
    """Command-line value if given, else config value, else default."""
    value = getattr(args, key, None)
    if value is None:
        value = cfg.get(key, default)
    if required and value is None:
        raise ConfigError(f"--{key.replace('_', '-')} is required (flag or config key {key!r})")
    return value


def _int(value, key):
    if isinstance(value, bool) or not isinstance(value, int):
        try:
            if float(value) != int(value):
                raise ValueError
            value = int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None
    return value


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    cfg = _load_config(args.config)
    seed = _int(_pick(args, cfg, "seed", required=True), "seed")
    sim = dict(cfg.get("sim", {}))
    if args.n is not None:
        sim["n"] = args.n
    if args.zero_rate is not None:
        sim["zero_rate_target"] = args.zero_rate
    sim["seed"] = seed
    out_dir = _pick(args, cfg, "out_dir", required=True)
    sim_cfg = data.SimConfig.from_dict(sim)
    specs = pipeline.forecaster_specs(cfg.get("forecasters"), seed)
    summary = pipeline.run_simulate(sim_cfg, specs, out_dir)
    skew = summary["nonzero_skewness"]
    print(f"wrote {summary['n']} policies and {len(specs)} forecasters to {out_dir}")
    print(f"zero rate: {summary['zero_rate']:.4f} (target {sim_cfg.zero_rate_target})")
    print("skewness of nonzero claim costs: "
          + ("n/a" if skew is None else f"{skew:.3f}"))
    return EXIT_OK


def _methods(args, cfg):
    methods = args.methods if args.methods is not None else cfg.get("methods")
    if methods is None:
        return list(combiners.METHODS)
    if isinstance(methods, str):
        methods = methods.split(",")
    methods = [m.strip().upper() for m in methods if m.strip()]
    if not methods:
        raise ConfigError("no combining methods requested")
    return methods


def cmd_combine(args):
    cfg = _load_config(args.config)
    seed = _int(_pick(args, cfg, "seed", required=True), "seed")
    threads = _int(_pick(args, cfg, "threads", default=1), "threads")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    out = _pick(args, cfg, "out", required=True)
    options = dict(cfg.get("options", {}))
    if args.arm_splits is not None:
        for m in ("ARM-A", "ARM-I"):
            options[m] = {**options.get(m, {}), "n_splits": args.arm_splits}
    y, names, matrix = pipeline.load_inputs(_pick(args, cfg, "data", required=True),
                                            _pick(args, cfg, "predictions", required=True))
    result = pipeline.run_combine(y, names, matrix, _methods(args, cfg), seed,
                                  split=_pick(args, cfg, "split"), options=options,
                                  n_threads=threads)
    doc = {"seed": seed, "columns": names, **result.to_dict()}
    pipeline.dump_json(doc, out)
    print(f"fitted {len(result.models)} combiner(s) -> {out}")
    for f in result.failures:
        print(f"FAILED {f['method']}: {f['error']}", file=sys.stderr)
    return EXIT_SOLVER if result.failures else EXIT_OK


def cmd_report(args):
    cfg = _load_config(args.config)
    fmt = _pick(args, cfg, "format", default="text")
    alpha = float(_pick(args, cfg, "alpha", default=0.05))
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    models_path = _pick(args, cfg, "models", required=True)
    try:
        doc = json.loads(Path(models_path).read_text(encoding="utf-8"))
        split = data.SplitSpec(**doc["split"])
        models = [combiners.CombinerModel.from_dict(m) for m in doc["models"]]
    except OSError as exc:
        raise ConfigError(f"cannot read models file {models_path}: {exc.strerror}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{models_path}: not a combine output ({exc})") from None
    y, names, matrix = pipeline.load_inputs(_pick(args, cfg, "data", required=True),
                                            _pick(args, cfg, "predictions", required=True))
    for m in models:
        if list(m.columns) != list(names):
            raise SchemaError(f"model {m.method} was fitted on columns {list(m.columns)}, "
                              f"predictions file has {names}")
    report = pipeline.run_report(y, names, matrix, models, split, alpha=alpha)
    text = pipeline.render(report, fmt)
    out = _pick(args, cfg, "out")
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    lorenz = _pick(args, cfg, "lorenz")
    if lorenz:
        pipeline.write_lorenz_csv(pipeline.holdout_lorenz(y, split), lorenz)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="claimcomb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate policies and synthetic forecasters")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int, help="number of policies")
    s.add_argument("--zero-rate", type=float, dest="zero_rate")
    s.add_argument("--out-dir", dest="out_dir")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("combine", help="fit combiners on the weight-training subsample")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--data")
    c.add_argument("--predictions")
    c.add_argument("--methods", help="comma-separated method tags (default: all)")
    c.add_argument("--threads", type=int, help="threads for the subset sweep")
    c.add_argument("--arm-splits", type=int, dest="arm_splits")
    c.add_argument("--out")
    c.set_defaults(func=cmd_combine)

    r = sub.add_parser("report", help="evaluate base and combined predictions on the holdout")
    r.add_argument("--config")
    r.add_argument("--data")
    r.add_argument("--predictions")
    r.add_argument("--models")
    r.add_argument("--format", choices=("text", "csv", "json"))
    r.add_argument("--alpha", type=float)
    r.add_argument("--lorenz", help="write holdout Lorenz points to this CSV")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("kernel backend: %s", backend_name())
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", data.ConsistencyWarning)
            return args.func(args)
    except (ConfigError, InfeasibleConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, UndefinedMetricError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
