"""Command-line front end: ``kgflow <subcommand> [--config FILE] [flags]``.

Configuration is a TOML file. Top-level keys apply to every subcommand and a
table named after the subcommand (``[band]``, ``[rate-exp]`` ...) overrides them.
Command-line flags override both. Every output file starts with ``# key = value``
lines recording the fully resolved configuration.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from kgflow import __version__
from kgflow.checks import run_checks
from kgflow.errors import DegenerateCovarianceError, NumericalError
from kgflow.estimators import Dataset, decompose, fit_kgf_spectral, fit_krr, predict
from kgflow.harness import (
    BOOTSTRAP_STREAM,
    TABLE_SAMPLE_SIZES,
    ExperimentConfig,
    generate_data,
    parse_truth,
    run_coverage_experiment,
    run_rate_experiment,
    run_saturation_comparison,
    saturation_slopes,
    trial_seed,
)
from kgflow.inference import confidence_band, covers
from kgflow.kernels import parse_kernel

SUBCOMMANDS = ("fit", "band", "rate-exp", "coverage-exp", "saturation-exp", "verify")

_CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}
_SINGLE_FIT_KEYS = {"n", "t", "data"}
ALLOWED_KEYS = {
    "fit": _CONFIG_FIELDS | _SINGLE_FIT_KEYS | {"method", "lam"},
    "band": _CONFIG_FIELDS | _SINGLE_FIT_KEYS,
    "rate-exp": _CONFIG_FIELDS,
    "coverage-exp": _CONFIG_FIELDS,
    "saturation-exp": _CONFIG_FIELDS,
    "verify": set(),
}
_ANY_KEY = set().union(*ALLOWED_KEYS.values())

DEFAULTS: dict[str, Any] = {"kernel": "min", "truth": "f1", "n": 500, "method": "kgf"}

# Each experiment's own protocol; any of these can be overridden from the config file.
EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "rate-exp": {"c": 10.0, "s": 1.5, "n_list": [200, 400, 600, 800, 1000], "reps": 30},
    "coverage-exp": {
        "kernel": f"matern32:h={math.sqrt(3.0) / 4.0!r}", "truth": "f3", "time_rule": "topt",
        "multipliers": [0.5, 1.0, 2.0, 4.0], "n_list": list(TABLE_SAMPLE_SIZES), "reps": 200,
    },
    "saturation-exp": {"truth": "f2", "c": 100.0, "n_list": [500, 1000, 2000], "reps": 30},
}

EXPERIMENT_NAMES = {
    "fit": "fit", "band": "band", "rate-exp": "rate",
    "coverage-exp": "coverage", "saturation-exp": "saturation",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kgflow", description="Kernel gradient flow regression and confidence bands.")
    p.add_argument("--version", action="version", version=f"kgflow {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--threads", type=int, help="trial parallelism (results do not depend on it)")
    p.add_argument("--grid", type=int, help="evaluation grid size (default 1001)")
    p.add_argument("--bootstrap", type=int, help="bootstrap replicates B (default 100)")
    return p


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_config(path: Path | None, subcommand: str) -> dict[str, Any]:
    """Merge top-level keys with the subcommand's table; reject unknown keys."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    merged, section = {}, {}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SUBCOMMANDS:
                raise UsageError(f"unknown config section [{key}]")
            if key == subcommand:
                section = value
        elif key in _ANY_KEY:
            merged[key] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    for key, value in section.items():
        if key not in ALLOWED_KEYS[subcommand]:
            raise UsageError(f"key {key!r} is not valid in [{subcommand}]")
        merged[key] = value
    if "kernel" in merged:
        merged["kernel"] = _resolve_mercer_path(str(merged["kernel"]), path.parent)
    return merged


def _resolve_mercer_path(spec: str, base: Path) -> str:
    if spec.startswith("mercer:"):
        p = Path(spec[len("mercer:") :])
        if not p.is_absolute() and not p.exists() and (base / p).exists():
            return f"mercer:{base / p}"
    return spec


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    cfg = {**DEFAULTS, **EXPERIMENT_DEFAULTS.get(args.subcommand, {}), **load_config(args.config, args.subcommand)}
    for flag, key in (("seed", "seed"), ("threads", "threads"), ("grid", "grid_size"), ("bootstrap", "bootstrap")):
        value = getattr(args, flag)
        if value is not None:
            cfg[key] = value
    cfg.setdefault("seed", 0)
    cfg.setdefault("grid_size", 1001)
    cfg.setdefault("bootstrap", 100)
    if args.subcommand in ("rate-exp", "coverage-exp", "saturation-exp"):
        for key in ("n", "method"):
            cfg.pop(key, None)
    if args.subcommand != "fit":
        cfg.pop("method", None)
    if "data" in cfg:
        cfg.pop("n", None)
    return cfg


def experiment_config(cfg: dict[str, Any]) -> ExperimentConfig:
    kwargs = {k: v for k, v in cfg.items() if k in _CONFIG_FIELDS}
    try:
        kwargs["kernel"] = parse_kernel(str(kwargs.get("kernel", "min")))
        kwargs["truth"] = parse_truth(str(kwargs.get("truth", "f1")))
        for key in ("n_list", "multipliers", "saturation_eps"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError, OSError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _g(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _header_value(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_header_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if v is None:
        return "none"
    return str(v)


def resolved_view(cfg: dict[str, Any], config: ExperimentConfig) -> dict[str, Any]:
    """Every configuration value actually in effect, defaults included."""
    view = {f.name: getattr(config, f.name) for f in fields(ExperimentConfig)}
    view["kernel"] = config.kernel.describe()
    view["truth"] = config.truth.tag
    view.update({k: v for k, v in cfg.items() if k not in _CONFIG_FIELDS})
    return view


def header_lines(subcommand: str, view: dict[str, Any], extra: dict[str, Any] | None = None) -> list[str]:
    merged = {**view, **(extra or {})}
    lines = [f"# kgflow {__version__} {subcommand}"]
    lines += [f"# {k} = {_header_value(merged[k])}" for k in sorted(merged)]
    return lines


def write_csv(path: Path, header: list[str], columns: Sequence[str], rows: Sequence[Sequence[Any]],
              footer: list[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_g(v) for v in row])
        for line in footer:
            fh.write(line + "\n")


def write_json(path: Path, payload: dict[str, Any]) -> None:
    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple, np.ndarray)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating, float)):
            return None if not math.isfinite(o) else float(o)
        if isinstance(o, np.integer):
            return int(o)
        return o
    with open(path, "w") as fh:
        json.dump(clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def output_stem(subcommand: str, config: ExperimentConfig, mode: str | None = None) -> str:
    return f"{EXPERIMENT_NAMES[subcommand]}_{config.kernel.slug}_{mode or config.mode}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load_xy(path: Path) -> Dataset:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    except OSError as exc:
        raise UsageError(f"cannot read data file {path}: {exc}") from exc
    if not rows or not {"x", "y"} <= set(rows[0]):
        raise UsageError(f"data file {path} needs a header with columns x and y")
    try:
        return Dataset([float(r["x"]) for r in rows], [float(r["y"]) for r in rows])
    except ValueError as exc:
        raise UsageError(f"bad data file {path}: {exc}") from exc


def _single_fit_inputs(cfg: dict[str, Any], config: ExperimentConfig, label: str):
    if "data" in cfg:
        data = _load_xy(Path(cfg["data"]))
    else:
        n = cfg["n"]
        if int(n) != n or n < 1:
            raise UsageError(f"n must be a positive integer, got {n!r}")
        data = generate_data(config.truth, int(n), config.sigma, trial_seed(config.seed, f"{label}/n={n}", 0))
    t = float(cfg["t"]) if "t" in cfg else config.training_time(data.n, config.multipliers[0])
    try:
        params = config.filter_for(t)
    except ValueError as exc:
        raise UsageError(f"invalid training time: {exc}") from exc
    return data, params


def cmd_fit(cfg, config: ExperimentConfig, out: Path) -> dict:
    data, params = _single_fit_inputs(cfg, config, "fit")
    cache = decompose(config.kernel, data.X)
    method = cfg["method"]
    if method == "kgf":
        est = fit_kgf_spectral(cache, data.Y, params)
        mode = config.mode
    elif method == "krr":
        est = fit_krr(cache, data.Y, float(cfg.get("lam", 1.0 / params.t)))
        mode = "krr"
    else:
        raise UsageError(f"method must be kgf or krr, got {method!r}")
    grid = config.grid()
    pred = predict(est, grid)
    stem = output_stem("fit", config, mode)
    extra = {"n": data.n, "t": params.t, "method": est.method}
    cols, rows = ["x", "prediction"], [grid, pred]
    summary = {"config": cfg, **extra, "params": est.params, "beta": est.beta}
    if "data" not in cfg:
        truth = config.truth(grid)
        cols.append("truth")
        rows.append(truth)
        summary["sup_error"] = float(np.max(np.abs(pred - truth)))
    write_csv(out / f"{stem}.csv", header_lines("fit", cfg, extra), cols, list(zip(*rows)))
    write_json(out / f"{stem}.json", summary)
    return summary


def cmd_band(cfg, config: ExperimentConfig, out: Path) -> dict:
    data, params = _single_fit_inputs(cfg, config, "band")
    cache = decompose(config.kernel, data.X)
    est = fit_kgf_spectral(cache, data.Y, params)
    grid = config.grid(data.X)
    seed = trial_seed(config.seed, "band", 0, BOOTSTRAP_STREAM)
    band = confidence_band(est, data.Y, grid, config.q, config.bootstrap, seed, params)
    order = np.argsort(band.grid, kind="stable")
    extra = {"n": data.n, "t": params.t, "mode": config.mode, "B": band.B, "q": band.q, "r": band.r,
             "seed": config.seed}
    stem = output_stem("band", config)
    rows = zip(band.grid[order], band.center[order], band.lower[order], band.upper[order], band.half_width[order])
    write_csv(out / f"{stem}.csv", header_lines("band", cfg, extra),
              ["x", "center", "lower", "upper", "half_width"], list(rows))
    summary = {"config": cfg, **extra, "mean_width": float(np.mean(2 * band.half_width[: config.grid_size])),
               "samples": band.samples}
    if "data" not in cfg:
        summary["covers_truth"] = covers(band, config.truth)
    write_json(out / f"{stem}.json", summary)
    return summary


def cmd_rate(cfg, config: ExperimentConfig, out: Path) -> dict:
    res = run_rate_experiment(config)
    cols = ["n", "t", "reps", "mean_log_error", "sd_log_error", "mean_error"]
    stem = output_stem("rate-exp", config)
    footer = [f"# summary: slope = {res.fit.slope:.6g}, intercept = {res.fit.intercept:.6g}"]
    write_csv(out / f"{stem}.csv", header_lines("rate-exp", cfg), cols,
              [[r[c] for c in cols] for r in res.rows], footer)
    summary = {"config": cfg, "slope": res.fit.slope, "intercept": res.fit.intercept, "rows": res.rows}
    write_json(out / f"{stem}.json", summary)
    return summary


def cmd_coverage(cfg, config: ExperimentConfig, out: Path) -> dict:
    cells = run_coverage_experiment(config)
    cols = ["n", "multiplier", "t", "coverage", "mean_width", "trials", "flagged"]
    rows = [[getattr(c, k) for k in cols] for c in cells]
    stem = output_stem("coverage-exp", config)
    write_csv(out / f"{stem}.csv", header_lines("coverage-exp", cfg), cols, rows)
    summary = {"config": cfg, "cells": [dict(zip(cols, r)) for r in rows]}
    write_json(out / f"{stem}.json", summary)
    return summary


def cmd_saturation(cfg, config: ExperimentConfig, out: Path) -> dict:
    rows = run_saturation_comparison(config)
    cols = list(rows[0])
    stem = output_stem("saturation-exp", config, "all")
    slopes = saturation_slopes(rows)
    footer = [f"# slope[eps={e:g}, {m}] = {v:.6g}" for (e, m), v in slopes.items()]
    write_csv(out / f"{stem}.csv", header_lines("saturation-exp", cfg), cols,
              [[r[c] for c in cols] for r in rows], footer)
    summary = {"config": cfg, "rows": rows,
               "slopes": [{"eps": e, "method": m, "slope": v} for (e, m), v in slopes.items()]}
    write_json(out / f"{stem}.json", summary)
    return summary


COMMANDS = {
    "fit": cmd_fit,
    "band": cmd_band,
    "rate-exp": cmd_rate,
    "coverage-exp": cmd_coverage,
    "saturation-exp": cmd_saturation,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Entry point returning the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.subcommand == "verify":
            if args.config is not None:
                load_config(args.config, "verify")
            return 0 if run_checks() else 1
        cfg = resolve(args)
        config = experiment_config(cfg)
        cfg = resolved_view(cfg, config)
        args.out.mkdir(parents=True, exist_ok=True)
        if not args.out.is_dir():
            raise UsageError(f"output path {args.out} is not a directory")
    except UsageError as exc:
        print(f"kgflow: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"kgflow: error: cannot use output directory: {exc}", file=sys.stderr)
        return 2
    try:
        summary = COMMANDS[args.subcommand](cfg, config, args.out)
    except UsageError as exc:
        print(f"kgflow: error: {exc}", file=sys.stderr)
        return 2
    except DegenerateCovarianceError as exc:
        print(f"kgflow: numerical failure: {exc}; every kernel section vanishes there, "
              "consider grid_start > 0", file=sys.stderr)
        return 1
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"kgflow: numerical failure: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"kgflow: error: {exc}", file=sys.stderr)
        return 2
    _print_summary(args.subcommand, summary)
    return 0


def _print_summary(subcommand: str, summary: dict) -> None:
    if subcommand == "rate-exp":
        print(f"slope = {summary['slope']:.4f}")
    elif subcommand == "coverage-exp":
        for c in summary["cells"]:
            print(f"n={c['n']} mult={c['multiplier']:g}: coverage={c['coverage']:.3f} width={c['mean_width']:.4f}")
    elif subcommand == "band":
        print(f"r = {summary['r']:.4f}, mean width = {summary['mean_width']:.4f}")
    elif subcommand == "fit" and "sup_error" in summary:
        print(f"sup error = {summary['sup_error']:.4g}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
