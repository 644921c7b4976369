"""Command-line interface.

Subcommands::

    spcde synth     --out data.csv [--param key=value ...]
    spcde fit       --data data.csv --out model/        [--config run.ini] [--set key=value ...]
    spcde calibrate --data data.csv --model model/ --out calibrated.csv
    spcde qm        --data data.csv --out qm.csv
    spcde evaluate  --obs data.csv --input NAME=file.csv [...] --out metrics/
    spcde report    --summary a_summary.csv [...] --out table/

Every run writes a JSON run manifest next to its output (``<file>.run.json``
or ``<dir>/run.json``).  Exit status: 0 success, 2 configuration error,
3 data error, 4 model-fit failure.  Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .baseline_qm import apply_qm_field, fit_qm_field
from .calibration import (CalibrationModel, FitError, boundary_for, calibrate, fingerprint, fit_calibration,
                          project)
from .config import ConfigError, RunConfig, load_config
from .dataio import DatasetError, SynthSpec, generate_synth, read_dataset, write_dataset
from .grid import MODEL, OBSERVED, AlignmentError, GridField
from .metrics import ROWS, MetricsReport, rmse_table

log = logging.getLogger("spcde")

EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 2, 3, 4


def _pairs(items, what) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"{what} must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _file_sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(out: Path) -> Path:
    return out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")


def write_manifest(out, command: str, config: dict, seed, inputs=(), fields_=None) -> Path:
    out = Path(out)
    man = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _file_sha(p) for p in inputs},
        "fields": {k: fingerprint(f) for k, f in (fields_ or {}).items()},
        "versions": {"spcde": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "pandas": pd.__version__},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    path = _manifest_path(out)
    path.write_text(json.dumps(man, indent=1, sort_keys=True))
    return path


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), _pairs(getattr(args, "set", None), "--set"))


def _source(fields_: dict, path, preferred: str) -> GridField:
    if preferred in fields_:
        return fields_[preferred]
    if len(fields_) == 1:
        return next(iter(fields_.values()))
    raise DatasetError(f"{path}: no {preferred} rows")


def _span(f: GridField, start, end, what) -> GridField:
    try:
        return f.day_slice(start, end)
    except AlignmentError:
        raise DatasetError(f"{what} span {start or '...'} to {end or '...'} selects no days") from None


def _train_fields(path, cfg: RunConfig):
    data = read_dataset(path)
    for s in (OBSERVED, MODEL):
        if s not in data:
            raise DatasetError(f"{path}: training needs both observed and model rows; {s} missing")
    return (_span(data[OBSERVED], cfg.train_start, cfg.train_end, "train"),
            _span(data[MODEL], cfg.train_start, cfg.train_end, "train"))


def cmd_synth(args) -> int:
    types = SynthSpec.field_types()
    params = _pairs(args.param, "--param")
    unknown = sorted(set(params) - set(types))
    if unknown:
        raise ConfigError(f"unknown synthetic parameter(s): {', '.join(unknown)}")
    conv = {}
    for k, v in params.items():
        t = types[k]
        try:
            conv[k] = (v.lower() in ("1", "true", "yes")) if t == "bool" else int(v) if t == "int" \
                else float(v) if t == "float" else v
        except ValueError:
            raise ConfigError(f"{k}: cannot parse {v!r} as {t}") from None
    if args.seed is not None:
        conv["seed"] = args.seed
    try:
        spec = SynthSpec(**conv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    obs, model = generate_synth(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, [model, obs])
    write_manifest(out, "synth", {f.name: getattr(spec, f.name) for f in fields(spec)}, spec.seed,
                   fields_={"observed": obs, "model": model})
    log.info("wrote %s (%d locations x %d days per source)", out, obs.n_locations, obs.n_days)
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    obs, model = _train_fields(args.data, cfg)
    out = Path(args.out or Path(cfg.output) / "model")
    cmodel = fit_calibration(obs, model, cfg.hyper())
    cmodel.save(out)
    write_manifest(out, "fit", cfg.to_dict(), cfg.seed, [args.data], {"observed": obs, "model": model})
    log.info("saved %d models to %s", len(cmodel.models), out)
    return 0


def _test_model(path, cfg: RunConfig):
    data = read_dataset(path)
    full = _source(data, path, MODEL)
    if full.source != MODEL:
        raise DatasetError(f"{path}: no model rows to correct")
    test = _span(full, cfg.test_start, cfg.test_end, "test")
    return full, test


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    try:
        cmodel = CalibrationModel.load(args.model)
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"cannot load calibration model from {args.model}: {exc}") from None
    full, test = _test_model(args.data, cfg)
    boundary = boundary_for(full, test)
    cal = calibrate(cmodel, project(cmodel, test, boundary), test, boundary)
    out = Path(args.out or Path(cfg.output) / "calibrated.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, cal)
    inputs = [args.data, Path(args.model) / "manifest.json"]
    write_manifest(out, "calibrate", {**cfg.to_dict(), "first_day_raw_lag": cal.meta["first_day_raw_lag"]},
                   cmodel.hyper.seed, inputs, {"model": test, "calibrated": cal})
    log.info("wrote calibrated field to %s", out)
    return 0


def cmd_qm(args) -> int:
    cfg = _config(args)
    obs, model = _train_fields(args.data, cfg)
    _, test = _test_model(args.data, cfg)
    maps = fit_qm_field(obs, model, cfg.qm_mode, cfg.qm_knots)
    corrected = apply_qm_field(maps, test)
    out = Path(args.out or Path(cfg.output) / "qm.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, corrected)
    if args.maps:
        ser = [{"month": m, "location": int(l), "variable": v, **q.to_dict()} for (m, l, v), q in sorted(maps.items())]
        Path(args.maps).write_text(json.dumps(ser, indent=1))
    write_manifest(out, "qm", cfg.to_dict(), cfg.seed, [args.data], {"model": test, "qm": corrected})
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    data = read_dataset(args.obs)
    obs = _span(_source(data, args.obs, OBSERVED), cfg.test_start, cfg.test_end, "test")
    methods, inputs = {}, [args.obs]
    for name, path in _pairs(args.input, "--input").items():
        f = _source(read_dataset(path), path, MODEL)
        f = _span(f, cfg.test_start, cfg.test_end, "test")
        try:
            obs.check_aligned(f)
        except AlignmentError as exc:
            raise DatasetError(f"{path}: {exc}") from None
        methods[name] = f
        inputs.append(path)
    if not methods:
        raise ConfigError("evaluate needs at least one --input NAME=FILE")
    report = rmse_table(obs, methods)
    out = Path(args.out or Path(cfg.output) / "metrics")
    report.write(out, args.prefix)
    write_manifest(out, "evaluate", cfg.to_dict(), cfg.seed, inputs)
    sys.stdout.write(report.render())
    return 0


def merge_summaries(frames) -> MetricsReport:
    """Combine per-method summary tables into one comparison report."""
    summary = pd.concat(frames, ignore_index=True)
    summary = summary.drop_duplicates(["variable", "metric", "method"], keep="last")
    methods = list(dict.fromkeys(summary["method"]))
    best = summary.groupby(["variable", "metric"])["value"].transform("min")
    summary["best"] = summary["value"].notna() & (summary["value"] == best)
    empty = pd.DataFrame(columns=["variable", "metric", "month", "location", "method", "value", "observed"])
    return MetricsReport(empty, summary.reset_index(drop=True), methods, [])


def cmd_report(args) -> int:
    frames = []
    for path in args.summary:
        try:
            f = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise DatasetError(f"{path}: {exc}") from None
        missing = {"variable", "metric", "method", "value"} - set(f.columns)
        if missing:
            raise DatasetError(f"{path}: not a metrics summary (missing {sorted(missing)})")
        frames.append(f[["variable", "metric", "method", "value"]])
    report = merge_summaries(frames)
    known = {r for r in ROWS}
    report.summary = report.summary[[(v, m) in known for v, m in zip(report.summary["variable"],
                                                                    report.summary["metric"])]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.summary.to_csv(out / "report_summary.csv", index=False, float_format="%.10g")
    (out / "report_table.txt").write_text(report.render())
    write_manifest(out, "report", {"summaries": [str(s) for s in args.summary]}, None, args.summary)
    sys.stdout.write(report.render())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spcde", description="Conditional density correction of climate model output.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--version", action="version", version=f"spcde {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI run configuration ([run] section)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")

    sp = sub.add_parser("synth", help="write a synthetic observed/model dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit and save a calibration model on the train span")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    with_config(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("calibrate", help="correct the model rows of the test span")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    with_config(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("qm", help="quantile-mapping baseline: fit on train span, apply to test span")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.add_argument("--maps", help="also write fitted maps as JSON")
    with_config(sp)
    sp.set_defaults(func=cmd_qm)

    sp = sub.add_parser("evaluate", help="metrics of corrected fields against observations")
    sp.add_argument("--obs", required=True)
    sp.add_argument("--input", action="append", metavar="NAME=FILE", required=True)
    sp.add_argument("--out")
    sp.add_argument("--prefix", default="metrics")
    with_config(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="merge metric summaries into one comparison table")
    sp.add_argument("--summary", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DatasetError, AlignmentError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FitError as exc:
        log.error("%s", exc)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
