"""Command line entry point.

Usage (from project root):
  python retroforecast.py reproduce --config run.json --seed 42 --out runs/r42
  python -m backend.core.main generate --case A --T 20000 --out series.csv

Exit codes: 0 success, 10 NOGO verdict (diagnose only), 1 error (usage errors included).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from . import storage
from .arrow import arrow_verdict
from .config import RunConfig, Settings, load_config, load_run_config
from .errors import RetroforecastError, UsageError
from .evaluation import format_scorecard
from .ingest import DaylightFilter, PreprocessSpec, build_dataset, load_csv, preprocess
from .models import METHODS, ModelBundle, train_all
from .pipeline import (
    FORECAST_METHODS,
    SPLITS,
    evaluate_forecast_files,
    export_tables,
    forecast_windows,
    reproduce,
    scorecard_from_runs,
    select_windows,
    write_forecast,
    write_scorecard,
)
from .procgen import CASES, PARAMS, TimeSeries, generate_case

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOGO = 10

ALL = "all"


class CliParser(argparse.ArgumentParser):
    """argparse that reports usage errors through the package's error path (exit 1)."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _parse_params(items: Optional[List[str]]) -> dict:
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise RetroforecastError(f"--param expects key=value, got '{item}'")
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise RetroforecastError(f"--param {key}: '{value}' is not a number") from None
    return params


def _expand_all(chosen: Optional[Sequence[str]], every: Sequence[str]) -> Optional[List[str]]:
    if not chosen:
        return None
    if ALL in chosen:
        return list(every)
    return list(dict.fromkeys(chosen))


def _require_out(args) -> Path:
    if args.out is None:
        raise RetroforecastError(f"{args.command}: --out is required")
    return Path(args.out)


def _series_from(path: Path) -> TimeSeries:
    """A series CSV, or the source series stored with a dataset."""
    if path.suffix != ".csv":
        return TimeSeries(storage.read_dataset_source(path), name=path.stem, source="file")
    return storage.read_series(path)


def cmd_generate(args, cfg: RunConfig, settings: Settings) -> int:
    case = args.case.upper()
    params = {**cfg.case_params.get(case, {}), **_parse_params(args.param)}
    T = args.T if args.T is not None else cfg.T
    series = generate_case(case, T, cfg.seed, PARAMS[case](**params))
    path = storage.write_series(_require_out(args), series)
    print(f"✅ case {case}: {len(series)} values -> {path}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig, settings: Settings) -> int:
    daylight = None
    if args.lat is not None or args.lon is not None:
        if args.lat is None or args.lon is None:
            raise RetroforecastError("daylight filter needs both --lat and --lon")
        daylight = DaylightFilter(lat=args.lat, lon=args.lon, zenith_max=args.zenith_max)
    spec = PreprocessSpec(
        log_transform=args.log,
        log_floor=args.log_floor,
        accumulated_to_watts=args.to_watts,
        daylight_filter=daylight,
    )
    series = preprocess(load_csv(args.csv, args.value_col, args.time_col), spec)
    dataset = build_dataset(series, cfg.window, cfg.fractions)
    out = _require_out(args)
    stem = out.with_suffix("") if out.suffix else out
    storage.write_dataset(stem, dataset, series.values)
    print(f"✅ {len(dataset)} windows (train_end={dataset.train_end}, val_end={dataset.val_end}) -> {stem}.npz")
    return EXIT_OK


def cmd_diagnose(args, cfg: RunConfig, settings: Settings) -> int:
    report = arrow_verdict(_series_from(Path(args.data)), cfg.arrow, settings.progress)
    if args.out is not None:
        storage.write_json(args.out, report)
    for s in report.scale_results:
        print(f"  {s.representation:<5} w={s.w:<3} J={s.j_obs:.4f} p={s.p_perm:.4f}")
    mark = "✅" if report.is_go else "❌"
    print(f"{mark} verdict {report.verdict} (delta_arrow={report.delta_arrow:.4f}, counts={report.significant_counts})")
    return EXIT_OK if report.is_go else EXIT_NOGO


def cmd_train(args, cfg: RunConfig, settings: Settings) -> int:
    dataset = storage.read_dataset(args.data)
    methods = _expand_all(args.methods, METHODS) or list(cfg.methods)
    bundle = train_all(dataset, cfg.train, methods, settings.progress)
    bundle.save(_require_out(args))
    print(f"✅ trained {', '.join(methods)} -> {args.out}")
    return EXIT_OK


def cmd_forecast(args, cfg: RunConfig, settings: Settings) -> int:
    methods = _expand_all(args.methods, FORECAST_METHODS)
    out = _require_out(args)
    if out.suffix == ".csv" and (methods is None or len(methods) != 1):
        raise UsageError("forecast: a .csv --out takes exactly one --method")
    dataset = storage.read_dataset(args.data)
    bundle = ModelBundle.load(args.bundle)
    subsample = None if args.full else (args.subsample if args.subsample is not None else cfg.test_subsample)
    rows = select_windows(dataset, subsample, cfg.seed, args.split)
    preds = forecast_windows(bundle, dataset.X[rows], rows, cfg.map, methods, settings.progress)
    for method, (pred, results) in preds.items():
        write_forecast(out, method, rows, dataset.Y[rows], pred, results, cfg.map)
    print(f"✅ {len(rows)} {args.split} windows, methods {', '.join(preds)} -> {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, settings: Settings) -> int:
    report = evaluate_forecast_files(args.case, args.forecasts, args.horizon)
    if args.out is not None:
        storage.write_json(args.out, report)
    for method, value in sorted(report.rmse.items()):
        print(f"  {method:<10} RMSE {value:.4f}")
    stat = "n/a" if report.dm_stat is None else f"{report.dm_stat:+.3f}"
    print(f"  ratio inv-flow/mlp {report.ratio_inv_mlp:.4f}, DM {stat} p={report.dm_p:.3g}")
    return EXIT_OK


def cmd_scorecard(args, cfg: RunConfig, settings: Settings) -> int:
    card = scorecard_from_runs(args.runs)
    write_scorecard(args.out or args.runs[0], card)
    print(format_scorecard(card))
    return EXIT_OK


def cmd_reproduce(args, cfg: RunConfig, settings: Settings) -> int:
    if args.full:
        cfg = cfg.model_copy(update={"test_subsample": None})
    reproduce(cfg, args.jobs or settings.jobs, settings.progress)
    return EXIT_OK


def cmd_export(args, cfg: RunConfig, settings: Settings) -> int:
    written = export_tables(Path(args.run or _require_out(args)))
    for name, path in written.items():
        print(f"  {name:<16} {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="RunConfig JSON file")
    common.add_argument("--seed", type=int, default=None, help="Override the run seed")
    common.add_argument("--out", default=None, help="Output path (file or directory depending on command)")

    parser = CliParser(prog="retroforecast", description="Retrodictive forecasting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="Write a synthetic series CSV")
    p.add_argument("--case", required=True, choices=CASES + tuple(c.lower() for c in CASES))
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--param", action="append", help="Generator parameter override, key=value")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", parents=[common], help="CSV -> windowed, standardized dataset")
    p.add_argument("--csv", required=True, type=Path)
    p.add_argument("--value-col", required=True)
    p.add_argument("--time-col", default=None)
    p.add_argument("--log", action="store_true", help="Log-transform after clipping at --log-floor")
    p.add_argument("--log-floor", type=float, default=0.1)
    p.add_argument("--to-watts", action="store_true", help="Hourly accumulated J/m^2 -> W/m^2")
    p.add_argument("--lat", type=float, default=None)
    p.add_argument("--lon", type=float, default=None)
    p.add_argument("--zenith-max", type=float, default=80.0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("diagnose", parents=[common], help="Arrow-of-time GO/NOGO verdict")
    p.add_argument("--data", required=True, help="Series CSV or dataset stem")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("train", parents=[common], help="Train baselines, inverse CVAE and flow prior")
    p.add_argument("--data", required=True, help="Dataset stem written by ingest")
    p.add_argument("--methods", nargs="+", choices=METHODS + (ALL,), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", parents=[common], help="Forecast windows of one split")
    p.add_argument("--data", required=True, help="Dataset stem written by ingest")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--subsample", type=int, default=None, help="Windows to draw (default: config test_subsample)")
    p.add_argument("--full", action="store_true", help="Use every window of the split")
    p.add_argument("--method", "--methods", dest="methods", nargs="+", choices=FORECAST_METHODS + (ALL,), default=None)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", parents=[common], help="Metrics and DM tests from forecast files")
    p.add_argument("--forecasts", required=True, nargs="+", help="Forecast CSVs or directories of <method>.csv")
    p.add_argument("--case", default="case")
    p.add_argument("--horizon", type=int, default=None, help="DM horizon (default: forecast length)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("scorecard", parents=[common], help="Scorecard over one or more run directories")
    p.add_argument("--runs", required=True, nargs="+")
    p.set_defaults(func=cmd_scorecard)

    p = sub.add_parser("reproduce", parents=[common], help="Run every stage for every case")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--full", action="store_true", help="Evaluate full test sets")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("export", parents=[common], help="Export CSV tables from a completed run")
    p.add_argument("--run", default=None)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = load_config()
    logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "subsample", None) is not None and args.subsample < 1:
            raise UsageError("--subsample must be at least 1")
        out_dir = Path(args.out) if args.command == "reproduce" and args.out else None
        cfg = load_run_config(args.config, args.seed, out_dir)
        return args.func(args, cfg, settings)
    except (RetroforecastError, ValidationError, OSError) as ex:
        message = " ".join(str(ex).split())
        print(f"❌ {type(ex).__name__}: {message}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
