"""Per-case stage pipeline, run manifests, scorecard and table export.

Run directory layout::

    <out>/config.json  manifest.json  scorecard.json  tables/*.csv
    <out>/cases/<case>/series.csv  dataset.npz  dataset.json  arrow.json
                       bundle/  forecasts/<method>.csv  forecasts/<method>.json
                       eval.json  stages.json

Each stage reads only files written by earlier stages.
"""
from __future__ import annotations

import logging
import platform
import re
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from . import storage
from .arrow import ArrowReport, arrow_verdict
from .config import RunConfig
from .errors import IncompleteRunError, RetroforecastError, ScorecardInputError, ShapeError, StageError
from .evaluation import (
    INVERSE_METHODS,
    METHOD_COLUMNS,
    EvalReport,
    Scorecard,
    ScorecardThresholds,
    evaluate_forecasts,
    format_scorecard,
    scorecard,
)
from .ingest import WindowedDataset, build_dataset, load_csv, preprocess
from .mapinfer import ForecastResult, MapConfig, MapModels, map_optimize_batch
from .models import ModelBundle, train_all
from .procgen import PARAMS, TimeSeries, generate_case
from .rng import make_rng

logger = logging.getLogger(__name__)

_WINDOW_STREAM = 60

SPLITS = ("train", "val", "test")

FORECAST_METHODS = ("naive", "mlp", "cvae", "inv-flow", "inv-gauss")
TABLES = ("results_table", "scorecard_table", "horizon_rmse", "arrow_scales", "map_losses", "training_curves")

_CASE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


class StageRecord(BaseModel):
    case: str
    stage: str
    seconds: float
    artifacts: Dict[str, str] = {}


class RunManifest(BaseModel):
    config: dict
    versions: Dict[str, str]
    cases: List[str]
    skipped: List[str] = []
    stages: List[StageRecord] = []


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in ("numpy", "scipy", "pandas", "pydantic"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def case_dir(run_dir, case: str) -> Path:
    if not _CASE_NAME.match(case):
        raise ShapeError(f"invalid case name '{case}'")
    return Path(run_dir) / "cases" / case


# ---------------------------------------------------------------------------
# Forecasting helpers (shared with the CLI)
# ---------------------------------------------------------------------------

def select_windows(
    dataset: WindowedDataset, subsample: Optional[int], seed: int, split: str = "test"
) -> np.ndarray:
    """Dataset row indices of the evaluated windows of one split, ascending."""
    lo, hi = dataset.bounds(split)
    rows = np.arange(lo, hi, dtype=np.int64)
    if subsample is None or subsample >= rows.size:
        return rows
    rng = make_rng(seed, _WINDOW_STREAM) if split == "test" else make_rng(seed, _WINDOW_STREAM, SPLITS.index(split))
    return np.sort(rng.choice(rows, size=subsample, replace=False))


def available_methods(bundle: ModelBundle) -> List[str]:
    methods = ["naive"]
    if bundle.mlp is not None:
        methods.append("mlp")
    if bundle.cvae is not None:
        methods.append("cvae")
    if bundle.inverse is not None:
        if bundle.flow is not None:
            methods.append("inv-flow")
        methods.append("inv-gauss")
    return methods


def forecast_windows(
    bundle: ModelBundle,
    X: np.ndarray,
    window_index: Sequence[int],
    map_config: MapConfig = MapConfig(),
    methods: Optional[Sequence[str]] = None,
    progress: bool = False,
) -> Dict[str, Tuple[np.ndarray, Optional[List[ForecastResult]]]]:
    """Predictions (standardized) per method; inverse methods also return MAP results."""
    methods = list(methods) if methods is not None else available_methods(bundle)
    unknown = [m for m in methods if m not in FORECAST_METHODS]
    if unknown:
        raise ShapeError(f"unknown forecast method(s): {', '.join(unknown)}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    keys = [int(k) for k in window_index]
    out: Dict[str, Tuple[np.ndarray, Optional[List[ForecastResult]]]] = {}
    for method in methods:
        if method == "naive":
            out[method] = (np.tile(bundle.naive_mean, (X.shape[0], 1)), None)
        elif method == "mlp":
            bundle.require("mlp")
            out[method] = (bundle.mlp.predict(X), None)
        elif method == "cvae":
            bundle.require("cvae")
            out[method] = (bundle.cvae.predict(X, map_config.seed, keys=keys), None)
        else:
            models = MapModels.from_bundle(bundle, method, map_config.seed)
            results = map_optimize_batch(models, X, map_config, keys, progress)
            out[method] = (np.stack([r.y_hat for r in results]), results)
        logger.info("  [Forecast] %s: %d windows", method, X.shape[0])
    return out


def forecast_path(target, method: str) -> Path:
    """``target`` itself when it names a CSV file, else ``target/<method>.csv``."""
    target = Path(target)
    return target if target.suffix == ".csv" else target / f"{method}.csv"


def write_forecast(target, method: str, window_index, truth, pred, results=None, map_config=None) -> List[Path]:
    """Forecast CSV plus a JSON sidecar carrying the method and any MAP records.

    No sidecar for a ``<method>.csv`` file without MAP records.
    """
    path = forecast_path(target, method)
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    n, m = truth.shape
    frame = pd.DataFrame({
        "window_index": np.repeat(np.asarray(window_index, dtype=np.int64), m),
        "horizon_step": np.tile(np.arange(1, m + 1), n),
        "y_true": truth.ravel(),
        "y_hat": pred.ravel(),
    })
    paths = [storage.write_csv(path, frame)]
    if results is not None or path.stem != method:
        payload = {
            "method": method,
            "map_config": map_config.model_dump() if map_config is not None else None,
            "windows": [r.to_dict() for r in results or []],
        }
        paths.append(storage.write_json(path.with_suffix(".json"), payload))
    return paths


def forecast_method(path) -> str:
    """Method of a forecast CSV, from its file name or its JSON sidecar."""
    path = Path(path)
    if path.stem in FORECAST_METHODS:
        return path.stem
    sidecar = path.with_suffix(".json")
    method = storage.read_json(sidecar).get("method") if sidecar.is_file() else None
    if method not in FORECAST_METHODS:
        raise ShapeError(f"{path.name}: cannot tell which method produced it (name it <method>.csv)")
    return method


def read_forecast(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(window_index, truth N x m, prediction N x m) from a forecast CSV."""
    frame = storage.read_csv(path)
    missing = {"window_index", "horizon_step", "y_true", "y_hat"} - set(frame.columns)
    if missing:
        raise ShapeError(f"{Path(path).name} lacks column(s): {', '.join(sorted(missing))}")
    frame = frame.sort_values(["window_index", "horizon_step"], kind="stable")
    index = frame["window_index"].drop_duplicates().to_numpy(dtype=np.int64)
    m = int(frame["horizon_step"].max())
    if len(frame) != index.size * m:
        raise ShapeError(f"{Path(path).name}: ragged forecast rows")
    truth = frame["y_true"].to_numpy(dtype=np.float64).reshape(index.size, m)
    pred = frame["y_hat"].to_numpy(dtype=np.float64).reshape(index.size, m)
    return index, truth, pred


def _diagnostics(path, window_index: np.ndarray) -> Optional[Dict[str, np.ndarray]]:
    rows = {int(w["window_index"]): w for w in storage.read_json(path)["windows"]}
    if not rows:
        return None
    missing = [int(k) for k in window_index if int(k) not in rows]
    if missing:
        raise ShapeError(f"{Path(path).name}: no MAP record for window {missing[0]}")
    return {
        key: np.array([np.nan if rows[int(k)][key] is None else rows[int(k)][key] for k in window_index], dtype=np.float64)
        for key in ("map_loss_best", "dispersion", "retro_nll")
    }


def _forecast_files(sources: Sequence[Path]) -> List[Path]:
    files: List[Path] = []
    for source in sources:
        if source.is_dir():
            files += sorted(p for p in source.glob("*.csv") if p.stem in FORECAST_METHODS)
        elif source.is_file():
            files.append(source)
        else:
            raise IncompleteRunError(f"forecast file not found: {source}")
    return files


def evaluate_forecast_files(case: str, sources, h: Optional[int] = None) -> EvalReport:
    """EvalReport from forecast CSVs (+ JSON sidecars).

    ``sources`` is one path or a list; directories contribute their
    ``<method>.csv`` files.
    """
    sources = [Path(sources)] if isinstance(sources, (str, Path)) else [Path(s) for s in sources]
    files = _forecast_files(sources)
    if not files:
        raise IncompleteRunError(f"case {case}: no forecast files in {', '.join(map(str, sources))}")
    index = truth = None
    predictions, diagnostics = {}, {}
    for path in files:
        method = forecast_method(path)
        if method in predictions:
            raise ShapeError(f"case {case}: two forecast files for {method}")
        idx, t, p = read_forecast(path)
        if index is None:
            index, truth = idx, t
        elif not np.array_equal(idx, index) or not np.array_equal(t, truth):
            raise ShapeError(f"case {case}: {path.name} covers different windows than {files[0].name}")
        predictions[method] = p
        sidecar = path.with_suffix(".json")
        if method in INVERSE_METHODS and sidecar.is_file():
            found = _diagnostics(sidecar, idx)
            if found is not None:
                diagnostics[method] = found
    return evaluate_forecasts(case, truth, predictions, index, diagnostics, h if h is not None else truth.shape[1])


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_series(cfg: RunConfig, case: str, directory: Path, progress: bool = False) -> List[Path]:
    spec = cfg.file_case(case)
    if spec is None:
        params = PARAMS[case](**cfg.case_params.get(case, {}))
        series = generate_case(case, cfg.T, cfg.seed, params)
    else:
        raw = load_csv(spec.path, spec.value_column, spec.timestamp_column)
        clean = preprocess(raw, spec.preprocess)
        series = TimeSeries(clean.values, name=case, source="file", timestamps=clean.timestamps)
    return [storage.write_series(directory / "series.csv", series)]


def stage_dataset(cfg: RunConfig, case: str, directory: Path, progress: bool = False) -> List[Path]:
    series = storage.read_series(directory / "series.csv", name=case)
    dataset = build_dataset(series, cfg.window, cfg.fractions)
    return [Path(p) for p in storage.write_dataset(directory / "dataset", dataset, series.values).values()]


def stage_diagnose(cfg: RunConfig, case: str, directory: Path, progress: bool = False) -> List[Path]:
    series = storage.read_series(directory / "series.csv", name=case)
    report = arrow_verdict(series, cfg.arrow, progress)
    return [storage.write_json(directory / "arrow.json", report)]


def stage_train(cfg: RunConfig, case: str, directory: Path, progress: bool = False) -> List[Path]:
    dataset = storage.read_dataset(directory / "dataset")
    bundle = train_all(dataset, cfg.train, cfg.methods, progress)
    return [Path(p) for p in bundle.save(directory / "bundle").values()]


def stage_forecast(cfg: RunConfig, case: str, directory: Path, progress: bool = False) -> List[Path]:
    dataset = storage.read_dataset(directory / "dataset")
    bundle = ModelBundle.load(directory / "bundle")
    rows = select_windows(dataset, cfg.test_subsample, cfg.seed)
    X, Y = dataset.X[rows], dataset.Y[rows]
    paths: List[Path] = []
    for method, (pred, results) in forecast_windows(bundle, X, rows, cfg.map, progress=progress).items():
        paths += write_forecast(directory / "forecasts", method, rows, Y, pred, results, cfg.map)
    return paths


def stage_evaluate(cfg: RunConfig, case: str, directory: Path, progress: bool = False) -> List[Path]:
    report = evaluate_forecast_files(case, directory / "forecasts", cfg.window.horizon)
    return [storage.write_json(directory / "eval.json", report)]


Stage = Callable[[RunConfig, str, Path, bool], List[Path]]

STAGES: Tuple[Tuple[str, Stage], ...] = (
    ("series", stage_series),
    ("dataset", stage_dataset),
    ("diagnose", stage_diagnose),
    ("train", stage_train),
    ("forecast", stage_forecast),
    ("evaluate", stage_evaluate),
)


def _record(run_dir: Path, case: str, stage: str, seconds: float, paths: Sequence[Path]) -> StageRecord:
    artifacts = {
        Path(p).resolve().relative_to(run_dir.resolve()).as_posix(): storage.sha256_file(p) for p in paths
    }
    return StageRecord(case=case, stage=stage, seconds=round(seconds, 3), artifacts=dict(sorted(artifacts.items())))


def run_case(cfg: RunConfig, case: str, progress: bool = False) -> List[StageRecord]:
    """All stages of one case, in order. Failures raise StageError naming the stage."""
    run_dir = Path(cfg.out_dir)
    directory = case_dir(run_dir, case)
    directory.mkdir(parents=True, exist_ok=True)
    records: List[StageRecord] = []
    for name, fn in STAGES:
        logger.info("  [Pipeline] %s: %s", case, name)
        started = time.perf_counter()
        try:
            paths = fn(cfg, case, directory, progress)
        except (RetroforecastError, ValidationError, OSError, ValueError) as ex:
            raise StageError(name, f"case {case}: {ex}") from ex
        records.append(_record(run_dir, case, name, time.perf_counter() - started, paths))
        storage.write_json(directory / "stages.json", [r.model_dump() for r in records])
    return records


def _completed_stages(run_dir: Path, case: str) -> List[StageRecord]:
    path = case_dir(run_dir, case) / "stages.json"
    if not path.is_file():
        return []
    return [StageRecord.model_validate(r) for r in storage.read_json(path)]


def runnable_cases(cfg: RunConfig) -> Tuple[List[str], List[str]]:
    """Cases to run, and optional file cases skipped because their CSV is absent."""
    cases, skipped = [], []
    for case in cfg.cases:
        spec = cfg.file_case(case)
        if spec is not None and not Path(spec.path).is_file():
            if spec.optional:
                logger.warning("  [Pipeline] ⚠️ %s: %s not found, skipping case", case, spec.path)
                skipped.append(case)
                continue
            raise IncompleteRunError(f"case {case}: data file {spec.path} not found")
        cases.append(case)
    return cases, skipped


def _write_manifest(run_dir: Path, manifest: RunManifest) -> None:
    order = {c: i for i, c in enumerate(manifest.cases + ["*"])}
    stage_order = {name: i for i, (name, _) in enumerate(STAGES)}
    manifest.stages.sort(key=lambda r: (order.get(r.case, len(order)), stage_order.get(r.stage, len(stage_order))))
    storage.write_json(run_dir / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# Scorecard
# ---------------------------------------------------------------------------

def run_cases(run_dir) -> List[str]:
    run_dir = Path(run_dir)
    manifest = run_dir / "manifest.json"
    if manifest.is_file():
        return list(storage.read_json(manifest)["cases"])
    cases_root = run_dir / "cases"
    if not cases_root.is_dir():
        raise IncompleteRunError(f"{run_dir} is not a run directory")
    return sorted(p.name for p in cases_root.iterdir() if p.is_dir())


def _thresholds(run_dir: Path) -> ScorecardThresholds:
    path = run_dir / "config.json"
    if not path.is_file():
        return ScorecardThresholds()
    return ScorecardThresholds.model_validate(storage.read_json(path).get("thresholds", {}))


def load_case_reports(run_dir, case: str) -> Tuple[ArrowReport, EvalReport]:
    directory = case_dir(run_dir, case)
    missing = [name for name in ("arrow.json", "eval.json") if not (directory / name).is_file()]
    if missing:
        raise ScorecardInputError(f"case {case}: missing {', '.join(missing)}")
    return (
        ArrowReport.model_validate(storage.read_json(directory / "arrow.json")),
        EvalReport.model_validate(storage.read_json(directory / "eval.json")),
    )


def scorecard_from_run(run_dir, thresholds: Optional[ScorecardThresholds] = None) -> Scorecard:
    return scorecard_from_runs([run_dir], thresholds)


def scorecard_from_runs(run_dirs: Sequence, thresholds: Optional[ScorecardThresholds] = None) -> Scorecard:
    """One scorecard over the cases of several runs (e.g. synthetic and ERA5 runs).

    Thresholds default to those recorded by the first run.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ScorecardInputError("no run directories given")
    arrows, evals = {}, {}
    for run_dir in run_dirs:
        for case in run_cases(run_dir):
            if case in evals:
                raise ScorecardInputError(f"case {case} appears in more than one run ({run_dir})")
            arrows[case], evals[case] = load_case_reports(run_dir, case)
    return scorecard(arrows, evals, thresholds or _thresholds(run_dirs[0]))


def write_scorecard(target, card: Scorecard) -> Path:
    """``target`` is a run directory or a ``.json`` file path."""
    target = Path(target)
    path = target if target.suffix == ".json" else target / "scorecard.json"
    return storage.write_json(path, {**card.model_dump(mode="json"), "all_pass": card.all_pass})


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------

def reproduce(cfg: RunConfig, jobs: int = 1, progress: bool = False) -> Path:
    """Full pipeline for every case, then scorecard and tables. Returns the run directory."""
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    storage.write_json(run_dir / "config.json", cfg.model_dump(mode="json"))
    cases, skipped = runnable_cases(cfg)
    manifest = RunManifest(config=cfg.model_dump(mode="json"), versions=package_versions(), cases=cases, skipped=skipped)
    _write_manifest(run_dir, manifest)
    logger.info("  [Pipeline] run %s: cases %s (jobs=%d)", run_dir, ", ".join(cases) or "-", jobs)

    failure: Optional[BaseException] = None
    if jobs > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cases))) as pool:
            futures = {pool.submit(run_case, cfg, case, False): case for case in cases}
            for future in as_completed(futures):
                case = futures[future]
                try:
                    manifest.stages.extend(future.result())
                    logger.info("  [Pipeline] ✅ case %s done", case)
                except StageError as ex:
                    logger.error("  [Pipeline] ❌ %s", ex)
                    manifest.stages.extend(_completed_stages(run_dir, case))
                    failure = failure or ex
                _write_manifest(run_dir, manifest)
    else:
        for case in cases:
            try:
                manifest.stages.extend(run_case(cfg, case, progress))
                logger.info("  [Pipeline] ✅ case %s done", case)
            except StageError as ex:
                logger.error("  [Pipeline] ❌ %s", ex)
                manifest.stages.extend(_completed_stages(run_dir, case))
                failure = ex
            _write_manifest(run_dir, manifest)
            if failure is not None:
                break
    if failure is not None:
        raise failure

    started = time.perf_counter()
    try:
        card = scorecard_from_run(run_dir, cfg.thresholds)
    except RetroforecastError as ex:
        raise StageError("scorecard", str(ex)) from ex
    path = write_scorecard(run_dir, card)
    manifest.stages.append(_record(run_dir, "*", "scorecard", time.perf_counter() - started, [path]))
    _write_manifest(run_dir, manifest)

    started = time.perf_counter()
    tables = export_tables(run_dir)
    manifest.stages.append(_record(run_dir, "*", "export", time.perf_counter() - started, list(tables.values())))
    _write_manifest(run_dir, manifest)

    print(format_scorecard(card))
    return run_dir


# ---------------------------------------------------------------------------
# export_tables
# ---------------------------------------------------------------------------

def _nan(value) -> float:
    return float("nan") if value is None else float(value)


def export_tables(run_dir) -> Dict[str, Path]:
    """CSV tables for external plotting. Requires a completed run."""
    run_dir = Path(run_dir)
    out = run_dir / "tables"
    cases = run_cases(run_dir)
    if not cases:
        raise IncompleteRunError(f"{run_dir}: run has no cases")

    results, horizon, scales, losses, curves = [], [], [], [], []
    for case in cases:
        directory = case_dir(run_dir, case)
        for name in ("eval.json", "arrow.json"):
            if not (directory / name).is_file():
                raise IncompleteRunError(f"case {case}: missing {name}")
        arrow, report = load_case_reports(run_dir, case)

        row = {"Case": case, "Verdict": arrow.verdict}
        for method in ("naive", "mlp", "cvae", "inv-flow"):
            row[METHOD_COLUMNS[method]] = report.rmse.get(method, float("nan"))
        row.update({"Ratio": report.ratio_inv_mlp, "DMstat": _nan(report.dm_stat), "DMp": report.dm_p})
        results.append(row)

        for method, curve in sorted(report.horizon_rmse.items()):
            horizon += [{"Case": case, "Method": method, "Step": i + 1, "RMSE": v} for i, v in enumerate(curve)]

        scales += [
            {
                "Case": case, "Representation": s.representation, "w": s.w, "J_obs": s.j_obs,
                "p": s.p_perm, "NullMean": s.null_mean, "Embeddings": s.n_embeddings,
            }
            for s in arrow.scale_results
        ]

        for method in INVERSE_METHODS:
            path = directory / "forecasts" / f"{method}.json"
            if not path.is_file():
                continue
            for w in storage.read_json(path)["windows"]:
                losses.append({
                    "Case": case, "Method": method, "Window": w["window_index"],
                    "MapLoss": _nan(w["map_loss_best"]), "RetroNLL": _nan(w["retro_nll"]),
                    "Dispersion": _nan(w["dispersion"]), "BestRestart": w["best_restart"],
                })

        bundle_meta = directory / "bundle" / "bundle.json"
        if bundle_meta.is_file():
            for model, history in sorted(storage.read_json(bundle_meta).get("histories", {}).items()):
                curves += [
                    {"Case": case, "Model": model, "Epoch": e, "TrainLoss": _nan(a), "ValLoss": _nan(b)}
                    for e, a, b in history
                ]

    card = scorecard_from_run(run_dir) if not (run_dir / "scorecard.json").is_file() else None
    card_data = card.model_dump(mode="json") if card is not None else storage.read_json(run_dir / "scorecard.json")
    scorecard_rows = [
        {
            "Prediction": name,
            "Result": "NA" if p["passed"] is None else ("PASS" if p["passed"] else "FAIL"),
            "Observed": "; ".join(f"{c}={v}" for c, v in p["observed"].items()),
            "Criterion": p["criterion"],
        }
        for name, p in card_data["predictions"].items()
    ]

    frames = {
        "results_table": pd.DataFrame(results, columns=["Case", "Verdict", "Naive", "MLP", "CVAE", "InvFlow", "Ratio", "DMstat", "DMp"]),
        "scorecard_table": pd.DataFrame(scorecard_rows, columns=["Prediction", "Result", "Observed", "Criterion"]),
        "horizon_rmse": pd.DataFrame(horizon, columns=["Case", "Method", "Step", "RMSE"]),
        "arrow_scales": pd.DataFrame(scales, columns=["Case", "Representation", "w", "J_obs", "p", "NullMean", "Embeddings"]),
        "map_losses": pd.DataFrame(losses, columns=["Case", "Method", "Window", "MapLoss", "RetroNLL", "Dispersion", "BestRestart"]),
        "training_curves": pd.DataFrame(curves, columns=["Case", "Model", "Epoch", "TrainLoss", "ValLoss"]),
    }
    written = {name: storage.write_csv(out / f"{name}.csv", frame) for name, frame in frames.items()}
    logger.info("  [Export] %d tables -> %s", len(written), out)
    return written


def read_table(run_dir, table: str) -> List[Mapping[str, object]]:
    if table not in TABLES:
        raise ShapeError(f"unknown table '{table}'")
    frame = storage.read_csv(Path(run_dir) / "tables" / f"{table}.csv")
    return [{k: storage.to_jsonable(v) for k, v in row.items()} for row in frame.astype(object).where(frame.notna(), None).to_dict("records")]
