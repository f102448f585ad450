from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from .diffcore import ParamStore
from .errors import IncompleteRunError, IngestError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _atomic_write(path: Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if hasattr(obj, "model_dump"):
        return to_jsonable(obj.model_dump(mode="json"))
    return obj


def write_json(path, data: Any) -> Path:
    text = json.dumps(to_jsonable(data), ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False)
    return _atomic_write(Path(path), (text + "\n").encode("utf-8"))


def read_json(path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise IncompleteRunError(f"missing artifact: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_csv(path, frame: pd.DataFrame) -> Path:
    buf = io.StringIO()
    frame.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return _atomic_write(Path(path), buf.getvalue().encode("utf-8"))


def read_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise IncompleteRunError(f"missing artifact: {path}")
    return pd.read_csv(path, encoding="utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------- series and datasets -----------------------

def write_series(path, series) -> Path:
    cols: Dict[str, Any] = {"index": np.arange(len(series)), "value": series.values}
    if series.timestamps is not None:
        cols["timestamp"] = pd.DatetimeIndex(series.timestamps).strftime("%Y-%m-%dT%H:%M:%S")
    logger.info("  [Storage] series '%s' (%d values) -> %s", series.name, len(series), path)
    return write_csv(path, pd.DataFrame(cols))


def read_series(path, name: Optional[str] = None):
    from .ingest import load_csv

    path = Path(path)
    if not path.is_file():
        raise IncompleteRunError(f"missing series file: {path}")
    header = pd.read_csv(path, nrows=0).columns
    series = load_csv(path, "value", "timestamp" if "timestamp" in header else None)
    if name:
        from .procgen import TimeSeries

        series = TimeSeries(series.values, name=name, source=series.source, seed=series.seed, timestamps=series.timestamps)
    return series


def write_dataset(stem, dataset, source_values=None) -> Dict[str, str]:
    """``<stem>.npz`` with the scaled matrices (and the raw source series)
    plus a ``<stem>.json`` sidecar."""
    stem = Path(stem)
    buf = io.BytesIO()
    source = np.zeros(0) if source_values is None else np.asarray(source_values, dtype=np.float64)
    np.savez(buf, X=np.asarray(dataset.X), Y=np.asarray(dataset.Y), starts=np.asarray(dataset.starts), source=source)
    npz = _atomic_write(stem.with_suffix(".npz"), buf.getvalue())
    meta = {
        "name": dataset.name,
        "train_end": dataset.train_end,
        "val_end": dataset.val_end,
        "n_windows": len(dataset),
        "scaler": {"mean": dataset.scaler.mean, "std": dataset.scaler.std},
        "window": dataset.config.model_dump(),
    }
    side = write_json(stem.with_suffix(".json"), meta)
    return {npz.name: str(npz), side.name: str(side)}


def read_dataset(stem):
    from .ingest import Scaler, WindowConfig, WindowedDataset

    stem = Path(stem)
    if stem.suffix in (".npz", ".json"):
        stem = stem.with_suffix("")
    meta = read_json(stem.with_suffix(".json"))
    npz_path = stem.with_suffix(".npz")
    if not npz_path.is_file():
        raise IncompleteRunError(f"missing artifact: {npz_path}")
    with np.load(npz_path) as arrays:
        X, Y, starts = arrays["X"], arrays["Y"], arrays["starts"]
    if X.shape[0] != meta["n_windows"] or Y.shape[0] != meta["n_windows"]:
        raise IngestError(f"{npz_path.name}: window count does not match its sidecar")
    return WindowedDataset(
        X=X, Y=Y, starts=starts,
        train_end=int(meta["train_end"]), val_end=int(meta["val_end"]),
        scaler=Scaler(**meta["scaler"]), config=WindowConfig(**meta["window"]), name=meta.get("name", ""),
    )


# ----------------------- parameters -----------------------

def write_params(store: ParamStore, stem) -> Dict[str, str]:
    """Flat little-endian float64 ``<stem>.bin`` plus ``<stem>.json`` (names, shapes)."""
    stem = Path(stem)
    blob = store.flatten().astype("<f8").tobytes()
    binary = _atomic_write(stem.with_suffix(".bin"), blob)
    manifest = write_json(stem.with_suffix(".json"), {"dtype": "<f8", "params": store.manifest()})
    return {binary.name: str(binary), manifest.name: str(manifest)}


def read_params(stem) -> ParamStore:
    stem = Path(stem)
    manifest = read_json(stem.with_suffix(".json"))
    binary = stem.with_suffix(".bin")
    if not binary.is_file():
        raise IncompleteRunError(f"missing artifact: {binary}")
    flat = np.frombuffer(binary.read_bytes(), dtype="<f8").astype(np.float64)
    return ParamStore.from_flat(flat, manifest["params"])


def read_dataset_source(stem) -> np.ndarray:
    """Raw source series stored alongside a dataset."""
    stem = Path(stem)
    if stem.suffix in (".npz", ".json"):
        stem = stem.with_suffix("")
    npz_path = stem.with_suffix(".npz")
    if not npz_path.is_file():
        raise IncompleteRunError(f"missing artifact: {npz_path}")
    with np.load(npz_path) as arrays:
        source = arrays["source"] if "source" in arrays.files else np.zeros(0)
    if source.size == 0:
        raise IngestError(f"{npz_path.name} carries no source series")
    return source
