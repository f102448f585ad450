import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from backend.core.errors import IngestError
from backend.core.ingest import (
    DaylightFilter,
    PreprocessSpec,
    WindowConfig,
    build_dataset,
    fit_scaler,
    load_csv,
    make_windows,
    preprocess,
    solar_zenith_deg,
    split_and_scale,
)
from backend.core.procgen import TimeSeries


def _series(values, **kw):
    return TimeSeries(np.asarray(values, dtype=float), name="s", **kw)


def test_load_csv_reads_values(tmp_path):
    path = tmp_path / "three.csv"
    path.write_text("v\n1\n2\n3\n", encoding="utf-8")
    series = load_csv(path, "v")
    assert series.values.tolist() == [1.0, 2.0, 3.0]
    assert series.source == "file"


def test_load_csv_rejects_nan_row(tmp_path):
    path = tmp_path / "gap.csv"
    pd.DataFrame({"t": [0, 1, 2], "v": [1.0, np.nan, 3.0]}).to_csv(path, index=False)
    with pytest.raises(IngestError, match="row 1"):
        load_csv(path, "v")


def test_load_csv_errors(tmp_path):
    with pytest.raises(IngestError, match="not found"):
        load_csv(tmp_path / "missing.csv", "v")
    path = tmp_path / "a.csv"
    path.write_text("v\n1\n", encoding="utf-8")
    with pytest.raises(IngestError, match="column"):
        load_csv(path, "w")
    empty = tmp_path / "empty.csv"
    empty.write_text("v\n", encoding="utf-8")
    with pytest.raises(IngestError):
        load_csv(empty, "v")


def test_load_csv_checks_timestamp_order(tmp_path):
    path = tmp_path / "ts.csv"
    pd.DataFrame({
        "time": ["2023-01-01 00:00", "2023-01-01 02:00", "2023-01-01 01:00"],
        "v": [1.0, 2.0, 3.0],
    }).to_csv(path, index=False)
    with pytest.raises(IngestError, match="row 2"):
        load_csv(path, "v", "time")


def test_preprocess_log():
    out = preprocess(_series([1.0, math.e, math.e**2]), PreprocessSpec(log_transform=True))
    np.testing.assert_allclose(out.values, [0.0, 1.0, 2.0], atol=1e-12)


def test_preprocess_log_clips_calm_values():
    out = preprocess(_series([0.0, 1.0]), PreprocessSpec(log_transform=True, log_floor=0.1))
    assert out.values[0] == pytest.approx(math.log(0.1))


def test_preprocess_accumulated_to_watts():
    out = preprocess(_series([3600.0, 7200.0]), PreprocessSpec(accumulated_to_watts=True))
    assert out.values.tolist() == [1.0, 2.0]


def test_solar_zenith_equator_equinox_noon():
    z = solar_zenith_deg(np.array(["2023-03-20T12:00:00"], dtype="datetime64[ns]"), lat=0.0, lon=0.0)
    assert z[0] < 1.5


def test_daylight_filter_drops_night():
    ts = pd.date_range("2023-06-21", periods=24, freq="h").to_numpy()
    spec = PreprocessSpec(daylight_filter=DaylightFilter(lat=0.0, lon=0.0, zenith_max=80.0))
    out = preprocess(_series(np.arange(24.0), timestamps=ts), spec)
    hours = out.values.astype(int)
    assert 12 in hours
    assert 0 not in hours and 23 not in hours
    assert out.timestamps.shape == out.values.shape


def test_daylight_filter_needs_timestamps():
    spec = PreprocessSpec(daylight_filter=DaylightFilter(lat=10.0, lon=0.0))
    with pytest.raises(IngestError, match="timestamps"):
        preprocess(_series([1.0, 2.0]), spec)


def test_daylight_filter_zenith_range():
    with pytest.raises(ValidationError):
        DaylightFilter(lat=0.0, lon=0.0, zenith_max=95.0)


def test_make_windows_counts_and_alignment():
    cfg = WindowConfig(past_len=32, horizon=16)
    assert len(make_windows(_series(np.arange(48.0)), cfg)) == 1
    w = make_windows(_series(np.arange(50.0)), cfg)
    assert len(w) == 3
    assert w.X[1][0] == 1.0
    assert w.Y[1][0] == w.X[1][-1] + 1.0
    assert len(make_windows(_series(np.zeros(20000) + np.arange(20000.0)), cfg)) == 19953


def test_make_windows_stride():
    w = make_windows(_series(np.arange(60.0)), WindowConfig(past_len=4, horizon=2, stride=5))
    assert len(w) == (60 - 6) // 5 + 1
    assert w.starts.tolist() == list(range(0, 55, 5))
    for i, start in enumerate(w.starts):
        np.testing.assert_array_equal(np.concatenate([w.X[i], w.Y[i]]), np.arange(start, start + 6.0))


def test_make_windows_too_short():
    with pytest.raises(IngestError, match="too short"):
        make_windows(_series(np.arange(10.0)), WindowConfig(past_len=8, horizon=4))


def test_split_fractions_and_scaling():
    gen = np.random.default_rng(0)
    s = _series(np.cumsum(gen.standard_normal(104)) + 5.0)
    ds = build_dataset(s, WindowConfig(past_len=3, horizon=2))
    assert len(ds) == 100
    assert (ds.train_end, ds.val_end) == (70, 85)
    X, Y = ds.split("train")
    pooled = np.concatenate([X.ravel(), Y.ravel()])
    assert abs(pooled.mean()) < 1e-10
    assert abs(pooled.std() - 1.0) < 1e-10
    assert np.all(np.diff(ds.starts) > 0)


def test_scaler_ignores_val_and_test_rows():
    gen = np.random.default_rng(1)
    s = _series(gen.standard_normal(300))
    w = make_windows(s, WindowConfig(past_len=5, horizon=3))
    ds = split_and_scale(w)
    truncated = fit_scaler(w.X[: ds.train_end], w.Y[: ds.train_end])
    assert truncated == ds.scaler


def test_alignment_reproduces_source_slice():
    gen = np.random.default_rng(2)
    values = gen.standard_normal(120)
    ds = build_dataset(_series(values), WindowConfig(past_len=5, horizon=4))
    for i in (0, 17, len(ds) - 1):
        row = ds.scaler.inverse_transform(np.concatenate([ds.X[i], ds.Y[i]]))
        start = int(ds.starts[i])
        np.testing.assert_allclose(row, values[start:start + 9], rtol=0, atol=1e-12)


def test_split_and_scale_errors():
    with pytest.raises(IngestError, match="zero variance"):
        build_dataset(_series(np.ones(60)), WindowConfig(past_len=3, horizon=2))
    with pytest.raises(IngestError, match="at least 10"):
        build_dataset(_series(np.arange(12.0)), WindowConfig(past_len=3, horizon=2))


def test_window_config_rejects_zero():
    with pytest.raises(ValidationError):
        WindowConfig(past_len=0)
