import math

import numpy as np
import pytest
from scipy import stats

from backend.core.arrow import ArrowConfig, ArrowReport
from backend.core.errors import InsufficientDataError, ScorecardInputError, ShapeError
from backend.core.evaluation import (
    EvalReport,
    ScorecardThresholds,
    correlation,
    dm_test,
    evaluate_forecasts,
    format_scorecard,
    loss_summary,
    rmse,
    scorecard,
    window_mse,
)


def _reference_dm(d, h):
    """Straight transcription of the DM/HLN formulas, loop by loop."""
    n = len(d)
    mean = sum(d) / n
    gammas = []
    for k in range(h):
        gammas.append(sum((d[t] - mean) * (d[t - k] - mean) for t in range(k, n)) / n)
    lrv = gammas[0] + 2 * sum(gammas[1:])
    dm = mean / math.sqrt(lrv / n)
    return dm * math.sqrt((n + 1 - 2 * h + h * (h - 1) / n) / n)


def test_rmse_trivial_values():
    truth = np.arange(6.0).reshape(3, 2)
    assert rmse(truth, truth)[0] == 0.0
    assert rmse(truth + 2.0, truth)[0] == pytest.approx(2.0, abs=1e-15)


def test_rmse_hand_computation_and_decomposition(rng):
    pred, truth = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    err = pred - truth
    total, per_h = rmse(pred, truth)
    expected = math.sqrt(sum(e * e for e in err.ravel()) / 6)
    assert total == pytest.approx(expected, abs=1e-12)
    assert per_h[1] == pytest.approx(math.sqrt((err[:, 1] ** 2).mean()), abs=1e-12)
    assert total**2 == pytest.approx(float(np.mean(per_h**2)), abs=1e-12)
    np.testing.assert_allclose(window_mse(pred, truth), (err**2).mean(axis=1))


def test_rmse_shape_mismatch():
    with pytest.raises(ShapeError):
        rmse(np.zeros((3, 2)), np.zeros((2, 3)))


def test_dm_identical_losses():
    a = np.linspace(0.0, 1.0, 20)
    res = dm_test(a, a)
    assert (res.stat, res.p) == (0.0, 1.0)


def test_dm_matches_reference_and_t_distribution():
    d = np.random.default_rng(11).normal(0.5, 1.0, 500)
    res = dm_test(d, np.zeros(500), h=1)
    ref = _reference_dm(list(d), 1)
    assert res.stat == pytest.approx(ref, rel=1e-9)
    assert res.p == pytest.approx(2 * stats.t.sf(abs(ref), df=499), rel=1e-9)
    assert res.n == 500


def test_dm_with_lags_matches_reference():
    gen = np.random.default_rng(12)
    e = gen.standard_normal(301)
    d = 0.2 + e[1:] + 0.6 * e[:-1]
    res = dm_test(d, np.zeros(300), h=4)
    assert res.stat == pytest.approx(_reference_dm(list(d), 4), rel=1e-9)


def test_dm_antisymmetry(rng):
    a, b = rng.random(50), rng.random(50)
    ab, ba = dm_test(a, b, h=3), dm_test(b, a, h=3)
    assert ab.stat == pytest.approx(-ba.stat, abs=1e-12)
    assert ab.p == pytest.approx(ba.p, abs=1e-12)


def test_dm_constant_differential_is_degenerate():
    a = np.ones(12)
    res = dm_test(a + 0.5, a)
    assert res.degenerate and res.p == 0.0 and res.stat == math.inf


def test_dm_input_checks():
    with pytest.raises(InsufficientDataError):
        dm_test(np.ones(9), np.zeros(9))
    with pytest.raises(ShapeError):
        dm_test(np.ones(12), np.zeros(11))
    with pytest.raises(ShapeError):
        dm_test(np.random.default_rng(0).random(12), np.zeros(12), h=12)


def test_correlation_signs_and_degenerate_input():
    x = np.arange(10.0)
    assert correlation(x, 2 * x + 1).r == pytest.approx(1.0)
    assert correlation(x, -x).r == pytest.approx(-1.0)
    res = correlation(x, np.ones(10))
    assert res.undefined and math.isnan(res.r)
    with pytest.raises(InsufficientDataError):
        correlation([1.0, 2.0], [2.0, 1.0])


def test_loss_summary():
    s = loss_summary(np.arange(101.0))
    assert s["median"] == 50.0 and s["p10"] == 10.0 and s["range"] == pytest.approx(80.0)


def test_evaluate_forecasts_report(rng):
    truth = rng.standard_normal((40, 3))
    preds = {
        "naive": np.zeros_like(truth),
        "mlp": truth + 0.5 * rng.standard_normal(truth.shape),
        "inv-flow": truth + 0.2 * rng.standard_normal(truth.shape),
        "inv-gauss": truth + 0.3 * rng.standard_normal(truth.shape),
    }
    diag = {"inv-flow": {
        "retro_nll": rng.standard_normal(40), "map_loss_best": rng.random(40), "dispersion": rng.random(40),
    }}
    report = evaluate_forecasts("A", truth, preds, np.arange(100, 140), diag, h=3)
    assert report.sample_count == 40
    assert report.ratio_inv_mlp == pytest.approx(report.rmse["inv-flow"] / report.rmse["mlp"])
    assert report.ratio_inv_mlp < 1.0
    assert report.dm_stat < 0 and 0.0 <= report.dm_p <= 1.0
    assert set(report.dm_tests) == {"naive_vs_mlp", "inv-flow_vs_mlp", "inv-gauss_vs_mlp", "inv-flow_vs_inv-gauss"}
    assert len(report.horizon_rmse["mlp"]) == 3
    assert not report.retro_nll_rmse_corr.undefined
    assert 100 <= report.example_windows["best"] < 140
    assert set(report.map_loss_summary) == {"inv-flow"}


def test_evaluate_forecasts_requires_mlp_and_flow(rng):
    truth = rng.standard_normal((20, 2))
    with pytest.raises(ScorecardInputError, match="inv-flow"):
        evaluate_forecasts("B", truth, {"mlp": truth}, np.arange(20))


def _arrow(verdict, counts=None):
    return ArrowReport(
        scale_results=[], verdict=verdict, delta_arrow=0.0, significant_counts=counts or {}, config=ArrowConfig(),
    )


def _eval(case, ratio, flow=1.0, gauss=1.1, dm_p=1.0):
    return EvalReport(
        case=case, sample_count=256, rmse={"mlp": flow / ratio, "inv-flow": flow, "inv-gauss": gauss},
        ratio_inv_mlp=ratio, dm_p=dm_p,
    )


def _published_run():
    arrows = {"A": _arrow("GO"), "B": _arrow("NOGO"), "C": _arrow("GO"), "D": _arrow("NOGO")}
    evals = {
        "A": _eval("A", 0.93, 1.038, 1.074),
        "B": _eval("B", 1.870),
        "C": _eval("C", 0.81, 0.782, 0.872),
        "D": _eval("D", 1.02),
    }
    return arrows, evals


def test_scorecard_all_pass_on_published_values():
    card = scorecard(*_published_run())
    assert card.all_pass
    assert [card.predictions[k].passed for k in ("P1", "P2", "P3", "P4")] == [True, True, True, True]
    assert card.predictions["E1"].passed is None and card.predictions["E2"].passed is None
    assert card.predictions["P3"].observed["B"] == pytest.approx(1.870)
    assert scorecard(*_published_run()) == card


def test_scorecard_p4_fails_on_high_go_ratio():
    arrows, evals = _published_run()
    evals["A"] = _eval("A", 1.20, 1.038, 1.074)
    card = scorecard(arrows, evals)
    assert card.predictions["P4"].passed is False
    assert not card.all_pass
    assert "FAIL" in format_scorecard(card)


def test_scorecard_thresholds_are_configurable():
    arrows, evals = _published_run()
    card = scorecard(arrows, evals, ScorecardThresholds(p3_min_ratio=1.5))
    assert card.predictions["P3"].passed is False


def test_scorecard_p1_and_missing_inputs():
    arrows, evals = _published_run()
    arrows["B"] = _arrow("GO")
    card = scorecard(arrows, evals)
    assert card.predictions["P1"].passed is False
    del evals["D"]
    with pytest.raises(ScorecardInputError, match="D/eval"):
        scorecard(arrows, evals)
    with pytest.raises(ScorecardInputError):
        scorecard({}, {})


def test_scorecard_without_applicable_cases():
    card = scorecard({"B": _arrow("NOGO")}, {"B": _eval("B", 1.3)})
    assert card.predictions["P2"].passed is None
    assert card.predictions["P4"].passed is None
    assert card.all_pass
    assert "n/a" in format_scorecard(card)


def test_scorecard_reanalysis_checks_pass_with_data():
    arrows, evals = _published_run()
    arrows["ERA5"] = _arrow("GO", {"LEVEL": 0, "DIFF": 3})
    evals["ERA5"] = _eval("ERA5", 1.00)
    arrows["ERA_ssrd"] = _arrow("GO", {"LEVEL": 2, "DIFF": 2})
    evals["ERA_ssrd"] = _eval("ERA_ssrd", 0.823, dm_p=0.0004)
    card = scorecard(arrows, evals)
    assert card.predictions["E1"].passed is True
    assert card.predictions["E1"].observed["ERA_ssrd"]["ratio"] == pytest.approx(0.823)
    assert card.predictions["E2"].passed is True
    assert card.all_pass


def test_scorecard_reanalysis_checks_fail_on_weak_evidence():
    arrows, evals = _published_run()
    arrows["ERA5"] = _arrow("GO", {"LEVEL": 3, "DIFF": 1})
    evals["ERA5"] = _eval("ERA5", 1.00)
    arrows["ERA_ssrd"] = _arrow("GO", {"LEVEL": 2})
    evals["ERA_ssrd"] = _eval("ERA_ssrd", 0.95, dm_p=0.20)
    card = scorecard(arrows, evals)
    assert card.predictions["E1"].passed is False
    # GO through LEVEL alone does not satisfy the wind check
    assert card.predictions["E2"].passed is False
    assert not card.all_pass


def test_evaluate_forecasts_with_too_few_windows(rng):
    truth = rng.standard_normal((6, 3))
    preds = {m: truth + s * rng.standard_normal(truth.shape) for m, s in (("mlp", 0.5), ("inv-flow", 0.1), ("inv-gauss", 0.2))}
    diag = {"inv-flow": {"retro_nll": rng.standard_normal(6), "map_loss_best": rng.random(6), "dispersion": rng.random(6)}}
    report = evaluate_forecasts("A", truth, preds, np.arange(6), diag, h=3)
    assert report.dm_stat is None and report.dm_p == 1.0
    assert all(t.skipped and t.n == 6 for t in report.dm_tests.values())
    assert not report.retro_nll_rmse_corr.undefined

    report = evaluate_forecasts("A", truth[:2], {k: v[:2] for k, v in preds.items()}, [4, 9],
                                {"inv-flow": {k: v[:2] for k, v in diag["inv-flow"].items()}}, h=3)
    assert report.sample_count == 2 and report.dm_tests["inv-flow_vs_mlp"].skipped
    assert report.retro_nll_rmse_corr.undefined
    with pytest.raises(InsufficientDataError):
        evaluate_forecasts("A", truth[:0], {k: v[:0] for k, v in preds.items()}, [])
