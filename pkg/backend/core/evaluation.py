"""Forecast metrics, the Diebold-Mariano test and the P1-P4 scorecard."""
from __future__ import annotations

import logging
import math
from typing import Dict, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from .arrow import ArrowReport
from .errors import InsufficientDataError, ScorecardInputError, ShapeError

logger = logging.getLogger(__name__)

METHOD_COLUMNS = {"naive": "Naive", "mlp": "MLP", "cvae": "CVAE", "inv-flow": "InvFlow", "inv-gauss": "InvGauss"}
INVERSE_METHODS = ("inv-flow", "inv-gauss")


DM_MIN_WINDOWS = 10
CORR_MIN_POINTS = 3


class DmResult(NamedTuple):
    stat: float
    p: float
    n: int
    degenerate: bool = False


class CorrResult(NamedTuple):
    r: float
    p: float
    undefined: bool = False


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim != 2:
        raise ShapeError(f"expected N x m matrices, got {pred.ndim} dimension(s)")
    return pred, truth


def rmse(pred, truth) -> Tuple[float, np.ndarray]:
    """Global RMSE over all N*m entries, and column-wise (per-horizon) RMSE."""
    pred, truth = _pair(pred, truth)
    sq = (pred - truth) ** 2
    return float(np.sqrt(sq.mean())), np.sqrt(sq.mean(axis=0))


def window_mse(pred, truth) -> np.ndarray:
    """Per-window squared error averaged over the horizon (the DM loss series)."""
    pred, truth = _pair(pred, truth)
    return ((pred - truth) ** 2).mean(axis=1)


def dm_test(loss_a: Sequence[float], loss_b: Sequence[float], h: int = 1) -> DmResult:
    """Two-sided Diebold-Mariano test with the Harvey small-sample correction.

    d_t = loss_a - loss_b; negative statistics favour ``loss_a``.
    """
    a = np.asarray(loss_a, dtype=np.float64)
    b = np.asarray(loss_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"loss series must be 1-D and equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < DM_MIN_WINDOWS:
        raise InsufficientDataError(f"DM test needs at least {DM_MIN_WINDOWS} losses, got {n}")
    if h < 1 or h >= n:
        raise ShapeError(f"DM horizon h={h} out of range for N={n}")

    d = a - b
    mean = float(d.mean())
    dev = d - mean
    gamma0 = float(dev @ dev) / n
    if gamma0 == 0.0:
        if mean == 0.0:
            return DmResult(0.0, 1.0, n)
        logger.warning("  [Eval] DM loss differential is constant (%.4g); reporting p=0", mean)
        return DmResult(math.copysign(math.inf, mean), 0.0, n, degenerate=True)

    lrv = gamma0 + 2.0 * sum(float(dev[k:] @ dev[:-k]) / n for k in range(1, h))
    if lrv <= 0.0:
        logger.warning("  [Eval] non-positive long-run variance at h=%d; using lag-0 variance", h)
        lrv = gamma0
    harvey = math.sqrt((n + 1 - 2 * h + h * (h - 1) / n) / n)
    stat = harvey * mean / math.sqrt(lrv / n)
    p = float(2.0 * stats.t.sf(abs(stat), df=n - 1))
    return DmResult(float(stat), min(p, 1.0), n)


def correlation(x: Sequence[float], y: Sequence[float]) -> CorrResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"correlation needs equal-length 1-D inputs, got {x.shape} and {y.shape}")
    if x.size < CORR_MIN_POINTS:
        raise InsufficientDataError(f"correlation needs at least {CORR_MIN_POINTS} points, got {x.size}")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return CorrResult(math.nan, math.nan, undefined=True)
    r, p = stats.pearsonr(x, y)
    return CorrResult(float(r), float(p))


def loss_summary(losses: Sequence[float]) -> Dict[str, float]:
    v = np.asarray(losses, dtype=np.float64)
    p10, med, p90 = np.percentile(v, [10, 50, 90])
    return {"median": float(med), "p10": float(p10), "p90": float(p90), "range": float(p90 - p10)}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class DmSummary(BaseModel):
    stat: Optional[float]
    p: float = Field(..., ge=0.0, le=1.0)
    n: int
    degenerate: bool = False
    skipped: bool = False


class CorrSummary(BaseModel):
    r: Optional[float] = None
    p: Optional[float] = None
    undefined: bool = False


class EvalReport(BaseModel):
    case: str
    sample_count: int
    rmse: Dict[str, float]
    horizon_rmse: Dict[str, List[float]] = {}
    ratio_inv_mlp: float
    dm_stat: Optional[float] = None
    dm_p: float = Field(1.0, ge=0.0, le=1.0)
    dm_tests: Dict[str, DmSummary] = {}
    retro_nll_rmse_corr: CorrSummary = CorrSummary(undefined=True)
    map_loss_summary: Dict[str, Dict[str, float]] = {}
    mean_dispersion: Dict[str, float] = {}
    example_windows: Dict[str, int] = {}


def _dm_summary(loss_a: np.ndarray, loss_b: np.ndarray, h: int) -> DmSummary:
    """DM summary; too few windows give a skipped test (no statistic, p = 1)."""
    if loss_a.size < DM_MIN_WINDOWS:
        return DmSummary(stat=None, p=1.0, n=int(loss_a.size), skipped=True)
    res = dm_test(loss_a, loss_b, h)
    stat = res.stat if math.isfinite(res.stat) else None
    return DmSummary(stat=stat, p=res.p, n=res.n, degenerate=res.degenerate)


def evaluate_forecasts(
    case: str,
    truth: np.ndarray,
    predictions: Mapping[str, np.ndarray],
    window_index: Sequence[int],
    diagnostics: Optional[Mapping[str, Mapping[str, np.ndarray]]] = None,
    h: int = 1,
) -> EvalReport:
    """Aggregate metrics for one case.

    ``predictions`` maps method name to an N x m matrix aligned with
    ``truth``. ``diagnostics`` maps an inverse method to per-window arrays
    ``map_loss_best``, ``dispersion`` and ``retro_nll``. Below
    ``DM_MIN_WINDOWS`` windows the DM tests are reported as skipped (p = 1).
    """
    for needed in ("mlp", "inv-flow"):
        if needed not in predictions:
            raise ScorecardInputError(f"case {case}: missing predictions for '{needed}'")
    diagnostics = diagnostics or {}
    truth = np.asarray(truth, dtype=np.float64)
    window_index = np.asarray(window_index)
    if truth.ndim != 2 or truth.shape[0] == 0:
        raise InsufficientDataError(f"case {case}: no forecast windows to evaluate")

    scores, curves, losses = {}, {}, {}
    for method in sorted(predictions):
        g, per_h = rmse(predictions[method], truth)
        scores[method], curves[method] = g, per_h.tolist()
        losses[method] = window_mse(predictions[method], truth)

    ratio = scores["inv-flow"] / scores["mlp"] if scores["mlp"] > 0 else math.inf
    n = truth.shape[0]
    if n < DM_MIN_WINDOWS:
        logger.warning("  [Eval] %s: %d windows, fewer than %d; DM tests skipped", case, n, DM_MIN_WINDOWS)
    h = max(1, min(h, n - 1))
    dm_tests = {
        f"{method}_vs_mlp": _dm_summary(losses[method], losses["mlp"], h)
        for method in sorted(losses) if method != "mlp"
    }
    if "inv-gauss" in losses:
        dm_tests["inv-flow_vs_inv-gauss"] = _dm_summary(losses["inv-flow"], losses["inv-gauss"], h)
    main = dm_tests["inv-flow_vs_mlp"]

    corr = CorrSummary(undefined=True)
    flow_diag = diagnostics.get("inv-flow")
    if flow_diag is not None and n >= CORR_MIN_POINTS:
        res = correlation(flow_diag["retro_nll"], np.sqrt(losses["inv-flow"]))
        corr = CorrSummary(
            r=None if res.undefined else res.r, p=None if res.undefined else res.p, undefined=res.undefined,
        )

    per_window = np.sqrt(losses["inv-flow"])
    order = np.argsort(per_window, kind="stable")
    examples = {
        "best": int(window_index[order[0]]),
        "median": int(window_index[order[len(order) // 2]]),
        "worst": int(window_index[order[-1]]),
    }

    report = EvalReport(
        case=case,
        sample_count=int(truth.shape[0]),
        rmse=scores,
        horizon_rmse=curves,
        ratio_inv_mlp=ratio,
        dm_stat=main.stat,
        dm_p=main.p,
        dm_tests=dm_tests,
        retro_nll_rmse_corr=corr,
        map_loss_summary={m: loss_summary(d["map_loss_best"]) for m, d in sorted(diagnostics.items())},
        mean_dispersion={m: float(np.mean(d["dispersion"])) for m, d in sorted(diagnostics.items())},
        example_windows=examples,
    )
    logger.info(
        "  [Eval] %s: MLP %.3f InvFlow %.3f ratio %.3f DM %s p=%.3g (N=%d)",
        case, scores["mlp"], scores["inv-flow"], ratio,
        "n/a" if main.stat is None else f"{main.stat:.2f}", main.p, report.sample_count,
    )
    return report


# ---------------------------------------------------------------------------
# Scorecard
# ---------------------------------------------------------------------------

Verdict = Literal["GO", "NOGO"]


class ScorecardThresholds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    expected_verdicts: Dict[str, Verdict] = {
        "A": "GO", "B": "NOGO", "C": "GO", "D": "NOGO", "ERA5": "GO", "ERA_ssrd": "GO",
    }
    synthetic_cases: Tuple[str, ...] = ("A", "B", "C", "D")
    p3_min_ratio: float = 0.95
    p4_max_ratio: float = 1.05
    solar_case: str = "ERA_ssrd"
    solar_max_ratio: float = 1.0
    solar_max_p: float = 0.05
    wind_case: str = "ERA5"
    wind_representation: str = "DIFF"


class Prediction(BaseModel):
    passed: Optional[bool]
    observed: Dict[str, object]
    criterion: str


class Scorecard(BaseModel):
    cases: List[str]
    predictions: Dict[str, Prediction]
    thresholds: ScorecardThresholds

    @property
    def all_pass(self) -> bool:
        return all(p.passed is not False for p in self.predictions.values())


def _all(values: Sequence[bool]) -> Optional[bool]:
    return bool(all(values)) if values else None


def scorecard(
    arrow_reports: Mapping[str, ArrowReport],
    eval_reports: Mapping[str, EvalReport],
    thresholds: ScorecardThresholds = ScorecardThresholds(),
) -> Scorecard:
    cases = sorted(set(arrow_reports) | set(eval_reports))
    if not cases:
        raise ScorecardInputError("no cases to score")
    missing = [f"{c}/arrow" for c in cases if c not in arrow_reports] + [f"{c}/eval" for c in cases if c not in eval_reports]
    missing += [f"{c}/expected verdict" for c in cases if c not in thresholds.expected_verdicts]
    if missing:
        raise ScorecardInputError(f"scorecard inputs missing: {', '.join(missing)}")

    verdicts = {c: arrow_reports[c].verdict for c in cases}
    go = [c for c in cases if verdicts[c] == "GO"]
    nogo = [c for c in cases if verdicts[c] == "NOGO"]

    p1 = Prediction(
        passed=all(verdicts[c] == thresholds.expected_verdicts[c] for c in cases),
        observed={c: f"{verdicts[c]} (expected {thresholds.expected_verdicts[c]})" for c in cases},
        criterion="arrow verdict matches the expected GO/NOGO label for every case",
    )

    p2_cases = [c for c in go if c in thresholds.synthetic_cases]
    lacking = [c for c in p2_cases if "inv-gauss" not in eval_reports[c].rmse]
    if lacking:
        raise ScorecardInputError(f"scorecard inputs missing: {', '.join(f'{c}/inv-gauss' for c in lacking)}")
    p2_obs = {c: {"inv-flow": eval_reports[c].rmse["inv-flow"], "inv-gauss": eval_reports[c].rmse["inv-gauss"]} for c in p2_cases}
    p2 = Prediction(
        passed=_all([v["inv-flow"] < v["inv-gauss"] for v in p2_obs.values()]),
        observed=p2_obs,
        criterion="RMSE(inv-flow) < RMSE(inv-gauss) on GO synthetic cases",
    )

    p3 = Prediction(
        passed=_all([eval_reports[c].ratio_inv_mlp >= thresholds.p3_min_ratio for c in nogo]),
        observed={c: eval_reports[c].ratio_inv_mlp for c in nogo},
        criterion=f"RMSE ratio inv-flow/MLP >= {thresholds.p3_min_ratio} on NOGO cases",
    )
    p4 = Prediction(
        passed=_all([eval_reports[c].ratio_inv_mlp <= thresholds.p4_max_ratio for c in go]),
        observed={c: eval_reports[c].ratio_inv_mlp for c in go},
        criterion=f"RMSE ratio inv-flow/MLP <= {thresholds.p4_max_ratio} on GO cases",
    )
    predictions = {"P1": p1, "P2": p2, "P3": p3, "P4": p4, **_reanalysis_checks(arrow_reports, eval_reports, thresholds)}
    return Scorecard(cases=cases, predictions=predictions, thresholds=thresholds)


def _reanalysis_checks(
    arrow_reports: Mapping[str, ArrowReport],
    eval_reports: Mapping[str, EvalReport],
    thresholds: ScorecardThresholds,
) -> Dict[str, Prediction]:
    """Checks on user-supplied reanalysis cases; passed=None when a case is absent."""
    solar, wind = thresholds.solar_case, thresholds.wind_case
    e1 = Prediction(
        passed=None,
        observed={},
        criterion=(
            f"{solar}: ratio inv-flow/MLP < {thresholds.solar_max_ratio} "
            f"with DM p < {thresholds.solar_max_p} (skipped without data)"
        ),
    )
    if solar in eval_reports:
        report = eval_reports[solar]
        e1.observed = {solar: {"ratio": report.ratio_inv_mlp, "dm_p": report.dm_p}}
        e1.passed = report.ratio_inv_mlp < thresholds.solar_max_ratio and report.dm_p < thresholds.solar_max_p

    rep = thresholds.wind_representation
    e2 = Prediction(
        passed=None,
        observed={},
        criterion=f"{wind}: GO through the {rep} representation (skipped without data)",
    )
    if wind in arrow_reports:
        report = arrow_reports[wind]
        count = report.significant_counts.get(rep, 0)
        e2.observed = {wind: f"{report.verdict}, {rep} significant at {count} scale(s)"}
        e2.passed = report.verdict == "GO" and count >= report.config.c_min
    return {"E1": e1, "E2": e2}


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    if isinstance(value, dict):
        return " ".join(f"{k}={_fmt(v)}" for k, v in value.items())
    return str(value)


def format_scorecard(card: Scorecard) -> str:
    lines = [f"{'Pred':<5} {'Result':<8} Observed", "-" * 72]
    for name, pred in card.predictions.items():
        mark = "n/a" if pred.passed is None else ("✅ PASS" if pred.passed else "❌ FAIL")
        observed = "; ".join(f"{c}: {_fmt(v)}" for c, v in pred.observed.items()) or "(no applicable cases)"
        lines.append(f"{name:<5} {mark:<8} {observed}")
        lines.append(f"{'':<14} {pred.criterion}")
    lines.append("-" * 72)
    lines.append("All predictions pass ✅" if card.all_pass else "Some predictions fail ❌")
    return "\n".join(lines)
