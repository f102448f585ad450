"""Synthetic process generators (Cases A-D).

All generators start from s_0 = 0. Cases A and C discard a 100-step burn-in
so the returned series starts near stationarity; B (a random walk) and D
(a deterministic phase) are returned from t = 0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.signal import lfilter

from .errors import GenerationError
from .rng import exponential, make_rng, open_uniform, standard_normal

logger = logging.getLogger(__name__)

BURN_IN = 100

CASES = ("A", "B", "C", "D")


@dataclass(frozen=True, eq=False)
class TimeSeries:
    values: np.ndarray
    name: str
    source: Literal["synthetic", "file"] = "synthetic"
    seed: Optional[int] = None
    timestamps: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size < 1:
            raise GenerationError(f"series '{self.name}' is empty")
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise GenerationError(f"series '{self.name}' has a non-finite value at index {int(bad[0])}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype="datetime64[ns]")
            if ts.shape != values.shape:
                raise GenerationError(f"series '{self.name}': {ts.size} timestamps for {values.size} values")
            object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return int(self.values.size)


class _Params(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class CaseAParams(_Params):
    alpha: float = 0.7
    gamma_q: float = 0.05
    gamma_c: float = -0.08
    sigma0: float = Field(0.3, ge=0.0)
    sigma1: float = Field(0.35, ge=0.0)


class CaseBParams(_Params):
    sigma: float = Field(0.50, ge=0.0)


class CaseCParams(_Params):
    decay: float = Field(0.95, gt=0.0, lt=1.0)
    p_shot: float = Field(0.04, ge=0.0, le=1.0)
    shot_scale: float = Field(1.5, gt=0.0)
    sigma_obs: float = Field(0.05, ge=0.0)


class CaseDParams(_Params):
    amplitude: float = Field(1.0, gt=0.0)
    period: int = Field(40, ge=2)
    sigma: float = Field(0.50, ge=0.0)


def _check_length(T: int) -> None:
    if T < 1:
        raise GenerationError(f"T must be >= 1, got {T}")


def gen_case_a(T: int, seed: int, params: CaseAParams = CaseAParams()) -> TimeSeries:
    """Dissipative nonlinear AR with state-dependent noise."""
    _check_length(T)
    rng = make_rng(seed, 0)
    eps = standard_normal(rng, T + BURN_IN)
    a, gq, gc = params.alpha, params.gamma_q, params.gamma_c
    s0, s1 = params.sigma0, params.sigma1

    out = np.empty(T + BURN_IN)
    prev = 0.0
    out[0] = prev
    for t in range(1, T + BURN_IN):
        cur = a * math.tanh(prev) + gq * prev * prev + gc * prev * prev * prev + (s0 + s1 * abs(prev)) * eps[t]
        if not math.isfinite(cur):
            raise GenerationError(f"case A diverged: non-finite value at step {t}")
        out[t] = cur
        prev = cur
    return TimeSeries(out[BURN_IN:], name="A", source="synthetic", seed=seed)


def gen_case_b(T: int, seed: int, params: CaseBParams = CaseBParams()) -> TimeSeries:
    """Symmetric Gaussian random walk."""
    _check_length(T)
    rng = make_rng(seed, 1)
    steps = params.sigma * standard_normal(rng, T - 1)
    values = np.concatenate(([0.0], np.cumsum(steps)))
    return TimeSeries(values, name="B", source="synthetic", seed=seed)


def gen_case_c(T: int, seed: int, params: CaseCParams = CaseCParams()) -> TimeSeries:
    """Shot-noise excitation with exponential relaxation, observed in noise."""
    _check_length(T)
    rng = make_rng(seed, 2)
    n = T + BURN_IN
    fire = open_uniform(rng, n) < params.p_shot
    amplitude = exponential(rng, n, mean=params.shot_scale)
    shots = np.where(fire, amplitude, 0.0)
    shots[0] = 0.0
    latent = lfilter([1.0], [1.0, -params.decay], shots)
    noise = standard_normal(rng, T)
    values = latent[BURN_IN:] + params.sigma_obs * noise
    return TimeSeries(values, name="C", source="synthetic", seed=seed)


def gen_case_d(T: int, seed: int, params: CaseDParams = CaseDParams()) -> TimeSeries:
    """Noisy sinusoid."""
    _check_length(T)
    rng = make_rng(seed, 3)
    t = np.arange(T, dtype=np.float64)
    values = params.amplitude * np.sin(2.0 * np.pi * t / params.period) + params.sigma * standard_normal(rng, T)
    return TimeSeries(values, name="D", source="synthetic", seed=seed)


PARAMS = {"A": CaseAParams, "B": CaseBParams, "C": CaseCParams, "D": CaseDParams}

_GENERATORS = {
    "A": (gen_case_a, CaseAParams),
    "B": (gen_case_b, CaseBParams),
    "C": (gen_case_c, CaseCParams),
    "D": (gen_case_d, CaseDParams),
}


def generate_case(case: str, T: int, seed: int, params: Optional[BaseModel] = None) -> TimeSeries:
    key = case.upper()
    if key not in _GENERATORS:
        raise GenerationError(f"unknown case '{case}'; expected one of {', '.join(CASES)}")
    fn, params_cls = _GENERATORS[key]
    params = params if params is not None else params_cls()
    if not isinstance(params, params_cls):
        raise GenerationError(f"case {key} expects {params_cls.__name__}, got {type(params).__name__}")
    logger.info("  [Generate] case %s T=%d seed=%d", key, T, seed)
    return fn(T, seed, params)
