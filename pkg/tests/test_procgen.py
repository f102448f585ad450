import math

import numpy as np
import pytest
from pydantic import ValidationError

from backend.core.errors import GenerationError
from backend.core.procgen import (
    BURN_IN,
    CaseAParams,
    CaseBParams,
    CaseCParams,
    CaseDParams,
    TimeSeries,
    gen_case_a,
    gen_case_b,
    gen_case_c,
    gen_case_d,
    generate_case,
)
from backend.core.rng import exponential, make_rng, open_uniform, standard_normal


def test_case_a_zero_dynamics_is_all_zero():
    """No drift and no noise keeps the process at s_0 = 0."""
    params = CaseAParams(alpha=0, gamma_q=0, gamma_c=0, sigma0=0, sigma1=0)
    series = gen_case_a(5, seed=3, params=params)
    assert series.values.tolist() == [0.0] * 5


def test_case_a_matches_straight_line_recurrence():
    """Independent loop over the same noise stream gives the same variance."""
    T, seed, p = 10000, 42, CaseAParams()
    eps = standard_normal(make_rng(seed, 0), T + BURN_IN)
    s = [0.0]
    for t in range(1, T + BURN_IN):
        x = s[-1]
        s.append(p.alpha * math.tanh(x) + p.gamma_q * x**2 + p.gamma_c * x**3 + (p.sigma0 + p.sigma1 * abs(x)) * eps[t])
    ref = np.array(s[BURN_IN:])
    series = gen_case_a(T, seed, p)
    assert abs(series.values.var() - ref.var()) < 1e-12


def test_generators_are_deterministic():
    for case in "ABCD":
        a = generate_case(case, 500, seed=11)
        b = generate_case(case, 500, seed=11)
        assert a.values.tobytes() == b.values.tobytes()
        c = generate_case(case, 500, seed=12)
        assert not np.array_equal(a.values, c.values)


def test_case_a_divergence_names_step():
    params = CaseAParams(alpha=0, gamma_q=5.0, gamma_c=5.0, sigma0=3.0, sigma1=0)
    with pytest.raises(GenerationError, match="step"):
        gen_case_a(2000, seed=0, params=params)


def test_case_b_zero_sigma_is_constant():
    assert np.all(gen_case_b(50, seed=1, params=CaseBParams(sigma=0)).values == 0.0)


def test_case_b_increments_are_gaussian():
    inc = np.diff(gen_case_b(20000, seed=42).values)
    z = (inc - inc.mean()) / inc.std()
    assert abs(np.mean(z**3)) < 0.05
    assert abs(np.mean(z**4) - 3.0) < 0.1


def test_case_b_reversed_increments_share_histogram():
    inc = np.diff(gen_case_b(1000, seed=5).values)
    assert np.array_equal(np.sort(inc), np.sort(inc[::-1]))


def test_case_c_trivial_and_positive():
    zero = gen_case_c(200, seed=2, params=CaseCParams(p_shot=0.0, sigma_obs=0.0))
    assert np.all(zero.values == 0.0)
    quiet = gen_case_c(5000, seed=2, params=CaseCParams(sigma_obs=0.0))
    assert quiet.values.min() >= 0.0
    assert quiet.values.max() > 0.0


def test_case_c_latent_matches_explicit_recurrence():
    T, seed, p = 500, 5, CaseCParams(sigma_obs=0.0)
    n = T + BURN_IN
    rng = make_rng(seed, 2)
    fire = open_uniform(rng, n) < p.p_shot
    amplitude = exponential(rng, n, mean=p.shot_scale)
    x, latent = 0.0, []
    for t in range(n):
        x = p.decay * x + (amplitude[t] if fire[t] and t > 0 else 0.0)
        latent.append(x)
    np.testing.assert_allclose(gen_case_c(T, seed, p).values, latent[BURN_IN:], rtol=1e-12, atol=1e-12)


def test_case_c_shot_frequency():
    """Shots are the strict increases of the noiseless latent beyond pure decay."""
    T = 20000
    p = CaseCParams(sigma_obs=0.0)
    x = gen_case_c(T, seed=42, params=p).values
    shots = x[1:] - p.decay * x[:-1]
    rate = np.mean(shots > 1e-12)
    se = math.sqrt(0.04 * 0.96 / (T - 1))
    assert abs(rate - 0.04) < 3 * se


def test_case_d_sine_peak_and_periodicity():
    p = CaseDParams(sigma=0.0, amplitude=1.0, period=40)
    s = gen_case_d(400, seed=0, params=p).values
    assert s[10] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(s[40:], s[:-40], atol=1e-12)
    lagged = np.corrcoef(s[:-40], s[40:])[0, 1]
    assert lagged == pytest.approx(1.0, abs=1e-9)


def test_params_reject_invalid_values():
    with pytest.raises(ValidationError):
        CaseCParams(decay=1.0)
    with pytest.raises(ValidationError):
        CaseDParams(period=1)
    with pytest.raises(ValidationError):
        CaseBParams(sigma=-0.1)


def test_generate_case_rejects_unknown_case_and_length():
    with pytest.raises(GenerationError):
        generate_case("E", 10, seed=0)
    with pytest.raises(GenerationError):
        generate_case("A", 0, seed=0)
    with pytest.raises(GenerationError):
        generate_case("A", 10, seed=0, params=CaseBParams())


def test_time_series_rejects_non_finite():
    with pytest.raises(GenerationError, match="index 1"):
        TimeSeries([0.0, float("nan")], name="bad")
