import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficbench import baselines


def test_historical_average_examples():
    period = 4
    hist = np.zeros(12)
    hist[1], hist[5] = 10.0, 20.0
    assert baselines.historical_average(hist, 9, 0, period) == 15.0
    hist = np.zeros(8)
    hist[2] = 7.0
    assert baselines.historical_average(hist, 6, 0, period) == 7.0


def test_historical_average_not_applicable_on_single_day():
    day = np.ones((1440, 3, 1))
    with pytest.raises(baselines.NotApplicable):
        baselines.historical_average(day, 1000, 1, 10080)
    with pytest.raises(baselines.NotApplicable):
        baselines.historical_average_windows(day, [900], 12, 12, 10080)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_windowed_average_matches_pointwise(seed, period):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0, 100, size=(6 * period, 2, 1))
    p, H = 2, 2
    starts = np.arange(period, 6 * period - p - H)
    out = baselines.historical_average_windows(vals, starts, p, H, period)
    for s_i, s in enumerate(starts):
        for j in range(H):
            for n in range(2):
                assert out[s_i, j, n] == pytest.approx(baselines.historical_average(vals, s + p + j, n, period))


def test_ari_constant_series():
    x = np.full(30, 4.2)
    m = baselines.fit_ari(x, 1, 0)
    np.testing.assert_allclose(baselines.predict_ari(m, x, 3), 4.2, atol=1e-9)
    np.testing.assert_allclose(baselines.predict_ari(m, x, 1), [4.2], atol=1e-9)


def test_ari_ramp():
    x = np.arange(1.0, 41.0)
    m = baselines.fit_ari(x, 1, 1)
    pred = baselines.predict_ari(m, x, 5)
    np.testing.assert_allclose(pred, 41.0 + np.arange(5), atol=1e-6)


def test_ari_white_noise():
    rng = np.random.default_rng(0)
    x = 5.0 + rng.standard_normal(5000)
    m = baselines.fit_ari(x, 1, 0)
    assert abs(m.coef[0]) < 0.05
    assert baselines.predict_ari(m, x, 1)[0] == pytest.approx(x.mean(), abs=0.1)


def test_ari_h_zero_and_short_history():
    m = baselines.fit_ari(np.arange(10.0), 2, 1)
    assert baselines.predict_ari(m, np.arange(10.0), 0).shape == (0,)
    with pytest.raises(ValueError):
        baselines.predict_ari(m, [1.0, 2.0], 3)
    with pytest.raises(ValueError):
        baselines.fit_ari(np.arange(3.0), 3, 0)
    with pytest.raises(ValueError):
        baselines.fit_ari(np.arange(30.0), 1, 3)


def test_ari_singular_falls_back_to_ridge(caplog):
    x = np.full(20, 3.0)
    with caplog.at_level(logging.WARNING):
        m = baselines.fit_ari(x, 3, 0)
    assert "ridge" in caplog.text
    assert np.all(np.isfinite(m.coef))
    np.testing.assert_allclose(baselines.predict_ari(m, x, 2), 3.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.3, -0.5, 0.8]))
def test_ari_recovers_ar1(seed, phi):
    rng = np.random.default_rng(seed)
    x = np.zeros(4000)
    for t in range(1, len(x)):
        x[t] = 1.0 + phi * x[t - 1] + rng.standard_normal()
    m = baselines.fit_ari(x, 1, 0)
    assert m.coef[0] == pytest.approx(phi, abs=0.06)
    res = baselines.ari_insample_residuals(m, x)
    assert abs(res.mean()) < 1e-9


def test_ari_param_count():
    assert baselines.fit_ari(np.arange(50.0), 4, 1).param_count == 5
