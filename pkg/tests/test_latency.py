import numpy as np
import pytest
from hypothesis import given, strategies as st

from amodflow.latency import (FIT_GRID, BprParams, PwaParams, beckmann_term, bpr_derivative,
                              bpr_time, fit_pwa, max_relative_error, pwa_time, slack2, slack3)

UNIT = BprParams(1.0, 1.0)


def test_bpr_values():
    p = BprParams(0.2, 1000.0)
    assert bpr_time(p, 0.0) == pytest.approx(0.2)
    assert bpr_time(p, 1000.0) == pytest.approx(0.2 * 1.15)
    assert bpr_time(p, 2000.0) == pytest.approx(0.2 * (1 + 0.15 * 16))
    with pytest.raises(ValueError):
        bpr_time(p, -1.0)
    with pytest.raises(ValueError):
        BprParams(0.0, 1.0)


@given(st.floats(1e-3, 3.0))
def test_bpr_derivative_matches_finite_difference(x):
    h = 1e-6
    fd = (bpr_time(UNIT, x + h) - bpr_time(UNIT, x - h)) / (2 * h)
    assert bpr_derivative(UNIT, x) == pytest.approx(fd, rel=1e-6, abs=1e-9)


@given(st.floats(0.05, 3.0), st.floats(0.0, 1.9))
def test_beckmann_derivative_is_latency(upper, lower_frac):
    p = BprParams(0.3, 2.0)
    lower = lower_frac * upper / 2
    h = 1e-6 * max(1.0, upper)
    fd = (beckmann_term(p, lower, upper + h) - beckmann_term(p, lower, upper - h)) / (2 * h)
    assert fd == pytest.approx(bpr_time(p, upper), rel=1e-6)


def test_beckmann_rejects_inverted_limits():
    with pytest.raises(ValueError):
        beckmann_term(UNIT, 2.0, 1.0)


@given(st.floats(0, 5), st.floats(0, 2), st.floats(0, 2))
def test_slack3_identity(x, th1, width):
    e1, e2 = slack3(th1, th1 + width, x)
    assert e1 + e2 == pytest.approx(max(0.0, x - th1), abs=1e-12)
    assert 0 <= e1 <= width + 1e-12
    assert e2 == pytest.approx(max(0.0, x - th1 - width), abs=1e-12)
    assert float(slack2(th1, x)) == max(0.0, x - th1)


def test_slack3_rejects_inverted_thresholds():
    with pytest.raises(ValueError):
        slack3(1.0, 0.5, 2.0)


def test_pwa_params_validation():
    with pytest.raises(ValueError):
        PwaParams(0.0, 1.0)
    with pytest.raises(ValueError):
        PwaParams(1.0, 1.0, sigma=2.0)
    with pytest.raises(ValueError):
        PwaParams(1.0, 1.0, 2.0, 0.5)


@pytest.mark.parametrize("n", [2, 3])
def test_fit_anchored_at_free_flow(n):
    p = fit_pwa(UNIT, n)
    assert pwa_time(p, 0.4, 900.0, 0.0) == 0.4
    assert p.n_lines == n


@pytest.mark.parametrize("n", [2, 3])
def test_fitted_surrogate_is_convex_nondecreasing(n):
    p = fit_pwa(UNIT, n)
    x = np.linspace(0, 3, 3001)
    y = pwa_time(p, 1.0, 1.0, x)
    assert np.all(np.diff(y) >= -1e-12)
    assert np.all(np.diff(y, 2) >= -1e-12)


def test_three_lines_beat_two():
    e2 = max_relative_error(fit_pwa(UNIT, 2), UNIT, 1.2)
    e3 = max_relative_error(fit_pwa(UNIT, 3), UNIT, 1.2)
    assert e3 < e2


def test_pinned_equal_thresholds_collapse_to_two_lines():
    th = 0.9
    two = fit_pwa(UNIT, 2, theta1=th)
    three = fit_pwa(UNIT, 3, theta1=th, theta2=th)
    x = np.linspace(0, 3, 1001)
    np.testing.assert_allclose(pwa_time(three, 1.0, 1.0, x), pwa_time(two, 1.0, 1.0, x),
                               atol=1e-9)


def _sse(p, fit_range):
    u = np.linspace(0, fit_range, FIT_GRID)
    return float(np.sum((pwa_time(p, 1.0, 1.0, u) - bpr_time(UNIT, u)) ** 2))


def test_two_line_fit_is_least_squares_optimal():
    # independent oracle: for each threshold the best slope is closed form
    fr = 1.5
    u = np.linspace(0, fr, FIT_GRID)
    r = bpr_time(UNIT, u) - 1.0
    best = np.inf
    for th in np.linspace(0, fr, 3001):
        e = np.maximum(u - th, 0)
        if e @ e == 0:
            continue
        beta = (e @ r) / (e @ e)
        best = min(best, float(np.sum((beta * e - r) ** 2)))
    assert _sse(fit_pwa(UNIT, 2, fr), fr) <= best * (1 + 1e-6)


def test_three_line_fit_beats_coarse_search():
    fr = 1.5
    u = np.linspace(0, fr, FIT_GRID)
    r = bpr_time(UNIT, u) - 1.0
    best = np.inf
    for t1 in np.linspace(0.2, 1.4, 61):
        for t2 in np.linspace(t1, fr, 31):
            e1, e2 = slack3(t1, t2, u)
            M = np.column_stack([e1, e2])
            coef, *_ = np.linalg.lstsq(M, r, rcond=None)
            if coef.min() <= 0 or coef[1] < coef[0]:
                continue
            best = min(best, float(np.sum((M @ coef - r) ** 2)))
    assert _sse(fit_pwa(UNIT, 3, fr), fr) <= best * (1 + 1e-6)


def test_fit_is_deterministic_and_shape_only():
    a = fit_pwa(BprParams(1.0, 1.0), 3)
    b = fit_pwa(BprParams(np.array([0.1, 0.5]), np.array([100.0, 900.0])), 3)
    assert a == b
    with pytest.raises(ValueError):
        fit_pwa(BprParams(1.0, 1.0, np.array([0.1, 0.2])), 3)
