"""Regression calibration: conditional-moment algebra, delegation to the
frequentist fitters, shrinkage properties, and bootstrap percentile intervals."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecal.calibration import (
    CalibrationModel,
    bootstrap_rc,
    fit_calibration_simple,
    fit_rc,
    naive_fit,
    percentile_interval,
    predict_conditional_x,
    shrinkage_factor,
)
from mecal.dataset import OutcomeSpec, make_dataset
from mecal.fitters import FitError, InsufficientDataError, MixedModelFit, fit_ols
from mecal.simulate import Scenario, generate_dataset

from .conftest import simple_linear_dataset


def _manual_model(gamma0, gamma_z, s2x, s2u, nu=None, include_shift=False):
    mixed = MixedModelFit(
        gamma0=gamma0,
        gamma_z=np.asarray(gamma_z, dtype=float),
        sigma2_x_given_z=s2x,
        sigma2_u=s2u,
        nu=nu,
        loglik=0.0,
        gamma_cov=np.eye(1 + len(gamma_z)),
        at_boundary=False,
        n_replicated=5,
    )
    return CalibrationModel(form="efficient", mixed=mixed, include_shift=include_shift)


# ---------------------------------------------------------------------------
# Conditional-moment unit suite: hand substitutions, exact to 1e-12
# ---------------------------------------------------------------------------


def test_conditional_x_zero_error_variance():
    # s2u = 0 collapses to the measurement mean with zero variance.
    m = _manual_model(0.7, [0.3], s2x=1.3, s2u=0.0)
    d = make_dataset(
        w1=np.array([2.0, -1.0]),
        w2=np.array([4.0, np.nan]),
        z=np.array([[1.0], [0.0]]),
        y=np.zeros(2),
    )
    mean, var = predict_conditional_x(m, d)
    assert mean == pytest.approx([3.0, -1.0], abs=1e-12)
    assert var == pytest.approx([0.0, 0.0], abs=1e-12)


def test_conditional_x_single_measurement_unit_variances():
    # gamma0 = 0, p = 0, s2x = s2u = 1, N = 1, Wbar = 2: mean 1.0, var 0.5.
    m = _manual_model(0.0, [], s2x=1.0, s2u=1.0)
    d = make_dataset(w1=np.array([2.0]), y=np.zeros(1))
    mean, var = predict_conditional_x(m, d)
    assert mean[0] == pytest.approx(1.0, abs=1e-12)
    assert var[0] == pytest.approx(0.5, abs=1e-12)


def test_conditional_x_two_measurements_unit_variances():
    # Same setting with N = 2: lambda = 1/1.5, mean 4/3, var 1/3.
    m = _manual_model(0.0, [], s2x=1.0, s2u=1.0)
    d = make_dataset(w1=np.array([2.0]), w2=np.array([2.0]), y=np.zeros(1))
    mean, var = predict_conditional_x(m, d)
    assert mean[0] == pytest.approx(4.0 / 3.0, abs=1e-12)
    assert var[0] == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_conditional_x_with_covariate_single():
    # pred = 0.5 + 2*3 = 6.5, lambda = 2/2.5, Wbar = 7: mean 6.9, var 0.4.
    m = _manual_model(0.5, [2.0], s2x=2.0, s2u=0.5)
    d = make_dataset(w1=np.array([7.0]), z=np.array([[3.0]]), y=np.zeros(1))
    mean, var = predict_conditional_x(m, d)
    assert mean[0] == pytest.approx(6.9, abs=1e-12)
    assert var[0] == pytest.approx(0.4, abs=1e-12)


def test_conditional_x_with_covariate_pair():
    # Same setting, N = 2: lambda = 2/2.25 = 8/9, Wbar = 7.
    m = _manual_model(0.5, [2.0], s2x=2.0, s2u=0.5)
    d = make_dataset(w1=np.array([7.0]), w2=np.array([7.0]), z=np.array([[3.0]]), y=np.zeros(1))
    mean, var = predict_conditional_x(m, d)
    assert mean[0] == pytest.approx(6.5 + (8.0 / 9.0) * 0.5, abs=1e-12)
    assert var[0] == pytest.approx(2.0 * (1.0 - 8.0 / 9.0), abs=1e-12)


def test_conditional_x_shift_adjusts_second_measurement():
    m = _manual_model(0.0, [], s2x=1.0, s2u=1.0, nu=2.0, include_shift=True)
    d = make_dataset(w1=np.array([1.0]), w2=np.array([5.0]), y=np.zeros(1))
    mean, _ = predict_conditional_x(m, d)
    # Shift-adjusted Wbar = (1 + (5 - 2)) / 2 = 2, lambda = 1/1.5.
    assert mean[0] == pytest.approx(2.0 / 1.5, abs=1e-12)


def test_conditional_x_requires_measurements_for_efficient_form():
    m = _manual_model(0.0, [], s2x=1.0, s2u=1.0)
    d = make_dataset(w1=np.array([np.nan, 1.0]), w2=np.array([np.nan, np.nan]), y=np.zeros(2))
    with pytest.raises(FitError, match="row 0"):
        predict_conditional_x(m, d)


@settings(max_examples=100, deadline=None)
@given(
    s2x=st.floats(min_value=1e-3, max_value=1e3),
    s2u=st.floats(min_value=0.0, max_value=1e3),
)
def test_shrinkage_monotone_in_replicates(s2x, s2u):
    lam = shrinkage_factor(s2x, s2u, np.array([1, 2]))
    assert 0.0 <= lam[0] <= lam[1] <= 1.0
    # Strict once the error variance is resolvable at float precision.
    if s2u > s2x * 1e-12:
        assert lam[1] > lam[0]


# ---------------------------------------------------------------------------
# Calibration-stage fitting
# ---------------------------------------------------------------------------


def test_simple_calibration_identity_when_w2_equals_w1():
    rng = np.random.default_rng(0)
    w1 = rng.standard_normal(10)
    z = rng.standard_normal(10)
    d = make_dataset(w1=w1, w2=w1.copy(), z=z, y=np.zeros(10))
    m = fit_calibration_simple(d)
    assert m.coef == pytest.approx([0.0, 1.0, 0.0], abs=1e-10)


def test_simple_calibration_attenuation_slope():
    # p = 0, reliability 0.5: slope of W2 on W1 tends to 0.5.
    rng = np.random.default_rng(1)
    n = 200_000
    x = rng.standard_normal(n)
    w1 = x + rng.standard_normal(n)
    w2 = x + rng.standard_normal(n)
    d = make_dataset(w1=w1, w2=w2, y=np.zeros(n))
    m = fit_calibration_simple(d)
    assert m.coef[1] == pytest.approx(0.5, abs=0.01)


def test_simple_calibration_delegates_to_ols():
    d = simple_linear_dataset(n=10, seed=4, replicated=0.6)
    m = fit_calibration_simple(d)
    both = d.w_observed.all(axis=1)
    design = np.column_stack([np.ones(int(both.sum())), d.w[both, 0], d.z[both]])
    oracle = fit_ols(design, d.w[both, 1])
    np.testing.assert_array_equal(m.coef, oracle.coef)


def test_simple_calibration_needs_three_replicates():
    d = make_dataset(
        w1=np.array([1.0, 2.0, 3.0, 4.0]),
        w2=np.array([1.1, 2.1, np.nan, np.nan]),
        y=np.zeros(4),
    )
    with pytest.raises(InsufficientDataError):
        fit_calibration_simple(d)


# ---------------------------------------------------------------------------
# RC end-to-end behaviour
# ---------------------------------------------------------------------------


def test_zero_error_collapse_rc_equals_naive_on_wbar():
    # Identical replicate pairs force sigma2_u = 0; efficient RC must then
    # equal the outcome fit on the measurement mean exactly.
    rng = np.random.default_rng(8)
    n = 40
    x = rng.standard_normal(n)
    z = rng.standard_normal(n)
    w2 = np.full(n, np.nan)
    w2[:10] = x[:10]
    y = 1.0 + x + 0.5 * z + rng.standard_normal(n) * 0.3
    d = make_dataset(w1=x, w2=w2, z=z, y=y)
    spec = OutcomeSpec(kind="linear")

    rc = fit_rc(d, spec, form="efficient")
    oracle = fit_ols(np.column_stack([np.ones(n), d.w_bar(), z]), y)
    flat = rc.flat_estimates()
    assert flat["beta_x"] == pytest.approx(oracle.coef[1], abs=1e-10)
    assert flat["beta0"] == pytest.approx(oracle.coef[0], abs=1e-10)
    assert flat["sigma2_u"] == 0.0


@pytest.mark.slow
def test_rc_linear_consistency_large_sample():
    sc = Scenario(kind="linear", reliability=0.7, r_squared=0.5, n=100_000, seed=44)
    d = generate_dataset(sc, 0)
    rc = fit_rc(d, OutcomeSpec(kind="linear"), form="efficient")
    # 3 x the MC standard error of a single n = 100,000 fit.
    assert abs(rc.flat_estimates()["beta_x"] - 1.0) < 3 * 0.009


def test_rc_simple_works_on_all_outcomes(linear_data):
    res = fit_rc(linear_data, OutcomeSpec(kind="linear"), form="simple")
    assert res.method == "rc-simple"
    assert np.isfinite(res.flat_estimates()["beta_x"])


def test_naive_fit_reports_wald_intervals(linear_data):
    res = naive_fit(linear_data, OutcomeSpec(kind="linear"))
    lo, hi = res.intervals["beta_x"]
    assert lo < res.flat_estimates()["beta_x"] < hi


# ---------------------------------------------------------------------------
# Bootstrap percentile intervals
# ---------------------------------------------------------------------------


def test_percentile_interval_matches_sort_oracle():
    rng = np.random.default_rng(12)
    vals = rng.standard_normal(2000)
    lo, hi = percentile_interval(vals, 0.95)
    s = np.sort(vals)
    # ceil(0.025 * 2000) = 50 -> index 49; ceil(0.975 * 2000) = 1950 -> 1949.
    assert lo == s[49]
    assert hi == s[1949]
    assert lo in vals and hi in vals


def test_percentile_interval_small_vector_convention():
    vals = np.arange(1.0, 101.0)
    lo, hi = percentile_interval(vals, 0.95)
    assert (lo, hi) == (3.0, 98.0)


def test_bootstrap_default_replicate_count():
    import inspect

    assert inspect.signature(bootstrap_rc).parameters["b"].default == 2000


def test_bootstrap_zero_width_on_degenerate_data():
    rng = np.random.default_rng(3)
    n = 50
    x = rng.standard_normal(n)
    d = make_dataset(w1=x, w2=x.copy(), y=2.0 * x)
    res = bootstrap_rc(d, OutcomeSpec(kind="linear"), form="simple", b=120, seed=9)
    lo, hi = res.intervals["beta_x"]
    assert lo == pytest.approx(2.0, abs=1e-9)
    assert hi == pytest.approx(2.0, abs=1e-9)


def test_bootstrap_interval_endpoints_are_replicate_order_statistics():
    d = simple_linear_dataset(n=60, seed=10, replicated=0.4)
    spec = OutcomeSpec(kind="linear")
    res = bootstrap_rc(d, spec, b=150, seed=21)
    # Recompute replicate estimates independently and check membership.
    values = []
    for rep in range(150):
        rng = np.random.default_rng([21, rep])
        idx = rng.integers(0, d.n, size=d.n)
        sub = make_dataset(
            w1=np.where(d.w_observed[idx, 0], d.w[idx, 0], np.nan),
            w2=np.where(d.w_observed[idx, 1], d.w[idx, 1], np.nan),
            z=d.z[idx],
            y=d.y[idx],
        )
        try:
            values.append(fit_rc(sub, spec).flat_estimates()["beta_x"])
        except FitError:
            pass
    lo, hi = res.intervals["beta_x"]
    assert any(np.isclose(lo, values, rtol=0, atol=0))
    assert any(np.isclose(hi, values, rtol=0, atol=0))
    s = np.sort(values)
    assert lo == s[int(np.ceil(0.025 * len(values))) - 1]
    assert hi == s[int(np.ceil(0.975 * len(values))) - 1]


def test_bootstrap_requires_hundred_replicates(linear_data):
    with pytest.raises(ValueError):
        bootstrap_rc(linear_data, OutcomeSpec(kind="linear"), b=50)


def test_bootstrap_failure_rate_error():
    # Only 3 replicated individuals: resampling drops below the calibration
    # minimum often enough to trip the failure-rate guard.
    rng = np.random.default_rng(5)
    n = 12
    x = rng.standard_normal(n)
    w2 = np.full(n, np.nan)
    w2[:3] = x[:3] + rng.standard_normal(3) * 0.1
    d = make_dataset(w1=x, w2=w2, y=x + rng.standard_normal(n))
    with pytest.raises(FitError, match="failure rate"):
        bootstrap_rc(d, OutcomeSpec(kind="linear"), form="simple", b=150, seed=2)
