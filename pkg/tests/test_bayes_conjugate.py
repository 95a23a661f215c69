"""Quadrature/enumeration oracles for every closed-form full conditional in
the Gibbs sampler: latent covariate (linear outcome), coefficient blocks,
precisions, exam shift, Gamma-process hazard increments, and the two-point
binary-covariate imputation.  Each check compares empirical draw moments
against numerical integration of the unnormalized conditional density."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from mecal.bayes.config import MCMCConfig, PriorConfig
from mecal.bayes.sampler import (
    _ChainState,
    _Workspace,
    _impute_z,
    _update_beta_linear,
    _update_dh0,
    _update_gamma,
    _update_nu,
    _update_sigma2_linear,
    _update_sigma2_u,
    _update_sigma2_x,
    _update_x,
    gamma_process_posterior_params,
    run_mcmc,
)
from mecal.calibration import predict_conditional_x, CalibrationModel
from mecal.dataset import OutcomeSpec, make_dataset
from mecal.fitters import MixedModelFit


def make_ws(d, kind="linear", priors=None, include_shift=False, fixed_su=None, fixed_shape=None):
    spec = OutcomeSpec(kind=kind, fixed_shape=fixed_shape)
    return _Workspace(d, spec, priors or PriorConfig(), include_shift, fixed_su)


def make_state(ws, *, beta, gamma, sigma2_x=1.0, sigma2_u=1.0, sigma2=1.0, x=None, nu=0.0, seed=0, alphas=None, dh0=None, log_r=0.0):
    st = _ChainState(
        rng=np.random.default_rng(seed),
        x=np.zeros(ws.n) if x is None else np.asarray(x, dtype=float).copy(),
        z=ws.d.z.copy(),
        beta=np.asarray(beta, dtype=float).copy(),
        gamma=np.asarray(gamma, dtype=float).copy(),
        sigma2_x=sigma2_x,
        sigma2_u=sigma2_u,
        sigma2=sigma2,
        nu=nu,
        log_r=log_r,
        alphas=alphas or {},
    )
    st.adapting = False
    st.scales = {"x": 1.0, "beta": 1.0, "log_r": 0.3}
    if dh0 is not None:
        st.dh0 = np.asarray(dh0, dtype=float).copy()
        cum = np.concatenate([[0.0], np.cumsum(st.dh0)])
        st.h0cum = cum[ws.h0_idx]
    return st


def _quad_moments(grid, log_density):
    logd = log_density - log_density.max()
    dens = np.exp(logd)
    total = np.trapezoid(dens, grid)
    mean = np.trapezoid(grid * dens, grid) / total
    var = np.trapezoid((grid - mean) ** 2 * dens, grid) / total
    return mean, np.sqrt(var)


# ---------------------------------------------------------------------------
# Latent covariate: exact conjugate draw under a linear outcome
# ---------------------------------------------------------------------------


def _replicated_individual(n, y, w1, w2, z):
    return make_dataset(
        w1=np.full(n, w1),
        w2=np.full(n, w2) if w2 is not None else None,
        z=np.full((n, 1), z),
        y=np.full(n, y),
    )


def test_latent_x_conditional_matches_quadrature():
    n = 250
    d = _replicated_individual(n, y=2.0, w1=1.4, w2=0.9, z=0.5)
    ws = make_ws(d)
    beta = np.array([0.3, 0.8, -0.4])
    gamma = np.array([0.1, 0.7])
    st = make_state(ws, beta=beta, gamma=gamma, sigma2_x=0.9, sigma2_u=0.5, sigma2=0.6, x=np.zeros(n))

    draws = []
    for _ in range(700):
        _update_x(ws, st)
        draws.append(st.x.copy())
    draws = np.concatenate(draws)

    grid = np.linspace(-6, 8, 20001)
    mu_out = 2.0 - 0.3 - (-0.4) * 0.5
    logd = (
        -0.5 * (mu_out - 0.8 * grid) ** 2 / 0.6
        - 0.5 * ((1.4 - grid) ** 2 + (0.9 - grid) ** 2) / 0.5
        - 0.5 * (grid - (0.1 + 0.7 * 0.5)) ** 2 / 0.9
    )
    mean_q, sd_q = _quad_moments(grid, logd)
    assert draws.mean() == pytest.approx(mean_q, abs=0.01 * sd_q)
    assert draws.std(ddof=1) == pytest.approx(sd_q, rel=0.01)


def test_latent_x_with_zero_effect_reduces_to_conditional_moments():
    # beta_x = 0: the outcome factor vanishes and the draw distribution is
    # exactly the normal conditional given (W, Z).
    n = 400
    d = _replicated_individual(n, y=5.0, w1=2.0, w2=None, z=1.0)
    ws = make_ws(d)
    st = make_state(ws, beta=[0.3, 0.0, 0.2], gamma=[0.5, 0.25], sigma2_x=1.2, sigma2_u=0.8, sigma2=0.7, x=np.zeros(n))
    draws = []
    for _ in range(400):
        _update_x(ws, st)
        draws.append(st.x.copy())
    draws = np.concatenate(draws)

    mixed = MixedModelFit(
        gamma0=0.5, gamma_z=np.array([0.25]), sigma2_x_given_z=1.2, sigma2_u=0.8,
        nu=None, loglik=0.0, gamma_cov=np.eye(2), at_boundary=False, n_replicated=1,
    )
    mean, var = predict_conditional_x(CalibrationModel(form="efficient", mixed=mixed), d)
    assert draws.mean() == pytest.approx(mean[0], abs=0.01 * np.sqrt(var[0]))
    assert draws.std(ddof=1) == pytest.approx(np.sqrt(var[0]), rel=0.01)


def test_latent_x_without_measurements_drops_measurement_factor():
    # N_i = 0: conditional precision is beta_x^2/sigma2 + 1/sigma2_x.
    n = 400
    d = make_dataset(w1=np.full(n, np.nan), y=np.full(n, 1.5))
    ws = make_ws(d)
    st = make_state(ws, beta=[0.2, 0.9], gamma=[0.3], sigma2_x=1.1, sigma2_u=0.6, sigma2=0.8, x=np.zeros(n))
    draws = []
    for _ in range(400):
        _update_x(ws, st)
        draws.append(st.x.copy())
    draws = np.concatenate(draws)
    prec = 0.9**2 / 0.8 + 1.0 / 1.1
    mean = (0.9 * (1.5 - 0.2) / 0.8 + 0.3 / 1.1) / prec
    assert draws.std(ddof=1) == pytest.approx(1.0 / np.sqrt(prec), rel=0.01)
    assert draws.mean() == pytest.approx(mean, abs=0.01 / np.sqrt(prec))


# ---------------------------------------------------------------------------
# Linear-model coefficient block and residual precision
# ---------------------------------------------------------------------------


def test_linear_beta_block_matches_quadrature():
    rng = np.random.default_rng(2)
    n = 12
    x = rng.standard_normal(n)
    y = 0.5 + 1.2 * x + rng.standard_normal(n) * 0.4
    d = make_dataset(w1=x, y=y)
    ws = make_ws(d)
    st = make_state(ws, beta=[0.0, 0.0], gamma=[0.0], sigma2=0.16, x=x)

    draws = np.empty((40_000, 2))
    for k in range(len(draws)):
        _update_beta_linear(ws, st)
        draws[k] = st.beta

    # 2-D grid quadrature of the unnormalized conditional.
    b0g = np.linspace(-1.0, 2.0, 401)
    b1g = np.linspace(-0.5, 3.0, 401)
    bb0, bb1 = np.meshgrid(b0g, b1g, indexing="ij")
    quad = np.zeros_like(bb0)
    for xi, yi in zip(x, y):
        quad += -0.5 * (yi - bb0 - bb1 * xi) ** 2 / 0.16
    quad += -0.5 * (bb0**2 + bb1**2) / 10_000.0
    dens = np.exp(quad - quad.max())
    w0 = np.trapezoid(dens, b1g, axis=1)
    mean0, sd0 = _quad_moments(b0g, np.log(w0 + 1e-300))
    w1 = np.trapezoid(dens, b0g, axis=0)
    mean1, sd1 = _quad_moments(b1g, np.log(w1 + 1e-300))

    assert draws[:, 0].mean() == pytest.approx(mean0, abs=0.012 * sd0)
    assert draws[:, 0].std(ddof=1) == pytest.approx(sd0, rel=0.012)
    assert draws[:, 1].mean() == pytest.approx(mean1, abs=0.012 * sd1)
    assert draws[:, 1].std(ddof=1) == pytest.approx(sd1, rel=0.012)


def test_residual_precision_matches_quadrature():
    rng = np.random.default_rng(3)
    n = 15
    x = rng.standard_normal(n)
    y = 1.0 + 0.5 * x + rng.standard_normal(n)
    d = make_dataset(w1=x, y=y)
    ws = make_ws(d)
    st = make_state(ws, beta=[1.0, 0.5], gamma=[0.0], x=x)

    draws = np.empty(60_000)
    for k in range(len(draws)):
        _update_sigma2_linear(ws, st)
        draws[k] = 1.0 / st.sigma2

    resid = y - 1.0 - 0.5 * x
    ssq = float(resid @ resid)
    grid = np.linspace(1e-6, 6.0, 40001)
    logd = (0.5 + n / 2 - 1) * np.log(grid) - (0.5 + ssq / 2) * grid
    mean_q, sd_q = _quad_moments(grid, logd)
    assert draws.mean() == pytest.approx(mean_q, rel=0.01)
    assert draws.std(ddof=1) == pytest.approx(sd_q, rel=0.012)


# ---------------------------------------------------------------------------
# Exposure model: gamma block and both measurement-side precisions
# ---------------------------------------------------------------------------


def test_gamma_conditional_matches_quadrature():
    rng = np.random.default_rng(4)
    n = 10
    x_latent = rng.standard_normal(n) * 1.3 + 0.4
    d = make_dataset(w1=x_latent, y=np.zeros(n))
    ws = make_ws(d)
    st = make_state(ws, beta=[0.0, 0.0], gamma=[0.0], sigma2_x=1.69, x=x_latent)

    draws = np.empty(50_000)
    for k in range(len(draws)):
        _update_gamma(ws, st)
        draws[k] = st.gamma[0]

    grid = np.linspace(-2, 3, 30001)
    logd = -0.5 * ((x_latent[None, :] - grid[:, None]) ** 2).sum(axis=1) / 1.69 - 0.5 * grid**2 / 10_000.0
    mean_q, sd_q = _quad_moments(grid, logd)
    assert draws.mean() == pytest.approx(mean_q, abs=0.012 * sd_q)
    assert draws.std(ddof=1) == pytest.approx(sd_q, rel=0.012)


def test_error_precision_conditional_matches_closed_form_and_quadrature():
    rng = np.random.default_rng(5)
    n = 14
    x_latent = rng.standard_normal(n)
    w1 = x_latent + rng.standard_normal(n) * 0.5
    w2 = np.where(np.arange(n) < 6, x_latent + 2.0 + rng.standard_normal(n) * 0.5, np.nan)
    d = make_dataset(w1=w1, w2=w2, y=np.zeros(n))
    ws = make_ws(d, include_shift=True)
    st = make_state(ws, beta=[0.0, 0.0], gamma=[0.0], x=x_latent, nu=2.0)

    draws = np.empty(60_000)
    for k in range(len(draws)):
        _update_sigma2_u(ws, st)
        draws[k] = 1.0 / st.sigma2_u

    m_total = int(d.n_measurements.sum())
    r1 = w1 - x_latent
    r2 = (w2 - x_latent - 2.0)[np.arange(n) < 6]
    ssq = float(r1 @ r1 + r2 @ r2)
    shape, rate = 0.5 + m_total / 2, 0.5 + ssq / 2
    # Closed form.
    assert draws.mean() == pytest.approx(shape / rate, rel=0.01)
    assert draws.std(ddof=1) == pytest.approx(np.sqrt(shape) / rate, rel=0.012)
    # Independent quadrature of prior x likelihood over the precision.
    grid = np.linspace(1e-6, shape / rate * 4, 40001)
    logd = (0.5 + m_total / 2 - 1) * np.log(grid) - (0.5 + ssq / 2) * grid
    mean_q, sd_q = _quad_moments(grid, logd)
    assert draws.mean() == pytest.approx(mean_q, rel=0.01)
    assert draws.std(ddof=1) == pytest.approx(sd_q, rel=0.012)


def test_exposure_precision_conditional_matches_closed_form():
    rng = np.random.default_rng(6)
    n = 20
    x_latent = rng.standard_normal(n) * 0.9
    d = make_dataset(w1=x_latent, y=np.zeros(n))
    ws = make_ws(d)
    st = make_state(ws, beta=[0.0, 0.0], gamma=[0.2], x=x_latent)

    draws = np.empty(50_000)
    for k in range(len(draws)):
        _update_sigma2_x(ws, st)
        draws[k] = 1.0 / st.sigma2_x

    resid = x_latent - 0.2
    shape, rate = 0.5 + n / 2, 0.5 + float(resid @ resid) / 2
    assert draws.mean() == pytest.approx(shape / rate, rel=0.01)
    assert draws.std(ddof=1) == pytest.approx(np.sqrt(shape) / rate, rel=0.012)


def test_shift_conditional_matches_quadrature():
    rng = np.random.default_rng(7)
    n = 12
    x_latent = rng.standard_normal(n)
    w2 = x_latent + 1.5 + rng.standard_normal(n) * 0.6
    d = make_dataset(w1=x_latent, w2=w2, y=np.zeros(n))
    ws = make_ws(d, include_shift=True)
    st = make_state(ws, beta=[0.0, 0.0], gamma=[0.0], sigma2_u=0.36, x=x_latent)

    draws = np.empty(50_000)
    for k in range(len(draws)):
        _update_nu(ws, st)
        draws[k] = st.nu

    grid = np.linspace(0.0, 3.0, 30001)
    logd = -0.5 * ((w2[None, :] - x_latent[None, :] - grid[:, None]) ** 2).sum(axis=1) / 0.36 - 0.5 * grid**2 / 10_000.0
    mean_q, sd_q = _quad_moments(grid, logd)
    assert draws.mean() == pytest.approx(mean_q, abs=0.012 * sd_q)
    assert draws.std(ddof=1) == pytest.approx(sd_q, rel=0.012)


# ---------------------------------------------------------------------------
# Gamma-process hazard increments
# ---------------------------------------------------------------------------

_GP_TIMES = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
_GP_EVENTS = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
_GP_X = np.array([0.5, -0.2, 1.0, 0.1, -0.5])


def _gp_fixture(gp_c, gp_rate=0.01):
    d = make_dataset(w1=_GP_X, time=_GP_TIMES, event=_GP_EVENTS)
    ws = make_ws(d, kind="cox", priors=PriorConfig(gp_c=gp_c, gp_rate=gp_rate))
    st = make_state(ws, beta=[0.7, 0.0] if d.p else [0.7], gamma=[0.0], x=_GP_X, dh0=np.full(3, 0.1))
    return ws, st


def test_gamma_process_draws_match_conditional_moments():
    ws, st = _gp_fixture(gp_c=0.8, gp_rate=0.05)
    # Hand risk totals at beta = 0.7 for event times 1, 3, 4.
    elp = np.exp(0.7 * _GP_X)
    risk_totals = np.array([elp.sum(), elp[2:].sum(), elp[3:].sum()])
    shape, rate = gamma_process_posterior_params(ws.event_times, ws.d_counts, risk_totals, 0.8, 0.05)
    np.testing.assert_allclose(shape, 0.8 * 0.05 * np.array([1.0, 2.0, 1.0]) + 1.0)
    np.testing.assert_allclose(rate, 0.8 + risk_totals)

    draws = np.empty((60_000, 3))
    for k in range(len(draws)):
        _update_dh0(ws, st)
        draws[k] = st.dh0
    np.testing.assert_allclose(draws.mean(axis=0), shape / rate, rtol=0.01)
    np.testing.assert_allclose(draws.std(axis=0, ddof=1), np.sqrt(shape) / rate, rtol=0.012)

    # Quadrature cross-check for the first increment.
    grid = np.linspace(1e-9, 10 * shape[0] / rate[0], 50001)
    logd = (shape[0] - 1) * np.log(grid) - rate[0] * grid
    mean_q, sd_q = _quad_moments(grid, logd)
    assert draws[:, 0].mean() == pytest.approx(mean_q, rel=0.01)
    assert draws[:, 0].std(ddof=1) == pytest.approx(sd_q, rel=0.012)


# ---------------------------------------------------------------------------
# Binary-covariate imputation: exact two-point conditional
# ---------------------------------------------------------------------------


def _imputation_fixture(beta_z2=0.8, gamma_z2=0.6):
    # Row 1 has a missing binary covariate; everything else is observed.
    z = np.array([[0.5, 1.0], [-0.3, np.nan], [1.2, 0.0]])
    d = make_dataset(
        w1=np.array([0.2, 0.4, -0.1]),
        z=z,
        binary_z=[1],
        y=np.array([1.1, 0.6, -0.2]),
    )
    ws = make_ws(d)
    alphas = {1: np.array([0.3, -0.5])}
    st = make_state(
        ws,
        beta=[0.2, 0.7, -0.4, beta_z2],
        gamma=[0.1, 0.3, gamma_z2],
        sigma2=0.5,
        sigma2_x=0.8,
        x=np.array([0.15, 0.35, -0.05]),
        alphas=alphas,
    )
    st.z[1, 1] = 0.0
    return ws, st


def _enumerated_p1(ws, st, beta_z2, gamma_z2):
    # Independent direct evaluation of both states for row 1.
    y, x, z1 = 0.6, st.x[1], -0.3
    ap = st.alphas[1] @ np.array([1.0, z1])
    weights = []
    for v in (0.0, 1.0):
        mean_y = 0.2 + 0.7 * x - 0.4 * z1 + beta_z2 * v
        out = np.exp(-0.5 * (y - mean_y) ** 2 / st.sigma2)
        model = expit(ap) if v == 1.0 else 1.0 - expit(ap)
        mu_x = 0.1 + 0.3 * z1 + gamma_z2 * v
        expo = np.exp(-0.5 * (x - mu_x) ** 2 / st.sigma2_x)
        weights.append(out * model * expo)
    total = weights[0] + weights[1]
    # The two-point conditional is the enumeration; it must normalize.
    assert (weights[0] + weights[1]) / total == pytest.approx(1.0, abs=1e-15)
    return weights[1] / total


def test_binary_imputation_matches_enumeration():
    ws, st = _imputation_fixture()
    p1 = _enumerated_p1(ws, st, beta_z2=0.8, gamma_z2=0.6)
    hits = 0
    k = 60_000
    for _ in range(k):
        _impute_z(ws, st)
        hits += st.z[1, 1] == 1.0
    freq = hits / k
    assert freq == pytest.approx(p1, abs=3.5 * np.sqrt(p1 * (1 - p1) / k))


def test_binary_imputation_reduces_to_model_probability_when_coefficients_zero():
    ws, st = _imputation_fixture(beta_z2=0.0, gamma_z2=0.0)
    ap = st.alphas[1] @ np.array([1.0, -0.3])
    p_model = float(expit(ap))
    hits = 0
    k = 60_000
    for _ in range(k):
        _impute_z(ws, st)
        hits += st.z[1, 1] == 1.0
    assert hits / k == pytest.approx(p_model, abs=3.5 * np.sqrt(p_model * (1 - p_model) / k))


# ---------------------------------------------------------------------------
# Prior-only sampling: the posterior equals the prior on an empty dataset
# ---------------------------------------------------------------------------


def test_prior_only_linear_beta_reproduces_prior_moments():
    d = make_dataset(w1=np.zeros(0), y=np.zeros(0))
    res = run_mcmc(
        d,
        OutcomeSpec(kind="linear"),
        cfg=MCMCConfig(n_chains=2, n_burnin=50, n_main=4000, seed=1, max_extensions=0),
    )
    pooled = res.pooled("beta_x")
    k = len(pooled)
    # Conjugate path: draws are iid N(0, 10000).
    assert pooled.mean() == pytest.approx(0.0, abs=3 * 100 / np.sqrt(k))
    assert pooled.std(ddof=1) == pytest.approx(100.0, rel=3 / np.sqrt(2 * k) + 0.01)
    prec = res.pooled("sigma2_u")
    # Ga(0.5, 0.5) prior on the precision: the variance draw is 1/Gamma.
    assert np.median(prec) == pytest.approx(1.0 / 0.4549, rel=0.15)
