"""Deterministic frequentist fitters.

OLS, IRLS logistic regression, a Newton solver for the Cox partial likelihood
(Breslow ties), full Weibull maximum likelihood, and direct ML for the
random-intercepts measurement model.  These back the naive analyses and
regression calibration, and initialize the MCMC chains.

All fitters are pure functions of their inputs: identical inputs give
bit-identical outputs.  Newton-type solvers use step-halving so the
log-likelihood never decreases across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit

from .dataset import MEDataset

__all__ = [
    "FitError",
    "SingularDesignError",
    "ConvergenceError",
    "SeparationError",
    "InsufficientDataError",
    "LinearFit",
    "GlmFit",
    "WeibullFit",
    "MixedModelFit",
    "fit_ols",
    "fit_logistic_irls",
    "fit_cox_partial",
    "fit_weibull_ml",
    "fit_mixed_model_ml",
]


class FitError(Exception):
    """Base class for fitter failures."""


class SingularDesignError(FitError):
    def __init__(self, column: int):
        self.column = column
        super().__init__(f"design matrix is rank deficient (column {column} is linearly dependent)")


class ConvergenceError(FitError):
    def __init__(self, message: str, last_iterate: np.ndarray | None = None):
        self.last_iterate = last_iterate
        super().__init__(message)


class SeparationError(FitError):
    """Perfect or quasi-perfect separation in a logistic fit."""


class InsufficientDataError(FitError):
    pass


@dataclass(frozen=True)
class LinearFit:
    coef: np.ndarray
    sigma2: float
    cov: np.ndarray


@dataclass(frozen=True)
class GlmFit:
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    n_iter: int
    ll_path: tuple = ()  # per-iteration log-likelihood trajectory


@dataclass(frozen=True)
class WeibullFit:
    coef: np.ndarray
    shape: float
    cov: np.ndarray  # over (coef, shape)
    loglik: float
    n_iter: int
    ll_path: tuple = ()


@dataclass(frozen=True)
class MixedModelFit:
    """ML fit of W_ij = gamma0 + gamma_z'Z_i + nu*1{j=2} + b_i + U_ij."""

    gamma0: float
    gamma_z: np.ndarray
    sigma2_x_given_z: float
    sigma2_u: float
    nu: float | None
    loglik: float
    gamma_cov: np.ndarray
    at_boundary: bool
    n_replicated: int


def _ll_noise_floor(ll: float) -> float:
    # Near an optimum the true step gain can sit below the float64 resolution
    # of the log-likelihood; step-halving must not reject inside that noise.
    return 32.0 * np.finfo(float).eps * (1.0 + abs(ll))


def _check_full_rank(x: np.ndarray) -> None:
    n, k = x.shape
    if n < k:
        raise SingularDesignError(k - 1)
    r = np.linalg.qr(x, mode="r")
    diag = np.abs(np.diag(r))
    tol = max(n, k) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        raise SingularDesignError(int(bad[0]))


def fit_ols(x: np.ndarray, y: np.ndarray) -> LinearFit:
    """Ordinary least squares with residual variance and coefficient covariance.

    Requires a full-rank design with at least as many rows as columns; raises
    :class:`SingularDesignError` naming the offending column otherwise.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = x.shape
    _check_full_rank(x)
    coef, _, _, _ = scipy.linalg.lstsq(x, y)
    resid = y - x @ coef
    dof = n - k
    sigma2 = float(resid @ resid / dof) if dof > 0 else 0.0
    xtx_inv = scipy.linalg.inv(x.T @ x)
    return LinearFit(coef=coef, sigma2=sigma2, cov=sigma2 * xtx_inv)


def _logistic_loglik(lp: np.ndarray, y: np.ndarray) -> float:
    return float(y @ lp - np.logaddexp(0.0, lp).sum())


def fit_logistic_irls(
    x: np.ndarray,
    y: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> GlmFit:
    """Logistic regression by iteratively reweighted least squares.

    Converged when the score has max-norm below ``tol``; the reported
    covariance is the inverse observed information.  Perfect separation (the
    likelihood has no finite maximizer) raises :class:`SeparationError`.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = x.shape
    if not np.isin(y, (0.0, 1.0)).all():
        raise FitError("logistic outcome must be 0/1")
    if (y == y[0]).all():
        raise SeparationError("degenerate outcome: all responses identical")
    _check_full_rank(x)

    beta = np.zeros(k)
    lp = x @ beta
    ll = _logistic_loglik(lp, y)
    ll_path = [ll]
    for it in range(1, max_iter + 1):
        prob = expit(lp)
        grad = x.T @ (y - prob)
        if np.max(np.abs(grad)) < tol:
            resid = np.abs(y - prob)
            if resid.max() < 1e-6:
                raise SeparationError("perfect separation: fitted probabilities reached 0/1 for every row")
            weights = prob * (1.0 - prob)
            info = x.T @ (x * weights[:, None])
            return GlmFit(coef=beta, cov=scipy.linalg.inv(info), loglik=ll, n_iter=it - 1, ll_path=tuple(ll_path))
        weights = np.clip(prob * (1.0 - prob), 1e-12, None)
        info = x.T @ (x * weights[:, None])
        try:
            step = scipy.linalg.solve(info, grad, assume_a="pos")
        except scipy.linalg.LinAlgError:
            raise SeparationError("information matrix became singular (separation)") from None
        scale = 1.0
        floor = _ll_noise_floor(ll)
        for _ in range(40):
            cand = beta + scale * step
            lp_cand = x @ cand
            ll_cand = _logistic_loglik(lp_cand, y)
            if ll_cand >= ll - floor:
                break
            scale *= 0.5
        else:
            raise ConvergenceError("step halving failed to improve the log-likelihood", last_iterate=beta)
        beta, lp, ll = cand, lp_cand, ll_cand
        ll_path.append(ll)
        if np.linalg.norm(beta) > 1e6:
            raise SeparationError("diverging coefficient norm indicates separation")
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", last_iterate=beta)


def _cox_pieces(times: np.ndarray, events: np.ndarray, x: np.ndarray):
    """Sorted views plus event-time grouping used by the partial likelihood."""
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    d_sorted = events[order].astype(bool)
    x_sorted = x[order]
    event_times = np.unique(t_sorted[d_sorted])
    # First sorted index with time >= each event time: risk-set start.
    risk_start = np.searchsorted(t_sorted, event_times, side="left")
    return t_sorted, d_sorted, x_sorted, event_times, risk_start


def _cox_loglik_grad_hess(beta, t_sorted, d_sorted, x_sorted, event_times, risk_start):
    n, k = x_sorted.shape
    lp = x_sorted @ beta
    # Centering keeps exp(lp) <= 1 so the suffix sums stay well conditioned;
    # the partial likelihood, score and information are shift-invariant.
    center = lp.max() if n else 0.0
    lp = lp - center
    elp = np.exp(lp)
    # Suffix sums over the sorted order give each risk-set total in O(n).
    s0_suffix = np.cumsum(elp[::-1])[::-1]
    s1_suffix = np.cumsum((x_sorted * elp[:, None])[::-1], axis=0)[::-1]
    xxw = x_sorted[:, :, None] * x_sorted[:, None, :] * elp[:, None, None]
    s2_suffix = np.cumsum(xxw[::-1], axis=0)[::-1]

    ll = 0.0
    grad = np.zeros(k)
    hess = np.zeros((k, k))
    for j, tj in enumerate(event_times):
        start = risk_start[j]
        in_group = d_sorted & (t_sorted == tj)
        dj = int(in_group.sum())
        s0 = s0_suffix[start]
        s1 = s1_suffix[start]
        s2 = s2_suffix[start]
        ll += lp[in_group].sum() - dj * np.log(s0)
        mean = s1 / s0
        grad += x_sorted[in_group].sum(axis=0) - dj * mean
        hess -= dj * (s2 / s0 - np.outer(mean, mean))
    return ll, grad, hess


def fit_cox_partial(
    times: np.ndarray,
    events: np.ndarray,
    x: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> GlmFit:
    """Cox partial-likelihood Newton solver with Breslow tie handling."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if events.sum() < 1:
        raise FitError("no events: the partial likelihood is uninformative")
    pieces = _cox_pieces(times, events, x)
    k = x.shape[1]
    beta = np.zeros(k)
    ll, grad, hess = _cox_loglik_grad_hess(beta, *pieces)
    ll_path = [ll]
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            cov = _safe_inv_neg(hess)
            return GlmFit(coef=beta, cov=cov, loglik=ll, n_iter=it - 1, ll_path=tuple(ll_path))
        try:
            step = scipy.linalg.solve(-hess, grad, assume_a="pos")
        except scipy.linalg.LinAlgError:
            step = np.linalg.pinv(-hess) @ grad
        scale = 1.0
        floor = _ll_noise_floor(ll)
        for _ in range(40):
            cand = beta + scale * step
            ll_cand, grad_cand, hess_cand = _cox_loglik_grad_hess(cand, *pieces)
            if np.isfinite(ll_cand) and ll_cand >= ll - floor:
                break
            scale *= 0.5
        else:
            raise ConvergenceError("Cox step halving failed to improve the partial likelihood", last_iterate=beta)
        beta, ll, grad, hess = cand, ll_cand, grad_cand, hess_cand
        ll_path.append(ll)
    raise ConvergenceError(f"Cox Newton did not converge in {max_iter} iterations", last_iterate=beta)


def _safe_inv_neg(hess: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.inv(-hess)
    except scipy.linalg.LinAlgError:
        return np.linalg.pinv(-hess)


def _weibull_ll_parts(theta, t, d, x, log_t):
    k = x.shape[1]
    beta, log_r = theta[:k], theta[k]
    r = np.exp(log_r)
    lp = x @ beta
    mu = np.exp(np.clip(r * log_t + lp, -700, 700))  # t^r * e^lp
    ll = float(d @ (log_r + (r - 1.0) * log_t + lp) - mu.sum())
    grad_beta = x.T @ (d - mu)
    rlog_t = r * log_t
    grad_a = float((d * (1.0 + rlog_t)).sum() - (mu * rlog_t).sum())
    grad = np.append(grad_beta, grad_a)
    hbb = -(x.T @ (x * mu[:, None]))
    hba = -(x.T @ (mu * rlog_t))
    haa = float((d * rlog_t).sum() - (mu * (rlog_t**2 + rlog_t)).sum())
    hess = np.zeros((k + 1, k + 1))
    hess[:k, :k] = hbb
    hess[:k, k] = hba
    hess[k, :k] = hba
    hess[k, k] = haa
    return ll, grad, hess


def fit_weibull_ml(
    times: np.ndarray,
    events: np.ndarray,
    x: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> WeibullFit:
    """Full ML for the Weibull hazard r t^(r-1) exp(x'beta).

    ``x`` must include the intercept column.  Newton iterations run on
    (beta, log r); the reported covariance is transformed to (beta, r).
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not (times > 0).all():
        raise FitError("all survival times must be > 0")
    if events.sum() < 1:
        raise FitError("no events: the Weibull likelihood is uninformative about the shape")
    _check_full_rank(x)
    log_t = np.log(times)
    k = x.shape[1]
    theta = np.zeros(k + 1)
    theta[0] = np.log(events.sum() / times.sum())  # exponential-rate start
    ll, grad, hess = _weibull_ll_parts(theta, times, events, x, log_t)
    ll_path = [ll]
    for it in range(1, max_iter + 1):
        grad_check = grad.copy()
        grad_check[k] /= np.exp(theta[k])  # report d/dr, not d/dlog r
        if np.max(np.abs(grad_check)) < tol:
            if not np.isfinite(theta).all():
                raise ConvergenceError("Weibull ML produced non-finite estimates", last_iterate=theta)
            cov_log = _safe_inv_neg(hess)
            r = float(np.exp(theta[k]))
            jac = np.eye(k + 1)
            jac[k, k] = r
            cov = jac @ cov_log @ jac.T
            return WeibullFit(coef=theta[:k], shape=r, cov=cov, loglik=ll, n_iter=it - 1, ll_path=tuple(ll_path))
        try:
            step = scipy.linalg.solve(-hess, grad, assume_a="pos")
        except scipy.linalg.LinAlgError:
            step = np.linalg.pinv(-hess) @ grad
        scale = 1.0
        floor = _ll_noise_floor(ll)
        for _ in range(60):
            cand = theta + scale * step
            ll_cand, grad_cand, hess_cand = _weibull_ll_parts(cand, times, events, x, log_t)
            if np.isfinite(ll_cand) and ll_cand >= ll - floor:
                break
            scale *= 0.5
        else:
            raise ConvergenceError("Weibull step halving failed to improve the log-likelihood", last_iterate=theta)
        theta, ll, grad, hess = cand, ll_cand, grad_cand, hess_cand
        ll_path.append(ll)
        if np.abs(theta[k]) > 30:
            raise ConvergenceError("Weibull shape estimate diverged", last_iterate=theta)
    raise ConvergenceError(f"Weibull ML did not converge in {max_iter} iterations", last_iterate=theta)


# ---------------------------------------------------------------------------
# Random-intercepts measurement model
# ---------------------------------------------------------------------------


def _mixed_design(d: MEDataset, include_shift: bool):
    """Stack observed measurements with design rows [1, Z_i, 1{j=2}]."""
    rows_i, rows_j = np.nonzero(d.w_observed)
    w_obs = d.w[rows_i, rows_j]
    ncol = 1 + d.p + (1 if include_shift else 0)
    design = np.ones((len(rows_i), ncol))
    if d.p:
        design[:, 1 : 1 + d.p] = d.z[rows_i]
    if include_shift:
        design[:, -1] = (rows_j == 1).astype(float)
    return rows_i, w_obs, design


def _mixed_work(d: MEDataset, include_shift: bool):
    """One-time preprocessing shared by every likelihood evaluation."""
    keep = d.z_observed.all(axis=1)
    rows_i, w_obs, design = _mixed_design(d, include_shift)
    mask = keep[rows_i]
    rows_i, w_obs, design = rows_i[mask], w_obs[mask], design[mask]
    n_i = np.bincount(rows_i, minlength=d.n)
    pair = n_i[rows_i] == 2
    partner = _pair_partner(rows_i)
    n_pairs = int(pair.sum() // 2)
    n_single = int((~pair).sum())
    return w_obs, design, pair, partner, n_pairs, n_single


def _mixed_loglik_work(work, sigma2_x: float, sigma2_u: float, return_fixed: bool = False):
    w_obs, design, pair, partner, n_pairs, n_single = work
    a = sigma2_x + sigma2_u

    # Per-observation GLS weights from the 2x2 block inverse.
    det2 = a * a - sigma2_x * sigma2_x
    if det2 <= 0 or a <= 0:
        # Degenerate covariance: likelihood undefined off the support.
        return (-np.inf, None, None) if return_fixed else -np.inf

    # For singletons: weight 1/a.  For pairs, inverse is [[a,-b],[-b,a]]/det.
    # GLS normal equations assembled observation-wise using the pair partner.
    w_self = np.where(pair, a / det2, 1.0 / a)
    w_cross = np.where(pair, -sigma2_x / det2, 0.0)

    # Weighted design products: X' V^{-1} X and X' V^{-1} y with cross terms.
    xw = design * w_self[:, None]
    if pair.any():
        xw = xw + design[partner] * w_cross[:, None]
    xtvx = design.T @ xw
    xtvy = xw.T @ w_obs
    try:
        gamma = scipy.linalg.solve(xtvx, xtvy, assume_a="pos")
    except scipy.linalg.LinAlgError:
        return (-np.inf, None, None) if return_fixed else -np.inf
    resid = w_obs - design @ gamma
    quad = float(resid @ (resid * w_self + (resid[partner] * w_cross if pair.any() else 0.0)))

    logdet = n_single * np.log(a) + n_pairs * np.log(det2)
    m = len(w_obs)
    ll = -0.5 * (m * np.log(2.0 * np.pi) + logdet + quad)
    if return_fixed:
        return ll, gamma, scipy.linalg.inv(xtvx)
    return ll


def mixed_model_loglik(
    d: MEDataset,
    sigma2_x: float,
    sigma2_u: float,
    include_shift: bool = False,
    return_fixed: bool = False,
):
    """Profile log-likelihood of the variance pair, maximizing fixed effects by GLS.

    Rows with unobserved covariates are excluded (complete-case measurement
    model).
    """
    return _mixed_loglik_work(_mixed_work(d, include_shift), sigma2_x, sigma2_u, return_fixed)


def _pair_partner(rows_i: np.ndarray) -> np.ndarray:
    """Index of the other observation of the same individual (self for singletons)."""
    partner = np.arange(len(rows_i))
    order = np.argsort(rows_i, kind="stable")
    sorted_rows = rows_i[order]
    same_next = np.flatnonzero(sorted_rows[:-1] == sorted_rows[1:])
    partner[order[same_next]] = order[same_next + 1]
    partner[order[same_next + 1]] = order[same_next]
    return partner


def fit_mixed_model_ml(d: MEDataset, include_shift: bool = False) -> MixedModelFit:
    """Direct ML for the random-intercepts measurement model.

    Maximizes the closed-form marginal likelihood over the variance pair with
    Nelder-Mead started at method-of-moments values; fixed effects are profiled
    out by GLS.  Variance estimates on the boundary are clamped to 0 and
    flagged.  Requires at least one individual with both measurements.
    """
    keep = d.z_observed.all(axis=1)
    n_i = np.where(keep, d.n_measurements, 0)
    n_replicated = int((n_i == 2).sum())
    if n_replicated == 0:
        raise InsufficientDataError(
            "no individuals with replicate measurements: the error variance is unidentifiable"
        )

    rows_i, w_obs, design = _mixed_design(d, include_shift)
    mask = keep[rows_i]
    rows_i, w_obs, design = rows_i[mask], w_obs[mask], design[mask]

    # Method-of-moments start.
    ols = scipy.linalg.lstsq(design, w_obs)[0]
    resid = w_obs - design @ ols
    total_var = float(np.var(resid)) if len(resid) > 1 else 1.0
    both = (d.w_observed.all(axis=1)) & keep
    diffs = d.w[both, 0] - d.w[both, 1]
    var_diff = float(np.var(diffs)) if diffs.size > 1 else 0.0
    s2u0 = max(0.5 * var_diff, 1e-4 * max(total_var, 1e-12))
    s2x0 = max(total_var - s2u0, 0.05 * max(total_var, 1e-12))

    floor = 1e-12 * max(total_var, 1.0)
    work = _mixed_work(d, include_shift)

    def neg_ll(v):
        return -_mixed_loglik_work(work, max(v[0], floor), max(v[1], floor))

    x0 = np.array([s2x0, s2u0])
    res = scipy.optimize.minimize(
        neg_ll,
        x0,
        method="Nelder-Mead",
        bounds=[(floor, None), (floor, None)],
        options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 800},
    )
    # Restart once from the optimum; Nelder-Mead can stall on narrow valleys.
    res2 = scipy.optimize.minimize(
        neg_ll,
        res.x,
        method="Nelder-Mead",
        bounds=[(floor, None), (floor, None)],
        options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 800},
    )
    best = res2 if res2.fun <= res.fun else res

    s2x, s2u = float(best.x[0]), float(best.x[1])
    boundary_tol = 1e-7 * max(total_var, 1.0)
    at_boundary = False
    if s2u <= max(floor * 10, boundary_tol):
        s2u, at_boundary = 0.0, True
    if s2x <= max(floor * 10, boundary_tol):
        s2x, at_boundary = 0.0, True

    ll, gamma, gamma_cov = _mixed_loglik_work(
        work, max(s2x, floor), max(s2u, floor), return_fixed=True
    )
    nu = float(gamma[-1]) if include_shift else None
    gamma_z = gamma[1 : 1 + d.p]
    return MixedModelFit(
        gamma0=float(gamma[0]),
        gamma_z=np.asarray(gamma_z, dtype=float),
        sigma2_x_given_z=s2x,
        sigma2_u=s2u,
        nu=nu,
        loglik=float(ll),
        gamma_cov=gamma_cov,
        at_boundary=at_boundary,
        n_replicated=n_replicated,
    )
