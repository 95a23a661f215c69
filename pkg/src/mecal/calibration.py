"""Regression calibration and naive analyses.

Two calibration forms are provided.  The simple form regresses the second
measurement on the first (plus error-free covariates) inside the replication
subsample and applies that regression to everyone.  The efficient form fits
the random-intercepts measurement model to all available measurements and
substitutes the conditional mean of the true covariate given all of them,

    E(X | W, Z) = pred + lambda * (Wbar - pred),      pred = gamma0 + gamma_z'Z,
    lambda      = s2x / (s2x + s2u / N_i),

with conditional variance s2x * (1 - lambda).  Percentile confidence intervals
come from a nonparametric bootstrap that resamples individuals (keeping each
replicate pair together).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import MEDataset, OutcomeKind, OutcomeSpec, validate_dataset
from .fitters import (
    FitError,
    InsufficientDataError,
    MixedModelFit,
    fit_cox_partial,
    fit_logistic_irls,
    fit_mixed_model_ml,
    fit_ols,
    fit_weibull_ml,
)
from .results import FitResult, ParamVector

__all__ = [
    "CalibrationModel",
    "fit_calibration_simple",
    "fit_calibration_efficient",
    "predict_conditional_x",
    "shrinkage_factor",
    "fit_rc",
    "naive_fit",
    "bootstrap_rc",
    "percentile_interval",
]


@dataclass(frozen=True)
class CalibrationModel:
    """Fitted calibration stage of either form."""

    form: str  # "simple" | "efficient"
    coef: np.ndarray | None = None  # simple: regression of W2 on (1, W1, Z)
    mixed: MixedModelFit | None = None  # efficient
    include_shift: bool = False

    def __post_init__(self) -> None:
        if self.form not in ("simple", "efficient"):
            raise ValueError(f"unknown calibration form {self.form!r}")
        if self.form == "simple" and self.coef is None:
            raise ValueError("simple form requires regression coefficients")
        if self.form == "efficient" and self.mixed is None:
            raise ValueError("efficient form requires a mixed-model fit")


def shrinkage_factor(sigma2_x: float, sigma2_u: float, n_i: np.ndarray) -> np.ndarray:
    """lambda_i = s2x / (s2x + s2u / N_i), in [0, 1] for every N_i >= 1."""
    n_i = np.asarray(n_i, dtype=float)
    denom = sigma2_x + sigma2_u / np.maximum(n_i, 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(denom > 0, sigma2_x / denom, 1.0)
    return lam


def _complete_rows(d: MEDataset) -> np.ndarray:
    return d.z_observed.all(axis=1)


def fit_calibration_simple(d: MEDataset) -> CalibrationModel:
    """Regress W2 on (1, W1, Z) over the replication subsample."""
    both = d.w_observed.all(axis=1) & _complete_rows(d)
    if both.sum() < 3:
        raise InsufficientDataError(
            f"simple calibration needs at least 3 replicated individuals, found {int(both.sum())}"
        )
    design = np.column_stack([np.ones(int(both.sum())), d.w[both, 0], d.z[both]])
    fit = fit_ols(design, d.w[both, 1])
    return CalibrationModel(form="simple", coef=fit.coef)


def fit_calibration_efficient(d: MEDataset, include_shift: bool = False) -> CalibrationModel:
    """ML random-intercepts measurement model over all available measurements."""
    mixed = fit_mixed_model_ml(d, include_shift=include_shift)
    return CalibrationModel(form="efficient", mixed=mixed, include_shift=include_shift)


def predict_conditional_x(m: CalibrationModel, d: MEDataset):
    """Per-individual (mean, variance) of the true covariate given W and Z.

    The efficient form returns the exact normal conditional moments; the
    simple form returns the W2-regression prediction with variance None.
    """
    if m.form == "simple":
        if not d.w_observed[:, 0].all():
            bad = int(np.flatnonzero(~d.w_observed[:, 0])[0])
            raise FitError(f"simple calibration requires W1 for every individual (row {bad} missing)")
        design = np.column_stack([np.ones(d.n), d.w[:, 0], d.z])
        return design @ m.coef, None

    mixed = m.mixed
    n_i = d.n_measurements
    if (n_i == 0).any():
        bad = int(np.flatnonzero(n_i == 0)[0])
        raise FitError(f"efficient calibration requires N_i >= 1 (row {bad} has no measurements)")
    shift = mixed.nu if (m.include_shift and mixed.nu is not None) else 0.0
    pred = mixed.gamma0 + (d.z @ mixed.gamma_z if d.p else 0.0)
    w_bar = d.w_bar(shift=shift)
    lam = shrinkage_factor(mixed.sigma2_x_given_z, mixed.sigma2_u, n_i)
    mean = pred + lam * (w_bar - pred)
    var = mixed.sigma2_x_given_z * (1.0 - lam)
    return mean, var


# ---------------------------------------------------------------------------
# Outcome-model dispatch shared by naive, RC and the MCMC initializer
# ---------------------------------------------------------------------------


def fit_outcome_model(spec: OutcomeSpec, x_col: np.ndarray, z: np.ndarray, d: MEDataset, rows: np.ndarray):
    """Fit the requested outcome model with x_col standing in for the true covariate.

    Returns (flat coefficient map, covariance over those coefficients in the
    same order, extras map).
    """
    kind = spec.kind
    p = z.shape[1]
    names = (["beta0"] if kind.has_intercept else []) + ["beta_x"] + [f"beta_z{j + 1}" for j in range(p)]
    if kind.has_intercept:
        design = np.column_stack([np.ones(len(x_col)), x_col, z])
    else:
        design = np.column_stack([x_col, z])

    extras: dict = {}
    if kind is OutcomeKind.LINEAR:
        fit = fit_ols(design, d.y[rows])
        coef, cov = fit.coef, fit.cov
        extras["sigma2"] = fit.sigma2
    elif kind is OutcomeKind.LOGISTIC:
        fit = fit_logistic_irls(design, d.y[rows])
        coef, cov = fit.coef, fit.cov
    elif kind is OutcomeKind.COX:
        fit = fit_cox_partial(d.time[rows], d.event[rows], design)
        coef, cov = fit.coef, fit.cov
    else:
        fit = fit_weibull_ml(d.time[rows], d.event[rows], design)
        coef, cov = fit.coef, fit.cov[: len(fit.coef), : len(fit.coef)]
        extras["shape_r"] = fit.shape
        extras["shape_se"] = float(np.sqrt(max(fit.cov[-1, -1], 0.0)))
    return dict(zip(names, coef)), cov, extras


def _build_param_vector(spec: OutcomeSpec, coefs: dict, extras: dict, calib: CalibrationModel | None, p: int) -> ParamVector:
    gamma0, gamma_z, s2x, s2u, nu = 0.0, np.zeros(p), np.nan, np.nan, None
    if calib is not None and calib.form == "efficient":
        mm = calib.mixed
        gamma0, gamma_z, s2x, s2u, nu = mm.gamma0, mm.gamma_z, mm.sigma2_x_given_z, mm.sigma2_u, mm.nu
    return ParamVector(
        beta0=coefs.get("beta0"),
        beta_x=coefs["beta_x"],
        beta_z=np.array([coefs[f"beta_z{j + 1}"] for j in range(p)]),
        sigma2=extras.get("sigma2"),
        shape_r=extras.get("shape_r"),
        gamma0=gamma0,
        gamma_z=gamma_z,
        sigma2_x_given_z=s2x if np.isfinite(s2x) else 0.0,
        sigma2_u=s2u if np.isfinite(s2u) else 0.0,
        nu=nu,
    )


def _validate_for_fit(d: MEDataset, spec: OutcomeSpec) -> None:
    violations = validate_dataset(d, spec, allow_empty_measurements=True)
    if violations:
        raise FitError("invalid dataset: " + "; ".join(violations[:5]))


def naive_fit(d: MEDataset, spec: OutcomeSpec, level: float = 0.95) -> FitResult:
    """Outcome model on the first error-prone measurement, ignoring error.

    Complete-case: rows lacking W1 or any covariate are dropped.  Intervals
    are Wald intervals from the model-based covariance.
    """
    _validate_for_fit(d, spec)
    rows = d.w_observed[:, 0] & _complete_rows(d)
    if rows.sum() < 2:
        raise InsufficientDataError("fewer than 2 complete-case rows for the naive fit")
    coefs, cov, extras = fit_outcome_model(spec, d.w[rows, 0], d.z[rows], d, rows)
    from scipy.stats import norm

    zq = norm.ppf(0.5 + level / 2)
    ses = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    intervals = {name: (val - zq * se, val + zq * se) for (name, val), se in zip(coefs.items(), ses)}
    estimates = _build_param_vector(spec, coefs, extras, None, d.p)
    return FitResult(
        method="naive",
        estimates=estimates,
        intervals=intervals,
        level=level,
        diagnostics={"n_used": int(rows.sum()), "n_dropped": int(d.n - rows.sum())},
    )


def fit_rc(
    d: MEDataset,
    spec: OutcomeSpec,
    form: str = "efficient",
    include_shift: bool = False,
    level: float = 0.95,
) -> FitResult:
    """Regression calibration: outcome model with X replaced by E(X | W, Z).

    Point estimates only; use :func:`bootstrap_rc` for percentile intervals
    that account for the two-stage estimation.
    """
    _validate_for_fit(d, spec)
    rows = _complete_rows(d)
    if form == "simple":
        rows = rows & d.w_observed[:, 0]
    else:
        rows = rows & (d.n_measurements >= 1)
    sub = _subset(d, rows)
    if form == "simple":
        calib = fit_calibration_simple(sub)
    else:
        calib = fit_calibration_efficient(sub, include_shift=include_shift)
    xhat, _ = predict_conditional_x(calib, sub)
    coefs, _, extras = fit_outcome_model(spec, xhat, sub.z, sub, np.ones(sub.n, dtype=bool))
    estimates = _build_param_vector(spec, coefs, extras, calib, d.p)
    return FitResult(
        method=f"rc-{form}",
        estimates=estimates,
        level=level,
        diagnostics={"n_used": int(rows.sum()), "n_dropped": int(d.n - rows.sum())},
    )


def _subset(d: MEDataset, rows: np.ndarray) -> MEDataset:
    return MEDataset(
        w=d.w[rows],
        w_observed=d.w_observed[rows],
        z=d.z[rows],
        z_observed=d.z_observed[rows],
        z_binary=d.z_binary,
        y=None if d.y is None else d.y[rows],
        time=None if d.time is None else d.time[rows],
        event=None if d.event is None else d.event[rows],
    )


def percentile_interval(values: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval with endpoints at order statistics.

    With B sorted values the endpoints sit at 1-based ranks ceil(a*B) and
    ceil((1-a)*B), a = (1-level)/2.  Both endpoints are members of the input.
    """
    values = np.sort(np.asarray(values, dtype=float))
    b = len(values)
    if b == 0:
        raise ValueError("cannot form a percentile interval from no values")
    alpha = (1.0 - level) / 2.0
    # Guard the ceiling against float fuzz (0.025 * 2000 must rank as 50).
    lo_rank = min(max(int(np.ceil(alpha * b - 1e-9)), 1), b)
    hi_rank = min(max(int(np.ceil((1.0 - alpha) * b - 1e-9)), 1), b)
    return float(values[lo_rank - 1]), float(values[hi_rank - 1])


def bootstrap_rc(
    d: MEDataset,
    spec: OutcomeSpec,
    form: str = "efficient",
    b: int = 2000,
    seed: int = 0,
    include_shift: bool = False,
    level: float = 0.95,
) -> FitResult:
    """RC with nonparametric bootstrap percentile intervals.

    Individuals are resampled with replacement (replicate pairs stay
    together); the calibration and outcome models are refitted per replicate.
    Replicates whose fit fails are dropped and counted; more than 10% failures
    is an error.  Replicate b draws from a sub-seed that is a pure function of
    (seed, b), so results do not depend on execution order.
    """
    if b < 100:
        raise ValueError("bootstrap needs at least 100 replicates")
    point = fit_rc(d, spec, form=form, include_shift=include_shift, level=level)
    names = list(point.flat_estimates().keys())
    draws: dict[str, list[float]] = {name: [] for name in names}
    n_failed = 0
    for rep in range(b):
        rng = np.random.default_rng([seed, rep])
        idx = rng.integers(0, d.n, size=d.n)
        boot = _subset(d, idx)
        try:
            fit = fit_rc(boot, spec, form=form, include_shift=include_shift, level=level)
        except FitError:
            n_failed += 1
            continue
        flat = fit.flat_estimates()
        for name in names:
            draws[name].append(flat.get(name, np.nan))
    if n_failed > 0.10 * b:
        raise FitError(f"bootstrap failure rate too high: {n_failed}/{b} replicates failed")
    intervals = {
        name: percentile_interval(np.asarray(vals), level)
        for name, vals in draws.items()
        if len(vals) and np.isfinite(vals).all()
    }
    diagnostics = dict(point.diagnostics)
    diagnostics.update({"bootstrap_replicates": b, "bootstrap_failed": n_failed})
    return FitResult(
        method=point.method,
        estimates=point.estimates,
        intervals=intervals,
        level=level,
        diagnostics=diagnostics,
    )
