"""Scikit-learn style estimator wrappers around the analysis methods.

Each estimator takes its configuration in ``__init__`` (so ``get_params`` /
``set_params`` / ``clone`` compose with the wider ecosystem), validates the
dataset, does the work in ``fit``, and exposes the fitted
:class:`~mecal.results.FitResult` as ``result_`` with convenience views
``estimates_`` and ``intervals_``.  ``fit`` accepts an :class:`MEDataset`
rather than an (X, y) pair because the data carry replicate measurements,
missingness masks and censoring that a flat matrix cannot.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .bayes import MCMCConfig, PriorConfig, run_mcmc
from .calibration import bootstrap_rc, fit_rc, naive_fit
from .dataset import MEDataset, OutcomeSpec, validate_dataset

__all__ = ["NaiveAnalysis", "RegressionCalibration", "BayesCorrection"]


class _MeasurementErrorEstimator(BaseEstimator):
    """Shared input validation for the analysis estimators."""

    def _spec(self) -> OutcomeSpec:
        return OutcomeSpec(kind=self.model)

    def _check_data(self, data: MEDataset, allow_empty_measurements: bool = False) -> OutcomeSpec:
        if not isinstance(data, MEDataset):
            raise TypeError(f"expected an MEDataset, got {type(data).__name__}")
        spec = self._spec()
        violations = validate_dataset(data, spec, allow_empty_measurements=allow_empty_measurements)
        if violations:
            raise ValueError("invalid dataset: " + "; ".join(violations[:5]))
        return spec

    @property
    def estimates_(self) -> dict[str, float]:
        return self.result_.flat_estimates()

    @property
    def intervals_(self) -> dict[str, tuple[float, float]]:
        return self.result_.intervals

    @property
    def diagnostics_(self) -> dict:
        return self.result_.diagnostics


class NaiveAnalysis(_MeasurementErrorEstimator):
    """Outcome model on the first error-prone measurement, ignoring error.

    Rows without a first measurement or with missing covariates are dropped
    (complete-case analysis), mirroring the RC methods.
    """

    def __init__(self, model: str = "linear", level: float = 0.95):
        self.model = model
        self.level = level

    def fit(self, data: MEDataset, y=None):
        spec = self._check_data(data, allow_empty_measurements=True)
        self.result_ = naive_fit(data, spec, level=self.level)
        return self


class RegressionCalibration(_MeasurementErrorEstimator):
    """Simple or efficient regression calibration, optionally bootstrapped.

    ``bootstrap_reps=0`` gives point estimates only; any value >= 100 adds
    nonparametric percentile intervals from that many replicates.
    """

    def __init__(
        self,
        model: str = "linear",
        form: str = "efficient",
        include_shift: bool = False,
        bootstrap_reps: int = 0,
        seed: int = 0,
        level: float = 0.95,
    ):
        self.model = model
        self.form = form
        self.include_shift = include_shift
        self.bootstrap_reps = bootstrap_reps
        self.seed = seed
        self.level = level

    def fit(self, data: MEDataset, y=None):
        spec = self._check_data(data, allow_empty_measurements=True)
        if self.bootstrap_reps:
            self.result_ = bootstrap_rc(
                data,
                spec,
                form=self.form,
                b=self.bootstrap_reps,
                seed=self.seed,
                include_shift=self.include_shift,
                level=self.level,
            )
        else:
            self.result_ = fit_rc(
                data, spec, form=self.form, include_shift=self.include_shift, level=self.level
            )
        return self


class BayesCorrection(_MeasurementErrorEstimator):
    """Fully Bayesian correction via the MH-within-Gibbs sampler.

    ``chains=None`` picks the default schedule (five chains; three for Cox).
    After ``fit``, the full :class:`~mecal.bayes.MCMCResult` is available as
    ``mcmc_`` for chain-level inspection and CSV export.
    """

    def __init__(
        self,
        model: str = "linear",
        priors: PriorConfig | None = None,
        chains: int | None = None,
        burnin: int = 1_000,
        iters: int = 5_000,
        rhat_max: float = 1.05,
        max_extensions: int = 3,
        seed: int = 0,
        include_shift: bool = False,
        fixed_error_variance: float | None = None,
        x_draw_thin: int = 0,
        n_workers: int = 1,
        level: float = 0.95,
    ):
        self.model = model
        self.priors = priors
        self.chains = chains
        self.burnin = burnin
        self.iters = iters
        self.rhat_max = rhat_max
        self.max_extensions = max_extensions
        self.seed = seed
        self.include_shift = include_shift
        self.fixed_error_variance = fixed_error_variance
        self.x_draw_thin = x_draw_thin
        self.n_workers = n_workers
        self.level = level

    def _mcmc_config(self, spec: OutcomeSpec) -> MCMCConfig:
        overrides = dict(
            n_burnin=self.burnin,
            n_main=self.iters,
            rhat_threshold=self.rhat_max,
            max_extensions=self.max_extensions,
            seed=self.seed,
            x_draw_thin=self.x_draw_thin,
            n_workers=self.n_workers,
        )
        if self.chains is not None:
            overrides["n_chains"] = self.chains
        return MCMCConfig.default_for(spec.kind, **overrides)

    def fit(self, data: MEDataset, y=None):
        spec = self._check_data(data, allow_empty_measurements=True)
        self.mcmc_ = run_mcmc(
            data,
            spec,
            priors=self.priors or PriorConfig(),
            cfg=self._mcmc_config(spec),
            include_shift=self.include_shift,
            fixed_error_variance=self.fixed_error_variance,
        )
        self.result_ = self.mcmc_.to_fit_result(level=self.level)
        return self

    @property
    def converged_(self) -> bool:
        return self.mcmc_.converged

    @property
    def rhat_(self) -> dict[str, float]:
        return dict(self.mcmc_.rhat)
