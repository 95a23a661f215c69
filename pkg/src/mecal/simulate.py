"""Monte-Carlo simulation harness.

Generates datasets from the three study designs (bivariate-normal covariates
with classical error and a 10% replication subsample; linear, logistic and
Weibull-hazard outcomes), runs the requested correction methods over many
replicates, and aggregates empirical mean, SD and credible-interval coverage
for the exposure effect, in the layout of the result tables.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .bayes import MCMCConfig, PriorConfig
from .calibration import fit_rc, naive_fit
from .dataset import MEDataset, OutcomeKind, OutcomeSpec, make_dataset
from .estimators import BayesCorrection
from .fitters import FitError

__all__ = [
    "Scenario",
    "NuisanceParams",
    "MethodSummary",
    "ScenarioResult",
    "GridConfig",
    "derive_nuisance",
    "generate_dataset",
    "run_scenario",
    "render_table",
    "reference_priors",
    "desk_mcmc_config",
    "derive_seed",
    "load_grid_config",
    "results_to_dict",
    "result_from_dict",
]

_COV_XZ = 0.25  # covariance of the bivariate-normal (X, Z)
_CENSOR_TIME = 10.0
_WEIBULL_KAPPA = 2.0
_TARGET_PREVALENCE = 0.20
_TARGET_EVENT_FRACTION = 0.10
_ROOT_DRAWS = 1_000_000
_ROOT_TOL = 5e-4  # half the allowed 0.002 slack
_ROOT_SEED = 20_180_614


def derive_seed(*keys: int) -> int:
    """Pure function of the key tuple, usable as an independent sub-seed."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass(frozen=True)
class Scenario:
    """One cell of a simulation grid.

    The effect knob is ``r_squared`` for the linear design and ``beta_x`` for
    the logistic and survival designs (the error-free covariate always gets
    the same coefficient as the exposure).
    """

    kind: OutcomeKind
    reliability: float
    r_squared: float | None = None
    beta_x: float | None = None
    n: int = 1_000
    replication_fraction: float = 0.10
    reps: int = 0  # 0 = desk-scale default (200; 50 for survival)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", OutcomeKind(self.kind))
        if not 0.0 < self.reliability < 1.0:
            raise ValueError("reliability must be in (0, 1)")
        if not 0.0 < self.replication_fraction <= 1.0:
            raise ValueError("replication fraction must be in (0, 1]")
        if self.kind is OutcomeKind.LINEAR:
            if self.r_squared is None or self.beta_x is not None:
                raise ValueError("linear scenarios take r_squared (not beta_x)")
            if not 0.0 < self.r_squared < 1.0:
                raise ValueError("r_squared must be in (0, 1)")
        else:
            if self.beta_x is None or self.r_squared is not None:
                raise ValueError(f"{self.kind.value} scenarios take beta_x (not r_squared)")
        if self.reps == 0:
            object.__setattr__(self, "reps", 50 if self.kind.is_survival else 200)

    @property
    def effect(self) -> float:
        return self.r_squared if self.kind is OutcomeKind.LINEAR else self.beta_x

    @property
    def truth(self) -> float:
        """True exposure coefficient the methods are judged against."""
        return 1.0 if self.kind is OutcomeKind.LINEAR else self.beta_x

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "reliability": self.reliability,
            "n": self.n,
            "replication_fraction": self.replication_fraction,
            "reps": self.reps,
            "seed": self.seed,
        }
        if self.r_squared is not None:
            out["r_squared"] = self.r_squared
        if self.beta_x is not None:
            out["beta_x"] = self.beta_x
        return out


@dataclass(frozen=True)
class NuisanceParams:
    sigma2_u: float
    sigma2: float | None = None  # linear residual variance
    beta0: float | None = None  # logistic intercept
    lam: float | None = None  # Weibull rate multiplier


def _lp_sd(beta_x: float) -> float:
    # Var(bX X + bZ Z) with unit variances, covariance 0.25 and bZ = bX.
    return math.sqrt(beta_x * beta_x * (2.0 + 2.0 * _COV_XZ))


@functools.lru_cache(maxsize=None)
def _solve_logistic_intercept(beta_x: float) -> float:
    """Bisection so the marginal outcome prevalence hits the 0.2 target."""
    rng = np.random.default_rng(_ROOT_SEED)
    lp = rng.standard_normal(_ROOT_DRAWS) * _lp_sd(beta_x)

    def prevalence(b0: float) -> float:
        return float(expit(b0 + lp).mean())

    lo, hi = -30.0, 10.0
    if not (prevalence(lo) < _TARGET_PREVALENCE < prevalence(hi)):
        raise FitError("logistic intercept root not bracketed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = prevalence(mid)
        if abs(val - _TARGET_PREVALENCE) <= _ROOT_TOL:
            return mid
        if val < _TARGET_PREVALENCE:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            return mid
    raise FitError("logistic intercept bisection did not converge")


@functools.lru_cache(maxsize=None)
def _solve_weibull_rate(beta_x: float) -> float:
    """Bisection so ~10% of individuals have an event before the censor time."""
    rng = np.random.default_rng(_ROOT_SEED + 1)
    elp = np.exp(rng.standard_normal(_ROOT_DRAWS) * _lp_sd(beta_x))
    t_pow = _CENSOR_TIME**_WEIBULL_KAPPA

    def event_fraction(lam: float) -> float:
        return float(1.0 - np.exp(-lam * t_pow * elp).mean())

    lo, hi = 1e-12, 10.0
    if not (event_fraction(lo) < _TARGET_EVENT_FRACTION < event_fraction(hi)):
        raise FitError("Weibull rate root not bracketed")
    for _ in range(300):
        mid = math.sqrt(lo * hi)  # geometric bisection: lam spans orders of magnitude
        val = event_fraction(mid)
        if abs(val - _TARGET_EVENT_FRACTION) <= _ROOT_TOL:
            return mid
        if val < _TARGET_EVENT_FRACTION:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-12:
            return mid
    raise FitError("Weibull rate bisection did not converge")


def derive_nuisance(scenario: Scenario) -> NuisanceParams:
    """Solve the design's nuisance parameters from its targets.

    sigma2_u = (1 - rho) / rho follows from reliability = Var(X) / Var(W) with
    Var(X) = 1.  The linear residual variance makes the stated R-squared exact
    given Var(bX X + bZ Z) = 2.5; the logistic intercept and Weibull rate are
    solved by Monte-Carlo bisection against their marginal targets.
    """
    rho = scenario.reliability
    sigma2_u = (1.0 - rho) / rho
    if scenario.kind is OutcomeKind.LINEAR:
        r2 = scenario.r_squared
        sigma2 = 2.5 * (1.0 - r2) / r2
        return NuisanceParams(sigma2_u=sigma2_u, sigma2=sigma2)
    if scenario.kind is OutcomeKind.LOGISTIC:
        return NuisanceParams(sigma2_u=sigma2_u, beta0=_solve_logistic_intercept(scenario.beta_x))
    return NuisanceParams(sigma2_u=sigma2_u, lam=_solve_weibull_rate(scenario.beta_x))


def generate_dataset(scenario: Scenario, rep_index: int, nuisance: NuisanceParams | None = None) -> MEDataset:
    """Generate one replicate dataset; fully determined by (seed, rep_index)."""
    if nuisance is None:
        nuisance = derive_nuisance(scenario)
    rng = np.random.default_rng([scenario.seed, rep_index])
    n = scenario.n

    # (X, Z) bivariate normal: means 0, variances 1, covariance 0.25.
    raw = rng.standard_normal((n, 2))
    x = raw[:, 0]
    z = _COV_XZ * raw[:, 0] + math.sqrt(1.0 - _COV_XZ * _COV_XZ) * raw[:, 1]

    sd_u = math.sqrt(nuisance.sigma2_u)
    w1 = x + rng.standard_normal(n) * sd_u
    k = round(scenario.replication_fraction * n)
    subset = rng.choice(n, size=k, replace=False)
    w2 = np.full(n, np.nan)
    w2[subset] = x[subset] + rng.standard_normal(k) * sd_u

    if scenario.kind is OutcomeKind.LINEAR:
        y = x + z + rng.standard_normal(n) * math.sqrt(nuisance.sigma2)
        return make_dataset(w1=w1, w2=w2, z=z, y=y)
    if scenario.kind is OutcomeKind.LOGISTIC:
        prob = expit(nuisance.beta0 + scenario.beta_x * (x + z))
        y = (rng.random(n) < prob).astype(float)
        return make_dataset(w1=w1, w2=w2, z=z, y=y)

    # Survival: Weibull hazard kappa * lam * t^(kappa-1) * exp(lp), censored at 10.
    elp = np.exp(scenario.beta_x * (x + z))
    u = rng.random(n)
    t_event = (-np.log(u) / (nuisance.lam * elp)) ** (1.0 / _WEIBULL_KAPPA)
    event = (t_event <= _CENSOR_TIME).astype(float)
    time = np.minimum(t_event, _CENSOR_TIME)
    return make_dataset(w1=w1, w2=w2, z=z, time=time, event=event)


def reference_priors(kind: OutcomeKind) -> PriorConfig:
    """Priors used by the simulation studies for each outcome kind."""
    kind = OutcomeKind(kind)
    if kind is OutcomeKind.LINEAR:
        return PriorConfig()
    # Mildly informative N(0, 1.38) effect priors for log odds/hazard ratios.
    return PriorConfig(effect_prior_variance=1.38)


def desk_mcmc_config(kind: OutcomeKind, seed: int = 0, **overrides) -> MCMCConfig:
    """Desk-scale sampler settings: 3 chains, 1,000 burn-in, 2,000 main draws."""
    base = dict(n_chains=3, n_burnin=1_000, n_main=2_000, seed=seed)
    base.update(overrides)
    return MCMCConfig(**base)


@dataclass(frozen=True)
class MethodSummary:
    """Monte-Carlo aggregate for one method in one scenario."""

    mean: float
    sd: float
    coverage: float | None
    mc_se_mean: float
    mc_se_coverage: float | None
    n_used: int
    n_failed: int
    n_nonconverged: int
    estimates: list = field(default_factory=list)
    covered: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sd": self.sd,
            "coverage": self.coverage,
            "mc_se_mean": self.mc_se_mean,
            "mc_se_coverage": self.mc_se_coverage,
            "n_used": self.n_used,
            "n_failed": self.n_failed,
            "n_nonconverged": self.n_nonconverged,
            "estimates": [float(v) for v in self.estimates],
            "covered": [None if c is None else bool(c) for c in self.covered],
        }


@dataclass(frozen=True)
class ScenarioResult:
    scenario: Scenario
    truth: float
    methods: dict[str, MethodSummary]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "truth": self.truth,
            "methods": {name: summ.to_dict() for name, summ in self.methods.items()},
        }


def _fit_one_method(method: str, data: MEDataset, scenario: Scenario, rep: int, mcmc: MCMCConfig | None):
    """Returns (estimate, covered, nonconverged) for one replicate and method."""
    spec = OutcomeSpec(kind=scenario.kind)
    truth = scenario.truth
    if method == "naive":
        res = naive_fit(data, spec)
        est = res.flat_estimates()["beta_x"]
        lo, hi = res.intervals["beta_x"]
        return est, bool(lo <= truth <= hi), False
    if method in ("rc", "rc-efficient", "rc-simple"):
        form = "simple" if method == "rc-simple" else "efficient"
        res = fit_rc(data, spec, form=form)
        return res.flat_estimates()["beta_x"], None, False
    if method == "bayes":
        cfg = mcmc or desk_mcmc_config(scenario.kind)
        cfg = replace(cfg, seed=derive_seed(scenario.seed, rep, 0xBA1E5))
        est = BayesCorrection(
            model=scenario.kind.value,
            priors=reference_priors(scenario.kind),
            chains=cfg.n_chains,
            burnin=cfg.n_burnin,
            iters=cfg.n_main,
            rhat_max=cfg.rhat_threshold,
            max_extensions=cfg.max_extensions,
            seed=cfg.seed,
        ).fit(data)
        val = est.estimates_["beta_x"]
        lo, hi = est.intervals_["beta_x"]
        return val, bool(lo <= truth <= hi), not est.converged_
    raise ValueError(f"unknown method {method!r}")


def _replicate_job(args):
    scenario, nuisance, rep, methods, mcmc = args
    data = generate_dataset(scenario, rep, nuisance)
    out = {}
    for method in methods:
        try:
            out[method] = _fit_one_method(method, data, scenario, rep, mcmc)
        except (FitError, ValueError) as exc:
            out[method] = ("failed", str(exc))
    return rep, out


def run_scenario(
    scenario: Scenario,
    methods: "list[str]" = ("rc", "bayes"),
    mcmc: MCMCConfig | None = None,
    n_workers: int = 1,
) -> ScenarioResult:
    """Generate, fit and aggregate one scenario.

    Replicates are independent (their sub-seeds are pure functions of the
    scenario seed and replicate index), so results do not depend on the worker
    count.  Failed replicates are excluded from the aggregates and counted.
    """
    methods = list(methods)
    nuisance = derive_nuisance(scenario)
    jobs = [(scenario, nuisance, rep, methods, mcmc) for rep in range(scenario.reps)]
    if n_workers <= 1:
        results = [_replicate_job(job) for job in jobs]
    else:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_replicate_job, jobs, chunksize=1))
    results.sort(key=lambda item: item[0])

    summaries: dict[str, MethodSummary] = {}
    for method in methods:
        estimates: list[float] = []
        covered: list = []
        n_failed = 0
        n_nonconverged = 0
        for _, per_method in results:
            value = per_method[method]
            if value[0] == "failed":
                n_failed += 1
                continue
            est, cov, noncon = value
            estimates.append(float(est))
            covered.append(cov)
            n_nonconverged += bool(noncon)
        arr = np.asarray(estimates)
        mean = float(arr.mean()) if arr.size else float("nan")
        sd = float(arr.std(ddof=1)) if arr.size > 1 else float("nan")
        mc_se_mean = sd / math.sqrt(arr.size) if arr.size > 1 else float("nan")
        cov_vals = [c for c in covered if c is not None]
        if cov_vals:
            phat = float(np.mean(cov_vals))
            coverage = phat
            mc_se_cov = math.sqrt(phat * (1.0 - phat) / len(cov_vals))
        else:
            coverage = None
            mc_se_cov = None
        summaries[method] = MethodSummary(
            mean=mean,
            sd=sd,
            coverage=coverage,
            mc_se_mean=mc_se_mean,
            mc_se_coverage=mc_se_cov,
            n_used=len(estimates),
            n_failed=n_failed,
            n_nonconverged=n_nonconverged,
            estimates=estimates,
            covered=covered,
        )
    return ScenarioResult(scenario=scenario, truth=scenario.truth, methods=summaries)


# ---------------------------------------------------------------------------
# Table rendering
# ---------------------------------------------------------------------------

_METHOD_LABELS = {"naive": "Naive", "rc": "RC", "rc-simple": "RC (simple)", "bayes": "Bayes mean"}


def _effect_label(kind: OutcomeKind) -> str:
    return "R^2" if kind is OutcomeKind.LINEAR else "beta_X"


def render_table(results: "list[ScenarioResult]", fmt: str = "md", include_mc_se: bool = False) -> str:
    """Render scenario results in the reliability x effect table layout.

    ``md`` gives a markdown table with "mean (SD)" cells; ``csv`` gives the
    same numbers in separate columns.  Values are rounded to 2 decimals.
    """
    if not results:
        return "" if fmt == "csv" else "(no results)\n"
    kind = results[0].scenario.kind
    methods = [m for m in ("naive", "rc", "rc-simple", "bayes") if m in results[0].methods]
    has_coverage = any(
        res.methods[m].coverage is not None for res in results for m in methods
    )

    def fmt2(value) -> str:
        return "" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.2f}"

    if fmt == "csv":
        header = ["reliability", "effect"]
        for m in methods:
            header += [f"{m}_mean", f"{m}_sd"]
            if include_mc_se:
                header += [f"{m}_mc_se"]
        if has_coverage:
            header += ["bayes_ci_coverage"]
            if include_mc_se:
                header += ["coverage_mc_se"]
        lines = [",".join(header)]
        for res in results:
            row = [fmt2(res.scenario.reliability), fmt2(res.scenario.effect)]
            for m in methods:
                summ = res.methods[m]
                row += [fmt2(summ.mean), fmt2(summ.sd)]
                if include_mc_se:
                    row += [fmt2(summ.mc_se_mean)]
            if has_coverage:
                cov = _coverage_cell(res, methods)
                row += [fmt2(cov)]
                if include_mc_se:
                    row += [fmt2(_coverage_se_cell(res, methods))]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    header = ["Reliability", _effect_label(kind)] + [_METHOD_LABELS.get(m, m) for m in methods]
    if has_coverage:
        header += ["Bayes CI"]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    for res in results:
        row = [fmt2(res.scenario.reliability), fmt2(res.scenario.effect)]
        for m in methods:
            summ = res.methods[m]
            cell = f"{fmt2(summ.mean)} ({fmt2(summ.sd)})"
            if include_mc_se and summ.mc_se_mean == summ.mc_se_mean:
                cell += f" [±{fmt2(summ.mc_se_mean)}]"
            row.append(cell)
        if has_coverage:
            row.append(fmt2(_coverage_cell(res, methods)))
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _coverage_cell(res: ScenarioResult, methods: "list[str]"):
    if "bayes" in methods and res.methods["bayes"].coverage is not None:
        return res.methods["bayes"].coverage
    for m in methods:
        if res.methods[m].coverage is not None:
            return res.methods[m].coverage
    return None


def _coverage_se_cell(res: ScenarioResult, methods: "list[str]"):
    if "bayes" in methods:
        return res.methods["bayes"].mc_se_coverage
    for m in methods:
        if res.methods[m].mc_se_coverage is not None:
            return res.methods[m].mc_se_coverage
    return None


# ---------------------------------------------------------------------------
# Scenario-grid configs (TOML or JSON) and result persistence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    scenarios: "list[Scenario]"
    methods: "list[str]"
    mcmc: dict

    def mcmc_config(self, kind: OutcomeKind) -> MCMCConfig:
        base = desk_mcmc_config(kind)
        mapping = {
            "chains": "n_chains",
            "burnin": "n_burnin",
            "iters": "n_main",
            "rhat_max": "rhat_threshold",
            "max_extensions": "max_extensions",
        }
        overrides = {mapping[k]: v for k, v in self.mcmc.items() if k in mapping}
        return replace(base, **overrides) if overrides else base


def load_grid_config(path: str) -> GridConfig:
    """Parse a scenario-grid config from a .toml or .json file.

    The grid is the cross product of ``reliabilities`` with the effect list
    (``r_squared`` for linear, ``beta_x`` otherwise); remaining fields mirror
    :class:`Scenario`.
    """
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        import json

        raw = json.loads(text.decode("utf-8"))
    else:
        try:
            import tomllib as toml_mod  # py311+
        except ModuleNotFoundError:
            import tomli as toml_mod
        raw = toml_mod.loads(text.decode("utf-8"))

    grid = raw.get("grid", raw)
    kind = OutcomeKind(grid["model"])
    reliabilities = grid.get("reliabilities") or [grid["reliability"]]
    if kind is OutcomeKind.LINEAR:
        effects = grid.get("r_squared") or [grid["r2"]]
        effect_key = "r_squared"
    else:
        effects = grid.get("beta_x")
        effect_key = "beta_x"
    if not isinstance(effects, (list, tuple)):
        effects = [effects]
    common = dict(
        kind=kind,
        n=int(grid.get("n", 1_000)),
        replication_fraction=float(grid.get("replication_fraction", 0.10)),
        reps=int(grid.get("reps", 0)),
        seed=int(grid.get("seed", 0)),
    )
    scenarios = [
        Scenario(reliability=float(rho), **{effect_key: float(eff)}, **common)
        for rho in reliabilities
        for eff in effects
    ]
    methods = list(grid.get("methods", ["rc", "bayes"]))
    mcmc = dict(raw.get("mcmc", {}))
    return GridConfig(scenarios=scenarios, methods=methods, mcmc=mcmc)


def results_to_dict(results: "list[ScenarioResult]") -> list:
    return [res.to_dict() for res in results]


def result_from_dict(raw: dict) -> ScenarioResult:
    sc = Scenario(**raw["scenario"])
    methods = {
        name: MethodSummary(
            mean=vals["mean"],
            sd=vals["sd"],
            coverage=vals["coverage"],
            mc_se_mean=vals["mc_se_mean"],
            mc_se_coverage=vals["mc_se_coverage"],
            n_used=vals["n_used"],
            n_failed=vals["n_failed"],
            n_nonconverged=vals["n_nonconverged"],
            estimates=list(vals.get("estimates", [])),
            covered=list(vals.get("covered", [])),
        )
        for name, vals in raw["methods"].items()
    }
    return ScenarioResult(scenario=sc, truth=raw["truth"], methods=methods)
