"""Chain containers, the Gelman-Rubin diagnostic and posterior summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..calibration import percentile_interval
from ..results import FitResult, ParamVector

__all__ = [
    "ChainResult",
    "MCMCResult",
    "ParamSummary",
    "compute_rhat",
    "posterior_summary",
]


@dataclass(frozen=True)
class ChainResult:
    """Draws and sampler bookkeeping for one chain (main phase only)."""

    draws: dict[str, np.ndarray]
    acceptance_rates: dict[str, float]
    proposal_scales: dict[str, float]
    x_draws: np.ndarray | None = None  # (n_kept, n) when latent draws are recorded
    dh0_draws: np.ndarray | None = None  # (n_iter, n_event_times) when recorded

    def __post_init__(self) -> None:
        lengths = {len(v) for v in self.draws.values()}
        if len(lengths) > 1:
            raise ValueError(f"draw vectors must share a length, got {sorted(lengths)}")
        for name, rate in self.acceptance_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"acceptance rate for {name!r} outside [0, 1]: {rate}")

    @property
    def n_draws(self) -> int:
        return len(next(iter(self.draws.values()))) if self.draws else 0


def compute_rhat(chains: "list[np.ndarray]", split: bool = False) -> float:
    """Classic Gelman-Rubin potential scale reduction for one parameter.

    sqrt((n-1)/n + B/(n W)) with B/n the variance of the chain means and W the
    mean within-chain variance.  ``split`` halves each chain first (off by
    default to match the classic formula).
    """
    arrays = [np.asarray(c, dtype=float) for c in chains]
    if len(arrays) < 2:
        raise ValueError("Rhat needs at least two chains")
    if split:
        halves = []
        for arr in arrays:
            mid = len(arr) // 2
            halves += [arr[:mid], arr[mid : 2 * mid]]
        arrays = halves
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ValueError("chains must have equal lengths")
    if n < 2:
        raise ValueError("chains are too short to diagnose (need >= 2 draws)")
    within = float(np.mean([np.var(a, ddof=1) for a in arrays]))
    means = np.array([a.mean() for a in arrays])
    b_over_n = float(np.var(means, ddof=1))
    if within == 0.0:
        return np.inf if b_over_n > 0 else float(np.sqrt((n - 1) / n))
    var_plus = (n - 1) / n * within + b_over_n
    return float(np.sqrt(var_plus / within))


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    lower: float
    upper: float
    asymmetric: bool


def posterior_summary(chains: "list[ChainResult]", level: float = 0.95) -> dict[str, ParamSummary]:
    """Pooled posterior mean, SD and percentile credible interval per parameter.

    The interval endpoints are order statistics of the pooled draws.  The
    ``asymmetric`` flag marks intervals whose two half-widths around the mean
    differ by more than 5% of the interval length.
    """
    if not chains:
        raise ValueError("no chains to summarize")
    names = chains[0].draws.keys()
    out: dict[str, ParamSummary] = {}
    for name in names:
        pooled = np.concatenate([c.draws[name] for c in chains])
        mean = float(pooled.mean())
        sd = float(pooled.std(ddof=1)) if len(pooled) > 1 else 0.0
        lo, hi = percentile_interval(pooled, level)
        width = hi - lo
        asym = bool(abs((hi - mean) - (mean - lo)) > 0.05 * width) if width > 0 else False
        out[name] = ParamSummary(mean=mean, sd=sd, lower=lo, upper=hi, asymmetric=asym)
    return out


@dataclass(frozen=True)
class MCMCResult:
    """All chains plus the convergence report."""

    chains: list[ChainResult]
    rhat: dict[str, float]
    converged: bool
    n_extensions: int
    monitored: list[str]
    kind: str
    p: int
    include_shift: bool

    def summary(self, level: float = 0.95) -> dict[str, ParamSummary]:
        return posterior_summary(self.chains, level)

    def pooled(self, name: str) -> np.ndarray:
        return np.concatenate([c.draws[name] for c in self.chains])

    def to_fit_result(self, level: float = 0.95) -> FitResult:
        summ = self.summary(level)
        beta_z = np.array([summ[f"beta_z{j + 1}"].mean for j in range(self.p)])
        gamma_z = np.array([summ[f"gamma_z{j + 1}"].mean for j in range(self.p)])
        alpha: dict[int, np.ndarray] = {}
        alpha_keys: dict[int, list[str]] = {}
        for name in summ:
            if name.startswith("alpha_z"):
                col = int(name[len("alpha_z") :].split("_")[0]) - 1
                alpha_keys.setdefault(col, []).append(name)
        for col, keys in alpha_keys.items():
            keys.sort(key=lambda s: int(s.rsplit("_", 1)[1]))
            alpha[col] = np.array([summ[k].mean for k in keys])
        estimates = ParamVector(
            beta0=summ["beta0"].mean if "beta0" in summ else None,
            beta_x=summ["beta_x"].mean,
            beta_z=beta_z,
            sigma2=summ["sigma2"].mean if "sigma2" in summ else None,
            shape_r=summ["shape_r"].mean if "shape_r" in summ else None,
            gamma0=summ["gamma0"].mean,
            gamma_z=gamma_z,
            sigma2_x_given_z=summ["sigma2_x_given_z"].mean,
            sigma2_u=summ["sigma2_u"].mean,
            nu=summ["nu"].mean if "nu" in summ else None,
            alpha=alpha,
        )
        intervals = {name: (s.lower, s.upper) for name, s in summ.items()}
        acceptance = {}
        for c in self.chains:
            for k, v in c.acceptance_rates.items():
                acceptance.setdefault(k, []).append(v)
        diagnostics = {
            "rhat": dict(self.rhat),
            "converged": self.converged,
            "n_extensions": self.n_extensions,
            "n_chains": len(self.chains),
            "n_draws_per_chain": self.chains[0].n_draws if self.chains else 0,
            "acceptance_rates": {k: float(np.mean(v)) for k, v in acceptance.items()},
            "asymmetric_intervals": sorted(n for n, s in summ.items() if s.asymmetric),
        }
        return FitResult(
            method="bayes",
            estimates=estimates,
            intervals=intervals,
            level=level,
            diagnostics=diagnostics,
        )

    def export_csv(self, path_or_buf, include_x: bool = False) -> None:
        """Write draws as CSV: one row per iteration, chain id column first."""
        names = list(self.chains[0].draws.keys())
        x_cols: list[str] = []
        if include_x and self.chains[0].x_draws is not None:
            x_cols = [f"x{i + 1}" for i in range(self.chains[0].x_draws.shape[1])]

        def rows():
            for chain_id, chain in enumerate(self.chains):
                n_draws = chain.n_draws
                if include_x and chain.x_draws is not None and len(chain.x_draws):
                    thin = max(n_draws // len(chain.x_draws), 1)
                else:
                    thin = 0
                for it in range(n_draws):
                    row = [str(chain_id), str(it)]
                    row += [repr(float(chain.draws[name][it])) for name in names]
                    if x_cols:
                        if thin and it % thin == 0 and it // thin < len(chain.x_draws):
                            row += [repr(float(v)) for v in chain.x_draws[it // thin]]
                        else:
                            row += ["" for _ in x_cols]
                    yield row

        header = ["chain", "iteration"] + names + x_cols
        if hasattr(path_or_buf, "write"):
            writer = csv.writer(path_or_buf, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows())
        else:
            with open(path_or_buf, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows())
