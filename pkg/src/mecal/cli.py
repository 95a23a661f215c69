"""Command-line front end.

Three subcommands: ``fit`` runs one or more analysis methods on a CSV
dataset, ``simulate`` executes a scenario grid from a TOML/JSON config, and
``report`` renders persisted simulation results as a table.

Exit codes: 0 success, 2 input/config error, 3 numerical or fit error.
MCMC non-convergence is reported in-band (flag plus warning), not a failure.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
import time

from . import __version__
from .bayes import MCMCConfig, PriorConfig, run_mcmc
from .calibration import bootstrap_rc, fit_rc, naive_fit
from .dataset import DatasetFormatError, OutcomeSpec, read_csv, validate_dataset
from .fitters import FitError
from .results import FitResult
from .simulate import (
    load_grid_config,
    render_table,
    result_from_dict,
    results_to_dict,
    run_scenario,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

_METHOD_CHOICES = ("naive", "rc-simple", "rc-efficient", "bayes")


def _default_threads() -> int:
    env = os.environ.get("MECAL_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            pass
    return 1


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="root seed; omitted = fresh entropy, echoed in output")
    parser.add_argument("--threads", type=int, default=_default_threads(), help="worker processes (env MECAL_THREADS)")
    parser.add_argument("--out", default="-", help="output path ('-' = stdout)")
    parser.add_argument("--format", choices=("json", "csv", "md"), default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mecal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit analysis methods to a CSV dataset")
    p_fit.add_argument("--data", required=True, help="CSV dataset path")
    p_fit.add_argument("--model", required=True, choices=("linear", "logistic", "cox", "weibull"))
    p_fit.add_argument("--method", action="append", choices=_METHOD_CHOICES, help="repeatable; default naive")
    p_fit.add_argument("--binary-z", action="append", default=[], help="covariate column (e.g. z2) that is binary and may be missing")
    p_fit.add_argument("--include-shift", action="store_true", help="model a systematic shift of the second measurement")
    p_fit.add_argument("--prior-beta-var", type=float, default=None, help="normal prior variance for coefficients")
    p_fit.add_argument("--prior-beta-var-informative", action="store_true", help="N(0, 1.38) prior on the effect coefficients")
    p_fit.add_argument("--gp-c", type=float, default=None, help="Gamma-process confidence (Cox)")
    p_fit.add_argument("--gp-rate", type=float, default=None, help="Gamma-process prior event-rate guess (Cox)")
    p_fit.add_argument("--chains", type=int, default=None)
    p_fit.add_argument("--burnin", type=int, default=1000)
    p_fit.add_argument("--iters", type=int, default=5000)
    p_fit.add_argument("--rhat-max", type=float, default=1.05)
    p_fit.add_argument("--boot-reps", type=int, default=0, help="bootstrap replicates for RC intervals (0 = none)")
    _add_common(p_fit)

    p_sim = sub.add_parser("simulate", help="run a scenario grid from a TOML/JSON config")
    p_sim.add_argument("--config", required=True, help="scenario grid config path")
    p_sim.add_argument("--reps", type=int, default=None, help="override Monte-Carlo replications per scenario")
    p_sim.add_argument("--chains", type=int, default=None)
    p_sim.add_argument("--burnin", type=int, default=None)
    p_sim.add_argument("--iters", type=int, default=None)
    p_sim.add_argument("--rhat-max", type=float, default=None)
    _add_common(p_sim)

    p_rep = sub.add_parser("report", help="render persisted simulation results")
    p_rep.add_argument("--results", required=True, help="result JSON written by `mecal simulate`")
    p_rep.add_argument("--mc-se", action="store_true", help="include Monte-Carlo standard error columns")
    _add_common(p_rep)
    return parser


def _write_out(text: str, out: str) -> None:
    if out == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = secrets.randbits(32)
    print(f"mecal: no --seed given; using entropy seed {seed}", file=sys.stderr)
    return seed


def _provenance(seed: int, args) -> dict:
    return {
        "seed": seed,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_time_s": None,
        "threads": args.threads,
    }


def _fit_results_text(results: "list[FitResult]", fmt: str, provenance: dict) -> str:
    if fmt == "json":
        return json.dumps({"provenance": provenance, "fits": [r.to_dict() for r in results]}, indent=2, sort_keys=True) + "\n"
    names: list[str] = []
    for res in results:
        for name in res.flat_estimates():
            if name not in names:
                names.append(name)
    if fmt == "csv":
        lines = ["method,parameter,estimate,lower,upper"]
        for res in results:
            flat = res.flat_estimates()
            for name in names:
                if name not in flat:
                    continue
                lo, hi = res.intervals.get(name, (None, None))
                cell = lambda v: "" if v is None else f"{v:.6g}"
                lines.append(f"{res.method},{name},{cell(flat[name])},{cell(lo)},{cell(hi)}")
        return "\n".join(lines) + "\n"
    lines = ["| method | parameter | estimate | 95% interval |", "|---|---|---|---|"]
    for res in results:
        flat = res.flat_estimates()
        for name in names:
            if name not in flat:
                continue
            if name in res.intervals:
                lo, hi = res.intervals[name]
                interval = f"({lo:.3f}, {hi:.3f})"
            else:
                interval = ""
            lines.append(f"| {res.method} | {name} | {flat[name]:.3f} | {interval} |")
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    seed = _resolve_seed(args)
    methods = args.method or ["naive"]
    spec = OutcomeSpec(kind=args.model)
    try:
        data = read_csv(args.data, kind=args.model, binary_z=args.binary_z)
    except DatasetFormatError as exc:
        for msg in exc.messages:
            print(f"mecal fit: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"mecal fit: cannot read {args.data}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    violations = validate_dataset(data, spec, allow_empty_measurements="bayes" in methods)
    if violations:
        for msg in violations:
            print(f"mecal fit: {msg}", file=sys.stderr)
        return EXIT_INPUT

    prior_kwargs = {}
    if args.prior_beta_var is not None:
        prior_kwargs["beta_prior_variance"] = args.prior_beta_var
    if args.prior_beta_var_informative:
        prior_kwargs["effect_prior_variance"] = 1.38
    if args.gp_c is not None:
        prior_kwargs["gp_c"] = args.gp_c
    if args.gp_rate is not None:
        prior_kwargs["gp_rate"] = args.gp_rate
    priors = PriorConfig(**prior_kwargs)

    start = time.monotonic()
    results: list[FitResult] = []
    try:
        for method in methods:
            if method == "naive":
                results.append(naive_fit(data, spec))
            elif method in ("rc-simple", "rc-efficient"):
                form = method.split("-", 1)[1]
                if args.boot_reps:
                    results.append(
                        bootstrap_rc(data, spec, form=form, b=args.boot_reps, seed=seed, include_shift=args.include_shift)
                    )
                else:
                    results.append(fit_rc(data, spec, form=form, include_shift=args.include_shift))
            else:
                cfg = MCMCConfig.default_for(
                    spec.kind,
                    **_filter_none(
                        n_chains=args.chains,
                        n_burnin=args.burnin,
                        n_main=args.iters,
                        rhat_threshold=args.rhat_max,
                        seed=seed,
                        n_workers=args.threads,
                    ),
                )
                mcmc = run_mcmc(data, spec, priors=priors, cfg=cfg, include_shift=args.include_shift)
                if not mcmc.converged:
                    print(
                        "mecal fit: warning: chains did not converge "
                        f"(max Rhat {max(mcmc.rhat.values()):.3f}); results flagged",
                        file=sys.stderr,
                    )
                results.append(mcmc.to_fit_result())
    except FitError as exc:
        print(f"mecal fit: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    provenance = _provenance(seed, args)
    provenance["wall_time_s"] = round(time.monotonic() - start, 3)
    _write_out(_fit_results_text(results, args.format, provenance), args.out)
    return EXIT_OK


def _filter_none(**kwargs) -> dict:
    return {k: v for k, v in kwargs.items() if v is not None}


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args)
    try:
        grid = load_grid_config(args.config)
    except (OSError, KeyError, ValueError) as exc:
        print(f"mecal simulate: bad config: {exc}", file=sys.stderr)
        return EXIT_INPUT

    start = time.monotonic()
    results = []
    for scenario in grid.scenarios:
        overrides: dict = {}
        if args.reps is not None:
            overrides["reps"] = args.reps
        if args.seed is not None or scenario.seed == 0:
            overrides["seed"] = seed
        if overrides:
            from dataclasses import replace as dc_replace

            scenario = dc_replace(scenario, **overrides)
        mcmc = grid.mcmc_config(scenario.kind)
        mcmc_overrides = _filter_none(
            n_chains=args.chains, n_burnin=args.burnin, n_main=args.iters, rhat_threshold=args.rhat_max
        )
        if mcmc_overrides:
            from dataclasses import replace as dc_replace

            mcmc = dc_replace(mcmc, **mcmc_overrides)
        results.append(run_scenario(scenario, methods=grid.methods, mcmc=mcmc, n_workers=args.threads))

    provenance = _provenance(seed, args)
    provenance["wall_time_s"] = round(time.monotonic() - start, 3)
    payload = {"provenance": provenance, "results": results_to_dict(results)}
    if args.format == "json":
        _write_out(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    else:
        _write_out(render_table(results, fmt=args.format), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        with open(args.results, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        results = [result_from_dict(raw) for raw in payload.get("results", [])]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"mecal report: cannot read results: {exc}", file=sys.stderr)
        return EXIT_INPUT
    fmt = "md" if args.format == "json" else args.format
    _write_out(render_table(results, fmt=fmt, include_mc_se=args.mc_se), args.out)
    return EXIT_OK


def main(argv: "list[str] | None" = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"fit": cmd_fit, "simulate": cmd_simulate, "report": cmd_report}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
