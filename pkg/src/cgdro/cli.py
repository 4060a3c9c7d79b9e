"""Command-line entry point.

Subcommands: fit (estimate the robust model or a baseline), infer
(confidence interval for one coordinate), simulate (write synthetic
datasets), bench (replication studies as tidy CSV). Exit codes: 0 success,
1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bench import coverage_study, mixture_sweep, rate_study, write_rows
from .data_model import (
    NumericalError,
    ProblemConfig,
    ValidationError,
    load_config,
    load_labeled,
    load_unlabeled,
    result_to_dict,
    save_labeled,
    save_results,
    save_unlabeled,
)
from .datagen import SETTINGS, gen_problem, make_spec
from .inference import infer as run_infer
from .solver import cgdro_fit, erm_pooled, group_dro
from .data_model import FitResult


def _build_config(config_path, **overrides) -> ProblemConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if config_path:
        return load_config(config_path, **overrides)
    return ProblemConfig(**overrides)


@click.group()
@click.version_option(__version__, prog_name="cgdro")
@click.option("--json-errors", is_flag=True, default=False,
              help="Emit machine-readable errors on stderr.")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Worker count for replication/draw tasks (results are "
                   "identical for any value).")
@click.pass_context
def cli(ctx, json_errors, workers):
    """Distributionally robust multi-source classification under covariate shift."""
    if workers < 1:
        raise ValidationError("--workers must be >= 1")
    ctx.obj = {"json_errors": json_errors, "workers": workers}


@cli.command()
@click.option("--sources", "sources_path", required=True,
              type=click.Path(), help="CSV of labeled source data.")
@click.option("--target", "target_path", required=True,
              type=click.Path(), help="CSV of unlabeled target covariates.")
@click.option("--method", type=click.Choice(["cgdro", "gdro", "erm"]),
              default="cgdro", show_default=True)
@click.option("--no-shift", is_flag=True, default=False,
              help="Assume the target covariate law matches the sources.")
@click.option("--eta", type=float, default=None, help="Learning-rate scale.")
@click.option("--max-iter", type=int, default=None)
@click.option("--tol", type=float, default=None, help="Duality-gap tolerance.")
@click.option("--ridge", type=float, default=None,
              help="Fixed nuisance ridge penalty (default: cross-validated).")
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="TOML/JSON config file; flags override its values.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def fit(ctx, sources_path, target_path, method, no_shift, eta, max_iter,
        tol, ridge, seed, config_path, out_path):
    """Fit a model and write the result JSON."""
    config = _build_config(config_path, eta=eta, max_iter=max_iter, tol=tol,
                           ridge=ridge, seed=seed,
                           no_shift=no_shift or None,
                           workers=ctx.obj["workers"])
    sources = load_labeled(sources_path)
    target = load_unlabeled(target_path)
    if method == "cgdro":
        result, _, _ = cgdro_fit(sources, target, config)
    elif method == "gdro":
        result = group_dro(sources, config)
    else:
        theta = erm_pooled(sources)
        result = FitResult(theta=theta, gamma=np.ones(1), gap_trace=(),
                           gap_iterations=(), iterations=0, converged=True)
    save_results(result, out_path)
    click.echo(f"wrote {out_path}")


@cli.command()
@click.option("--sources", "sources_path", required=True, type=click.Path())
@click.option("--target", "target_path", required=True, type=click.Path())
@click.option("--coord", type=int, default=0, show_default=True,
              help="0-based coordinate of theta to cover.")
@click.option("--alpha", type=float, default=None)
@click.option("--alpha0", type=float, default=None)
@click.option("--eta0", type=float, default=None)
@click.option("--M", "m_draws", type=int, default=None)
@click.option("--no-shift", is_flag=True, default=False)
@click.option("--ridge", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def infer(ctx, sources_path, target_path, coord, alpha, alpha0, eta0,
          m_draws, no_shift, ridge, seed, config_path, out_path):
    """Confidence interval for one coordinate; writes result JSON."""
    config = _build_config(config_path, alpha=alpha, alpha0=alpha0, eta0=eta0,
                           M=m_draws, ridge=ridge, seed=seed,
                           no_shift=no_shift or None,
                           workers=ctx.obj["workers"])
    sources = load_labeled(sources_path)
    target = load_unlabeled(target_path)
    result = run_infer(sources, target, config, coord=coord)
    save_results(result, out_path)
    click.echo(f"wrote {out_path} (reject_zero={result.reject_zero})")


@cli.command()
@click.option("--setting", type=click.Choice(SETTINGS), required=True)
@click.option("--delta", type=float, default=0.0, show_default=True)
@click.option("--sigma", type=float, default=0.3, show_default=True)
@click.option("--d", type=int, default=None, help="Override covariate dimension.")
@click.option("--n", type=int, default=500, show_default=True,
              help="Samples per source.")
@click.option("--N", "n_target", type=int, default=2000, show_default=True)
@click.option("--reps", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-prefix", type=str, default="sim", show_default=True)
def simulate(setting, delta, sigma, d, n, n_target, reps, seed, out_prefix):
    """Write per-replication source/target CSV files."""
    spec = make_spec(setting, seed=seed, delta=delta, sigma=sigma, d=d)
    for rep in range(reps):
        sources, target = gen_problem(spec, n, n_target, seed=int(seed) + rep)
        src_path = f"{out_prefix}_rep{rep}_sources.csv"
        tgt_path = f"{out_prefix}_rep{rep}_target.csv"
        save_labeled(sources, src_path)
        save_unlabeled(target, tgt_path)
        click.echo(f"wrote {src_path} {tgt_path}")


@cli.command()
@click.option("--study", type=click.Choice(["mixture", "rate", "coverage"]),
              required=True)
@click.option("--setting", type=str, default=None,
              help="DGP setting (defaults per study).")
@click.option("--mixture-grid", type=str, default="0.5",
              help="Comma-separated first-source shares for the mixture study.")
@click.option("--n-grid", type=str, default="200,400,800,1600",
              help="Comma-separated per-source sizes for the rate study.")
@click.option("--n", type=int, default=300, show_default=True)
@click.option("--N", "n_target", type=int, default=3000, show_default=True)
@click.option("--reps", type=int, default=50, show_default=True)
@click.option("--delta", type=float, default=0.0, show_default=True)
@click.option("--d", type=int, default=None)
@click.option("--M", "m_draws", type=int, default=300, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def bench(study, setting, mixture_grid, n_grid, n, n_target, reps, delta, d,
          m_draws, seed, out_path):
    """Run a replication study and write tidy CSV."""
    if study == "mixture":
        mixtures = [float(v) for v in mixture_grid.split(",") if v]
        rows = mixture_sweep(setting or "FIG2", mixtures=mixtures, seed=seed)
    elif study == "rate":
        grid = [int(v) for v in n_grid.split(",") if v]
        rows = rate_study(setting or "S1", n_grid=grid, reps=reps,
                          seed=seed, d=d, N=n_target if n_target else 10_000)
    else:
        rows = coverage_study(setting or "S3", delta=delta, d=d or 10, n=n,
                              N=n_target, M=m_draws, reps=reps, seed=seed)
    write_rows(rows, out_path)
    click.echo(f"wrote {out_path} ({len(rows)} rows)")


def main(argv=None):
    json_errors = "--json-errors" in (argv if argv is not None else sys.argv[1:])

    def report(kind, exc, code):
        if json_errors:
            sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
        else:
            sys.stderr.write(f"cgdro: {kind}: {exc}\n")
        return code

    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except ValidationError as exc:
        return report("validation", exc, 1)
    except click.UsageError as exc:
        return report("validation", exc, 1)
    except click.exceptions.Exit as exc:  # --version / --help
        return int(exc.exit_code)
    except click.exceptions.Abort:
        return 1
    except NumericalError as exc:
        return report("numerical", exc, 2)
    except OSError as exc:
        return report("io", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
