"""Replication studies: mixture sweeps, sample-size slopes, and coverage.

Every study emits tidy rows (setting, param, rep, method, metric, value)
that the `bench` CLI subcommand writes as CSV; the same functions back the
acceptance checks.
"""

from __future__ import annotations

import csv
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .data_model import ProblemConfig
from .datagen import gen_source, gen_target, make_spec
from .inference import infer
from .metrics import estimation_error, non_reducible_loss, population_theta, worst_case_loss
from .solver import cgdro_fit, erm_pooled, group_dro


def _row(setting, param, rep, method, metric, value):
    return {
        "setting": setting,
        "param": param,
        "rep": rep,
        "method": method,
        "metric": metric,
        "value": float(value),
    }


def write_rows(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["setting", "param", "rep", "method", "metric", "value"])
        writer.writeheader()
        writer.writerows(rows)


def mixture_sweep(setting: str = "FIG2", mixtures: Sequence[float] = (0.5,),
                  total_n: int = 4000, N: int = 10_000, seed: int = 0,
                  config: Optional[ProblemConfig] = None) -> list:
    """Worst-case-loss comparison of the robust fit vs. baselines while the
    share of samples from the first source varies."""
    config = config or ProblemConfig()
    spec = make_spec(setting, seed=seed)
    rows = []
    for mix in mixtures:
        n1 = int(round(mix * total_n))
        sizes = [n1, total_n - n1] if spec.L == 2 else [total_n // spec.L] * spec.L
        rep_seed = int(seed) + int(round(1000 * mix))
        sources = [gen_source(spec, l, sizes[l], rep_seed) for l in range(spec.L)]
        target = gen_target(spec, N, rep_seed)
        fits = {
            "cgdro": cgdro_fit(sources, target, config, K=spec.K)[0].theta,
            "gdro": group_dro(sources, config, K=spec.K).theta,
            "erm": erm_pooled(sources, K=spec.K),
        }
        for method, theta in fits.items():
            wc, per = worst_case_loss(theta, spec, target.x)
            rows.append(_row(setting, mix, 0, method, "worst_case_loss", wc))
            for l, v in enumerate(per):
                rows.append(_row(setting, mix, 0, method, f"loss_source_{l + 1}", v))
        for l in range(spec.L):
            nr = non_reducible_loss(spec, l, target.x, seed=rep_seed)
            rows.append(_row(setting, mix, 0, "oracle", f"non_reducible_{l + 1}", nr))
    return rows


def rate_study(setting: str = "S1", n_grid: Sequence[int] = (200, 400, 800, 1600),
               N: int = 10_000, reps: int = 50, seed: int = 0, d: Optional[int] = None,
               config: Optional[ProblemConfig] = None,
               theta_ref: Optional[np.ndarray] = None) -> list:
    """Estimation error against the large-sample reference across n."""
    config = config or ProblemConfig(ridge=1e-2, eta=0.2)
    spec = make_spec(setting, seed=seed, d=d)
    if theta_ref is None:
        theta_ref = population_theta(spec, seed=seed, config=config)
    rows = []
    for n in n_grid:
        for rep in range(reps):
            rep_seed = int(seed) + 100_000 * rep + int(n)
            sources = [gen_source(spec, l, n, rep_seed) for l in range(spec.L)]
            target = gen_target(spec, N, rep_seed)
            result, _, _ = cgdro_fit(sources, target, config, K=spec.K)
            err = estimation_error(result.theta, theta_ref, spec.d)
            rows.append(_row(setting, n, rep, "cgdro", "est_error", err))
    return rows


def fit_loglog_slope(rows, metric="est_error") -> float:
    """Least-squares slope of log mean(metric) against log param."""
    by_param = {}
    for r in rows:
        if r["metric"] == metric:
            by_param.setdefault(r["param"], []).append(r["value"])
    params = sorted(by_param)
    logx = np.log([float(p) for p in params])
    logy = np.log([np.mean(by_param[p]) for p in params])
    return float(np.polyfit(logx, logy, 1)[0])


def coverage_study(setting: str = "S3", delta: float = 0.0, d: int = 10,
                   n: int = 300, N: int = 3000, M: int = 300, reps: int = 100,
                   alpha: float = 0.05, alpha0: float = 0.01, seed: int = 0,
                   coord: int = 0, ridge: Optional[float] = 1e-2,
                   theta_ref: Optional[np.ndarray] = None) -> list:
    """Union-CI coverage of one coordinate plus a naive-normality diagnostic.

    The diagnostic builds, after the fact, a z-interval around each
    replication's point estimate using the across-replication standard
    error — the interval a practitioner would use if the estimator were
    asymptotically normal, which it is not in the boundary regimes.
    """
    spec = make_spec(setting, seed=seed, delta=delta, d=d)
    if theta_ref is None:
        theta_ref = population_theta(spec, seed=seed,
                                     config=ProblemConfig(ridge=1e-3))
    truth = float(theta_ref[coord])
    rows = []
    theta_hats = []
    for rep in range(reps):
        rep_seed = int(seed) + 50_000 * (rep + 1)
        rep_config = ProblemConfig(alpha=alpha, alpha0=alpha0, M=M,
                                   ridge=ridge, seed=rep_seed, eta=0.2)
        sources = [gen_source(spec, l, n, rep_seed) for l in range(spec.L)]
        target = gen_target(spec, N, rep_seed)
        res = infer(sources, target, rep_config, coord=coord)
        covered = any(lo <= truth <= hi for lo, hi in res.ci)
        width = sum(hi - lo for lo, hi in res.ci)
        theta_hats.append(float(res.theta[coord]))
        rows.append(_row(setting, delta, rep, "cgdro", "covered", covered))
        rows.append(_row(setting, delta, rep, "cgdro", "ci_width", width))
        rows.append(_row(setting, delta, rep, "cgdro", "theta_coord", res.theta[coord]))
    # Naive normality diagnostic from the replication spread.
    se = float(np.std(theta_hats, ddof=1))
    z = norm.ppf(1.0 - alpha / 2.0)
    for rep, th in enumerate(theta_hats):
        naive_cov = abs(th - truth) <= z * se
        rows.append(_row(setting, delta, rep, "normality", "covered", naive_cov))
        rows.append(_row(setting, delta, rep, "normality", "ci_width", 2 * z * se))
    return rows


def coverage_rate(rows, method="cgdro") -> float:
    vals = [r["value"] for r in rows
            if r["method"] == method and r["metric"] == "covered"]
    return float(np.mean(vals))


def mean_width(rows, method="cgdro") -> float:
    vals = [r["value"] for r in rows
            if r["method"] == method and r["metric"] == "ci_width"]
    return float(np.mean(vals))
