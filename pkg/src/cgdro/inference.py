"""Perturbation-based confidence intervals for single coordinates.

The moment estimates are resampled from their estimated Gaussian law,
extreme draws are filtered out, each kept draw yields a re-weighted
estimator with a plug-in z-interval, and the final confidence set is the
union of those intervals. The union stays valid even when the weight
estimate sits on the simplex boundary or sources are nearly collinear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .data_model import (
    InferenceResult,
    NumericalError,
    ProblemConfig,
    UnlabeledDataset,
    ValidationError,
)
from .moments import MomentSet, psd_project, stacked_outer, empirical_cov
from .solver import CgdroObjective, cgdro_fit, grad_s_hat, hess_s_hat, softmax_p

VAR_FLOOR = 1e-12
KKT_TOL = 1e-9
PG_CAP = 10_000


@dataclass(frozen=True)
class PerturbedDraw:
    """One resampled moment matrix and, if kept, its downstream quantities."""

    m: int
    mu_samples: np.ndarray  # (L, dK)
    kept: bool
    gamma_m: Optional[np.ndarray] = None
    theta_m: Optional[np.ndarray] = None
    v_m: Optional[np.ndarray] = None
    interval: Optional[tuple] = None


def _cov_factor(v: np.ndarray) -> np.ndarray:
    """Matrix square root for Gaussian sampling; exact zeros stay zero."""
    if not np.any(v):
        return np.zeros_like(v)
    try:
        return np.linalg.cholesky(v + VAR_FLOOR * np.eye(v.shape[0]))
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (v + v.T))
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_perturbed_moments(moments: MomentSet, M: int, seed: int) -> np.ndarray:
    """M Gaussian draws around each mu^(l); returns shape (M, L, dK).

    Draw m uses its own random stream derived from (seed, m), so any subset
    of draws can be regenerated independently of the others.
    """
    L = moments.L
    dim = moments.d * moments.K
    factors = [_cov_factor(v) for v in moments.cov_hat]
    out = np.empty((M, L, dim))
    for m in range(M):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7, m]))
        for l in range(L):
            z = rng.standard_normal(dim)
            out[m, l] = moments.mu_hat[l] + factors[l] @ z
    return out


def filter_indices(draws: np.ndarray, moments: MomentSet,
                   alpha0: float, eta0: float) -> np.ndarray:
    """Indices of draws whose worst standardized deviation stays in-bounds.

    The per-coordinate scale is sqrt(V_jj + 1/n_l) and the bound is
    (1 + eta0) times the z-quantile at level alpha0 / (dK L).
    """
    M, L, dim = draws.shape
    z = norm.ppf(1.0 - alpha0 / (dim * L))
    bound = (1.0 + eta0) * z
    scales = np.stack([
        np.sqrt(np.diag(moments.cov_hat[l]) + 1.0 / moments.n_per_source[l])
        for l in range(L)
    ])  # (L, dim)
    centers = np.stack(moments.mu_hat)  # (L, dim)
    dev = np.abs(draws - centers) / scales
    return np.flatnonzero(dev.max(axis=(1, 2)) <= bound)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    tau = css[rho - 1] / rho
    return np.clip(v - tau, 0.0, None)


def _kkt_residual(gamma: np.ndarray, q: np.ndarray) -> float:
    """Fixed-point residual of the projected-gradient map (minimization)."""
    return float(np.max(np.abs(gamma - project_simplex(gamma - q))))


def _active_set_polish(A: np.ndarray, b: np.ndarray, gamma: np.ndarray):
    """Equality-constrained solve on the active support of gamma.

    Solves min 1/2 g'Ag + b'g subject to sum(g_S) = 1, g off-support = 0,
    and returns the refined point if it is feasible and optimal; None
    otherwise.
    """
    L = len(gamma)
    support = gamma > 1e-12
    s = int(support.sum())
    if s == 0:
        return None
    As = A[np.ix_(support, support)]
    bs = b[support]
    kkt = np.zeros((s + 1, s + 1))
    kkt[:s, :s] = As
    kkt[:s, s] = 1.0
    kkt[s, :s] = 1.0
    rhs = np.r_[-bs, 1.0]
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    g_s, nu = sol[:s], sol[s]
    if g_s.min() < 0:
        return None
    out = np.zeros(L)
    out[support] = g_s
    # Off-support coordinates must not offer descent: q_j + nu >= 0.
    q = A @ out + b
    if np.any(q[~support] + nu < -KKT_TOL):
        return None
    out = out / out.sum()
    return out


def solve_gamma_m(u_m: np.ndarray, theta_hat: np.ndarray,
                  hess: np.ndarray, grad_s: np.ndarray) -> np.ndarray:
    """Maximize the closed-form perturbed objective over the simplex.

    F(gamma) = -1/2 (U_m gamma + g)' H^{-1} (U_m gamma + g) + theta' U_m gamma,
    a concave quadratic; solved by projected gradient from the uniform start
    with an active-set polish, to KKT residual <= 1e-9.
    """
    L = u_m.shape[1]
    if L == 1:
        return np.ones(1)
    jitter = VAR_FLOOR * np.eye(hess.shape[0])
    hinv_u = np.linalg.solve(hess + jitter, u_m)
    A = u_m.T @ hinv_u
    A = 0.5 * (A + A.T)
    b = hinv_u.T @ grad_s - u_m.T @ theta_hat
    lip = max(float(np.linalg.eigvalsh(A)[-1]), 1e-12)
    step = 1.0 / lip
    gamma = np.full(L, 1.0 / L)
    for _ in range(PG_CAP):
        q = A @ gamma + b
        nxt = project_simplex(gamma - step * q)
        gamma = nxt
        if _kkt_residual(gamma, A @ gamma + b) <= KKT_TOL:
            return gamma
    polished = _active_set_polish(A, b, gamma)
    if polished is not None and _kkt_residual(polished, A @ polished + b) <= KKT_TOL:
        return polished
    res = _kkt_residual(gamma, A @ gamma + b)
    if res <= KKT_TOL:
        return gamma
    raise NumericalError(f"simplex QP stalled at KKT residual {res:.3e}")


def solve_theta_m(gamma_m: np.ndarray, objective: CgdroObjective,
                  theta_hat: np.ndarray) -> np.ndarray:
    """Refit theta at the perturbed weights, against the ORIGINAL moments."""
    return objective.inner_min(gamma_m, theta_init=theta_hat)


def variance_m(gamma_m: np.ndarray, theta_m: np.ndarray,
               moments: MomentSet, target: UnlabeledDataset) -> np.ndarray:
    """Sandwich covariance H^{-1} W H^{-1} of the per-draw estimator.

    W sums the squared-weight moment covariances and the target-side
    covariance of p(X, theta_m) kron X.
    """
    K = moments.K
    H = hess_s_hat(theta_m, target.x, K)
    W = sum(gamma_m[l] ** 2 * moments.cov_hat[l] for l in range(moments.L))
    p = softmax_p(target.x, theta_m, K)
    W = W + empirical_cov(stacked_outer(p, target.x)) / target.n
    jitter = VAR_FLOOR * np.eye(H.shape[0])
    hinv_w = np.linalg.solve(H + jitter, W)
    v = np.linalg.solve(H + jitter, hinv_w.T)
    return psd_project(v)


def interval_m(theta_m: np.ndarray, v_m: np.ndarray, coord: int,
               alpha_prime: float) -> tuple:
    """Plug-in z-interval for one coordinate at level alpha_prime."""
    z = norm.ppf(1.0 - alpha_prime / 2.0)
    var = max(float(v_m[coord, coord]), VAR_FLOOR)
    hw = z * np.sqrt(var)
    c = float(theta_m[coord])
    return (c - hw, c + hw)


def ci_union(intervals: Sequence[tuple]) -> tuple:
    """Merge closed intervals into a sorted tuple of disjoint intervals."""
    if not intervals:
        return ()
    ordered = sorted((float(lo), float(hi)) for lo, hi in intervals)
    merged = [list(ordered[0])]
    for lo, hi in ordered[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return tuple((lo, hi) for lo, hi in merged)


def infer(sources, target, config: Optional[ProblemConfig] = None,
          coord: int = 0, fit=None) -> InferenceResult:
    """Full inference pipeline for theta*_coord.

    fit may be a precomputed (FitResult, MomentSet, CgdroObjective) triple
    from cgdro_fit; otherwise the model is fitted here first.
    """
    config = config or ProblemConfig()
    if fit is None:
        fit = cgdro_fit(sources, target, config)
    result, moments, objective = fit
    dim = moments.d * moments.K
    if not (0 <= coord < dim):
        raise ValidationError(f"coordinate {coord} outside [0, {dim})")
    theta_hat = result.theta
    hess = hess_s_hat(theta_hat, target.x, moments.K)
    grad_s = grad_s_hat(theta_hat, target.x, moments.K)

    draws = sample_perturbed_moments(moments, config.M, config.seed)
    kept = filter_indices(draws, moments, config.alpha0, config.eta0)
    if len(kept) == 0:
        raise NumericalError(
            "every perturbation draw was filtered out; increase M or alpha0"
        )
    intervals = []
    for m in kept:
        u_m = draws[m].T  # (dK, L)
        gamma_m = solve_gamma_m(u_m, theta_hat, hess, grad_s)
        theta_m = solve_theta_m(gamma_m, objective, theta_hat)
        v_m = variance_m(gamma_m, theta_m, moments, target)
        intervals.append(interval_m(theta_m, v_m, coord, config.alpha_prime))

    return InferenceResult(
        coord=coord,
        intervals=tuple(intervals),
        ci=ci_union(intervals),
        kept=tuple(int(m) for m in kept),
        n_draws=config.M,
        alpha=config.alpha,
        alpha0=config.alpha0,
        theta=theta_hat,
        gamma=result.gamma,
        gap_trace=result.gap_trace,
        gap_iterations=result.gap_iterations,
        iterations=result.iterations,
    )
