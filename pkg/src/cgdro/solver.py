"""Saddle-point objective, its calculus, and the Mirror Prox solver.

The robust objective is phi(theta, gamma) = sum_l gamma_l theta' mu^(l)
+ S(theta), linear in the simplex weights gamma and strictly convex in
theta. Mirror Prox alternates an intermediate and a correction step, with
plain gradient steps on theta and multiplicative-weight steps on gamma,
and certifies convergence through the duality gap of the averaged iterates.
The same skeleton also solves the group-robust baseline whose per-source
losses are average cross-entropies on the labeled data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data_model import (
    FitResult,
    LabeledDataset,
    NumericalError,
    ProblemConfig,
    UnlabeledDataset,
    ValidationError,
)
from .moments import MomentSet, build_moment_set, mu_hat_no_shift
from .nuisance import fit_multinomial_logistic
from .data_model import num_classes


# ---------------------------------------------------------------------------
# Calculus of the log-partition term
# ---------------------------------------------------------------------------

def softmax_p(x, theta: np.ndarray, K: int) -> np.ndarray:
    """Class probabilities p_c(x, theta) for c = 1..K, reference class 0.

    x may be a single d-vector or an (n, d) matrix; theta is the stacked
    (dK,) parameter. Overflow-safe via max-shift.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xm = np.atleast_2d(x)
    d = xm.shape[1]
    if K == 1:
        z = np.clip(xm @ theta, -500.0, 500.0)
        p = (1.0 / (1.0 + np.exp(-z)))[:, None]
    else:
        scores = xm @ theta.reshape(K, d).T  # (n, K)
        full = np.concatenate([np.zeros((xm.shape[0], 1)), scores], axis=1)
        full -= full.max(axis=1, keepdims=True)
        e = np.exp(full)
        p = e[:, 1:] / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def s_hat(theta: np.ndarray, target_x: np.ndarray, K: int) -> float:
    """Average log-partition (1/N) sum_i log(1 + sum_k exp(theta_k' x_i))."""
    x = np.atleast_2d(np.asarray(target_x, dtype=float))
    if K == 1:
        return float(np.mean(np.logaddexp(0.0, x @ theta)))
    scores = x @ theta.reshape(K, x.shape[1]).T
    full = np.concatenate([np.zeros((x.shape[0], 1)), scores], axis=1)
    m = full.max(axis=1)
    return float(np.mean(m + np.log(np.exp(full - m[:, None]).sum(axis=1))))


def grad_s_hat(theta: np.ndarray, target_x: np.ndarray, K: int) -> np.ndarray:
    """(1/N) sum_i p(x_i, theta) kron x_i."""
    x = np.atleast_2d(np.asarray(target_x, dtype=float))
    p = softmax_p(x, theta, K)
    return (p.T @ x).ravel() / x.shape[0]


def hess_s_hat(theta: np.ndarray, target_x: np.ndarray, K: int) -> np.ndarray:
    """(1/N) sum_i D(x_i, theta) kron x_i x_i', with D = diag(p) - p p'."""
    x = np.atleast_2d(np.asarray(target_x, dtype=float))
    n, d = x.shape
    p = softmax_p(x, theta, K)
    H = np.empty((K * d, K * d))
    for k1 in range(K):
        for k2 in range(k1, K):
            w = p[:, k1] * ((k1 == k2) - p[:, k2])
            block = (x * w[:, None]).T @ x / n
            H[k1 * d:(k1 + 1) * d, k2 * d:(k2 + 1) * d] = block
            if k2 != k1:
                H[k2 * d:(k2 + 1) * d, k1 * d:(k1 + 1) * d] = block
    return H


def _chol_solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    jitter = 0.0
    for _ in range(12):
        try:
            c = np.linalg.cholesky(H + jitter * np.eye(H.shape[0]))
            return np.linalg.solve(c.T, np.linalg.solve(c, g))
        except np.linalg.LinAlgError:
            jitter = 1e-8 if jitter == 0.0 else jitter * 10.0
    raise NumericalError("inner Hessian factorization failed even with jitter")


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

class CgdroObjective:
    """phi(theta, gamma) = theta' (U gamma) + S_target(theta)."""

    def __init__(self, moments: MomentSet, target: UnlabeledDataset):
        if moments.d != target.d:
            raise ValidationError("moment/target dimension mismatch")
        self.moments = moments
        self.target_x = target.x
        self.d = moments.d
        self.K = moments.K
        self.L = moments.L
        self.dim = self.d * self.K

    def value(self, theta, gamma) -> float:
        return float(theta @ (self.moments.u_hat @ gamma)
                     + s_hat(theta, self.target_x, self.K))

    def grad_theta(self, theta, gamma) -> np.ndarray:
        return self.moments.u_hat @ gamma + grad_s_hat(theta, self.target_x, self.K)

    def grad_gamma(self, theta) -> np.ndarray:
        """Partial derivatives in gamma: (theta' mu^(l))_l."""
        return self.moments.u_hat.T @ theta

    def gamma_values(self, theta) -> np.ndarray:
        """phi(theta, e_l) at every simplex vertex."""
        return self.grad_gamma(theta) + s_hat(theta, self.target_x, self.K)

    def _inner_grad_hess(self, theta, m):
        g = m + grad_s_hat(theta, self.target_x, self.K)
        H = hess_s_hat(theta, self.target_x, self.K)
        return g, H

    def _inner_value(self, theta, m):
        return theta @ m + s_hat(theta, self.target_x, self.K)

    def inner_min(self, gamma, theta_init=None, tol=1e-8, max_iter=200):
        """Damped Newton minimizer of phi(., gamma)."""
        m = self.moments.u_hat @ gamma
        return _newton_min(lambda th: self._inner_value(th, m),
                           lambda th: self._inner_grad_hess(th, m),
                           self.dim, theta_init, tol, max_iter)


class GroupDroObjective:
    """Worst-mixture average cross-entropy over the labeled sources.

    Each per-source loss is written as theta' m^(l) + S_l(theta), with m^(l)
    the label-average moment and S_l the log-partition average over that
    source's own covariates; gamma mixes the sources.
    """

    def __init__(self, sources: Sequence[LabeledDataset], K: int):
        self.K = K
        self.d = sources[0].d
        self.L = len(sources)
        self.dim = self.d * self.K
        self.xs = [ds.x for ds in sources]
        self.ms = np.column_stack([mu_hat_no_shift(ds, K) for ds in sources])

    def _losses(self, theta) -> np.ndarray:
        return np.array([
            theta @ self.ms[:, l] + s_hat(theta, self.xs[l], self.K)
            for l in range(self.L)
        ])

    def value(self, theta, gamma) -> float:
        return float(gamma @ self._losses(theta))

    def grad_theta(self, theta, gamma) -> np.ndarray:
        g = self.ms @ gamma
        for l in range(self.L):
            g = g + gamma[l] * grad_s_hat(theta, self.xs[l], self.K)
        return g

    def grad_gamma(self, theta) -> np.ndarray:
        return self._losses(theta)

    def gamma_values(self, theta) -> np.ndarray:
        return self._losses(theta)

    def inner_min(self, gamma, theta_init=None, tol=1e-8, max_iter=200):
        def value(th):
            return self.value(th, gamma)

        def grad_hess(th):
            g = self.grad_theta(th, gamma)
            H = np.zeros((self.dim, self.dim))
            for l in range(self.L):
                if gamma[l] > 0:
                    H += gamma[l] * hess_s_hat(th, self.xs[l], self.K)
            return g, H

        return _newton_min(value, grad_hess, self.dim, theta_init, tol, max_iter)


def _newton_min(value_fn, grad_hess_fn, dim, theta_init, tol, max_iter):
    theta = np.zeros(dim) if theta_init is None else np.array(theta_init, dtype=float)
    val = value_fn(theta)
    for _ in range(max_iter):
        g, H = grad_hess_fn(theta)
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            return theta
        step = _chol_solve(H, g)
        t, desc = 1.0, g @ step
        for _ in range(60):
            cand = theta - t * step
            cval = value_fn(cand)
            if cval <= val - 1e-4 * t * desc:
                theta, val = cand, cval
                break
            t *= 0.5
        else:
            break
    g, _ = grad_hess_fn(theta)
    gnorm = np.linalg.norm(g)
    if gnorm > tol:
        raise NumericalError(
            f"inner minimization stalled at gradient norm {gnorm:.3e}"
        )
    return theta


def inner_min(gamma, objective, theta_init=None, tol=1e-8):
    """Minimize phi(., gamma); thin functional wrapper over the objective."""
    return objective.inner_min(np.asarray(gamma, dtype=float), theta_init, tol=tol)


def duality_gap(theta, gamma, objective, theta_init=None, tol_inner=1e-8):
    """max over simplex vertices minus the inner minimum; >= 0 up to roundoff.

    The gamma-maximization is exact because phi is linear in gamma; vertex
    ties resolve to the lowest source index via argmax.
    """
    upper = float(np.max(objective.gamma_values(theta)))
    theta_star = objective.inner_min(np.asarray(gamma, dtype=float),
                                     theta_init, tol=tol_inner)
    lower = objective.value(theta_star, np.asarray(gamma, dtype=float))
    return upper - lower, theta_star


def _mw_step(gamma, eta_g, grad):
    """Entropic ascent step on the simplex, computed in log space."""
    logits = np.log(gamma) + eta_g * grad
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def mirror_prox(objective, eta: float = 0.1, max_iter: int = 20000,
                tol: float = 1e-4, gap_check_every: int = 25,
                tol_inner: float = 1e-8) -> FitResult:
    """Optimistic-gradient Mirror Prox with averaged iterates.

    Both the intermediate and the correction step launch from the current
    (theta_t, gamma_t); the correction gradient is reused as the next
    intermediate gradient, so each iteration evaluates the gradient once.
    Stops when the duality gap of the running averages reaches tol.
    """
    L, dim = objective.L, objective.dim
    eta_theta = eta
    eta_gamma = eta / np.log(L) if L >= 2 else eta
    theta_c = np.zeros(dim)
    gamma_c = np.full(L, 1.0 / L)
    g_theta = objective.grad_theta(theta_c, gamma_c)
    g_gamma = objective.grad_gamma(theta_c)
    sum_theta = np.zeros(dim)
    sum_gamma = np.zeros(L)
    gap_trace, gap_iters = [], []
    warm = None
    converged = False
    t = 0
    for t in range(1, max_iter + 1):
        theta_bar = theta_c - eta_theta * g_theta
        gamma_bar = _mw_step(gamma_c, eta_gamma, g_gamma)
        g_theta = objective.grad_theta(theta_bar, gamma_bar)
        g_gamma = objective.grad_gamma(theta_bar)
        theta_c = theta_c - eta_theta * g_theta
        gamma_c = _mw_step(gamma_c, eta_gamma, g_gamma)
        sum_theta += theta_bar
        sum_gamma += gamma_bar
        if t % gap_check_every == 0 or t == max_iter:
            theta_avg = sum_theta / t
            gamma_avg = sum_gamma / t
            gap, warm = duality_gap(theta_avg, gamma_avg, objective,
                                    theta_init=warm, tol_inner=tol_inner)
            gap_trace.append(gap)
            gap_iters.append(t)
            if gap <= tol:
                converged = True
                break
    return FitResult(
        theta=sum_theta / t,
        gamma=sum_gamma / t,
        gap_trace=tuple(gap_trace),
        gap_iterations=tuple(gap_iters),
        iterations=t,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Front-end fitters
# ---------------------------------------------------------------------------

def cgdro_fit(sources: Sequence[LabeledDataset], target: UnlabeledDataset,
              config: Optional[ProblemConfig] = None,
              K: Optional[int] = None,
              moments: Optional[MomentSet] = None):
    """Full pipeline: nuisances -> moments -> Mirror Prox.

    Returns (FitResult, MomentSet, CgdroObjective) so callers can reuse the
    moment estimates for inference without refitting.
    """
    config = config or ProblemConfig()
    K = num_classes(sources, K)
    if moments is None:
        moments = build_moment_set(sources, target, K, seed=config.seed,
                                   no_shift=config.no_shift,
                                   ridge=config.ridge)
    objective = CgdroObjective(moments, target)
    result = mirror_prox(objective, eta=config.eta, max_iter=config.max_iter,
                         tol=config.tol, gap_check_every=config.gap_check_every,
                         tol_inner=config.tol_inner)
    return result, moments, objective


def group_dro(sources: Sequence[LabeledDataset],
              config: Optional[ProblemConfig] = None,
              K: Optional[int] = None) -> FitResult:
    """Worst-mixture baseline on the labeled sources only."""
    config = config or ProblemConfig()
    K = num_classes(sources, K)
    objective = GroupDroObjective(sources, K)
    return mirror_prox(objective, eta=config.eta, max_iter=config.max_iter,
                       tol=config.tol, gap_check_every=config.gap_check_every,
                       tol_inner=config.tol_inner)


def erm_pooled(sources: Sequence[LabeledDataset], lam: float = 0.0,
               K: Optional[int] = None) -> np.ndarray:
    """Multinomial logistic fit on the concatenated sources (no intercept)."""
    K = num_classes(sources, K)
    x = np.vstack([ds.x for ds in sources])
    y = np.concatenate([ds.y for ds in sources])
    model = fit_multinomial_logistic(x, y, lam, n_classes=K + 1,
                                     fit_intercept=False)
    return model.coef.ravel()
