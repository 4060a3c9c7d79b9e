"""Cross-fitted nuisance models: conditional class probabilities and
target/source density ratios.

Both nuisances use a two-fold sample split per source. The model applied to
a source row is always the one fitted on the other fold; target rows get the
average of the two fold models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data_model import (
    LabeledDataset,
    NumericalError,
    UnlabeledDataset,
    ValidationError,
)

P_CLIP = 1e-6
OMEGA_CLIP = (0.05, 20.0)
RIDGE_GRID = (1e-3, 1e-2, 1e-1)


def _softmax_ref0(scores: np.ndarray) -> np.ndarray:
    """Softmax over (0, score_1, ..., score_K); scores shape (n, K)."""
    full = np.concatenate([np.zeros((scores.shape[0], 1)), scores], axis=1)
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def _newton_multinomial(x, y_onehot, lam, penalize_intercept=False,
                        max_iter=100, tol=1e-8):
    """Damped Newton on mean cross-entropy + (lam/2)||coef||^2.

    x includes an intercept column as its last column when used via
    fit_multinomial_logistic. Returns the flattened class-major parameter.
    Raises NumericalError if the gradient norm target is not met.
    """
    n, p = x.shape
    K = y_onehot.shape[1]
    theta = np.zeros(K * p)
    pen_mask = np.ones(p) if penalize_intercept else np.r_[np.ones(p - 1), 0.0]
    pen = lam * np.tile(pen_mask, K)

    def value_grad(th):
        scores = x @ th.reshape(K, p).T
        probs = _softmax_ref0(scores)
        # mean NLL for reference-class-0 softmax
        row_scores = np.concatenate([np.zeros((n, 1)), scores], axis=1)
        m = row_scores.max(axis=1)
        lse = m + np.log(np.exp(row_scores - m[:, None]).sum(axis=1))
        picked = (row_scores[:, 1:] * y_onehot).sum(axis=1)
        val = np.mean(lse - picked) + 0.5 * np.sum(pen * th ** 2)
        resid = probs[:, 1:] - y_onehot  # (n, K)
        grad = (resid.T @ x).ravel() / n + pen * th
        return val, grad, probs

    val, grad, probs = value_grad(theta)
    for _ in range(max_iter):
        gnorm = np.linalg.norm(grad, np.inf)
        if gnorm <= tol:
            return theta, gnorm
        # Assemble the (Kp x Kp) Hessian blockwise.
        H = np.empty((K * p, K * p))
        pk = probs[:, 1:]
        for k1 in range(K):
            for k2 in range(k1, K):
                w = pk[:, k1] * ((k1 == k2) - pk[:, k2])
                block = (x * w[:, None]).T @ x / n
                H[k1 * p:(k1 + 1) * p, k2 * p:(k2 + 1) * p] = block
                if k2 != k1:
                    H[k2 * p:(k2 + 1) * p, k1 * p:(k1 + 1) * p] = block
        H[np.diag_indices_from(H)] += pen
        step = _solve_with_jitter(H, grad)
        # Armijo backtracking, halving the step.
        t = 1.0
        desc = grad @ step
        for _ in range(60):
            cand = theta - t * step
            cval, cgrad, cprobs = value_grad(cand)
            if cval <= val - 1e-4 * t * desc:
                theta, val, grad, probs = cand, cval, cgrad, cprobs
                break
            t *= 0.5
        else:
            break
    gnorm = np.linalg.norm(grad, np.inf)
    if gnorm > tol:
        raise NumericalError(
            f"multinomial Newton did not converge: grad norm {gnorm:.3e} > {tol:.1e}"
        )
    return theta, gnorm


def _solve_with_jitter(H, g):
    jitter = 0.0
    for _ in range(12):
        try:
            c = np.linalg.cholesky(H + jitter * np.eye(H.shape[0]))
            z = np.linalg.solve(c, g)
            return np.linalg.solve(c.T, z)
        except np.linalg.LinAlgError:
            jitter = 1e-8 if jitter == 0.0 else jitter * 10.0
    raise NumericalError("Hessian factorization failed even with jitter")


@dataclass(frozen=True)
class CondProbModel:
    """Multinomial logistic model with reference class 0.

    coef is (K, d), intercept (K,). A constant fallback model (used when a
    training fold misses a class entirely) has zero coef and intercepts
    matching pooled class frequencies, with fallback=True.
    """

    coef: np.ndarray
    intercept: np.ndarray
    lam: float
    grad_norm: float = 0.0
    fallback: bool = False

    @property
    def n_classes(self) -> int:
        return self.coef.shape[0] + 1

    def predict_proba(self, x) -> np.ndarray:
        """(n, K+1) class probabilities, unclipped, rows summing to 1."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        scores = x @ self.coef.T + self.intercept
        return _softmax_ref0(scores)

    def predict_k(self, x) -> np.ndarray:
        """(n, K) probabilities of classes 1..K, clipped away from {0, 1}."""
        return np.clip(self.predict_proba(x)[:, 1:], P_CLIP, 1.0 - P_CLIP)


def fit_multinomial_logistic(x, y, lam: float, n_classes: Optional[int] = None,
                             max_iter: int = 100, tol: float = 1e-8,
                             fit_intercept: bool = True) -> CondProbModel:
    """Ridge-penalized multinomial logistic fit via damped Newton.

    y takes values in {0, ..., K}; pass n_classes = K+1 to fix K when the
    sample may not exhibit every class.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    K = n_classes - 1
    if K < 1:
        raise ValidationError("need at least two classes")
    present = np.unique(y)
    if len(present) < 2 and lam <= 0:
        raise ValidationError("single-class sample requires lam > 0")
    y_onehot = np.zeros((len(y), K))
    pos = y >= 1
    y_onehot[np.flatnonzero(pos), y[pos] - 1] = 1.0
    xd = np.column_stack([x, np.ones(len(y))]) if fit_intercept else x
    theta, gnorm = _newton_multinomial(xd, y_onehot, lam, max_iter=max_iter, tol=tol)
    p = xd.shape[1]
    mat = theta.reshape(K, p)
    if fit_intercept:
        return CondProbModel(coef=mat[:, :-1], intercept=mat[:, -1],
                             lam=lam, grad_norm=gnorm)
    return CondProbModel(coef=mat, intercept=np.zeros(K), lam=lam, grad_norm=gnorm)


def select_ridge(x, y, n_classes: int, seed: int,
                 grid=RIDGE_GRID, n_folds: int = 5) -> float:
    """Pick the ridge penalty by k-fold cross-validated log-loss."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    order = np.random.default_rng(
        np.random.SeedSequence([int(seed), 91])).permutation(n)
    folds = np.array_split(order, n_folds)
    best_lam, best_loss = grid[0], np.inf
    for lam in grid:
        loss, used = 0.0, 0
        for f in folds:
            mask = np.ones(n, dtype=bool)
            mask[f] = False
            if len(np.unique(y[mask])) < 2:
                continue
            model = fit_multinomial_logistic(x[mask], y[mask], lam,
                                             n_classes=n_classes)
            probs = model.predict_proba(x[f])
            picked = np.clip(probs[np.arange(len(f)), y[f]], P_CLIP, 1.0)
            loss += -np.log(picked).sum()
            used += len(f)
        if used and loss / used < best_loss:
            best_loss, best_lam = loss / used, lam
    return best_lam


@dataclass(frozen=True)
class DensityRatioModel:
    """Target/source covariate density ratio from a domain classifier.

    The logistic classifier labels source rows 1 and target rows 0; by Bayes'
    rule the ratio of the target to the source density is the class-prior
    ratio n_source/N times the target-vs-source posterior odds.
    """

    coef: np.ndarray
    intercept: float
    prior_ratio: float  # n_source / N
    clip: tuple = OMEGA_CLIP

    def posterior_source(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = x @ self.coef + self.intercept
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))

    def ratio(self, x) -> np.ndarray:
        p = np.clip(self.posterior_source(x), P_CLIP, 1.0 - P_CLIP)
        return np.clip(self.prior_ratio * (1.0 - p) / p, *self.clip)


def fit_density_ratio(source_x, target_x, lam: float = 1e-3,
                      clip=OMEGA_CLIP) -> DensityRatioModel:
    """Fit the domain classifier on merged covariates and return the ratio model."""
    source_x = np.atleast_2d(np.asarray(source_x, dtype=float))
    target_x = np.atleast_2d(np.asarray(target_x, dtype=float))
    if source_x.shape[0] == 0 or target_x.shape[0] == 0:
        raise ValidationError("both covariate sets must be non-empty")
    x = np.vstack([source_x, target_x])
    g = np.r_[np.ones(source_x.shape[0]), np.zeros(target_x.shape[0])].astype(int)
    model = fit_multinomial_logistic(x, g, lam, n_classes=2)
    return DensityRatioModel(
        coef=model.coef[0],
        intercept=float(model.intercept[0]),
        prior_ratio=source_x.shape[0] / target_x.shape[0],
        clip=clip,
    )


@dataclass(frozen=True)
class NuisancePair:
    """Cross-fitted nuisance predictions for one source.

    f_source[i] is the out-of-fold (K,) class-probability prediction at
    source row i; f_target averages the two fold models on target rows;
    omega_source holds the out-of-fold density-ratio values.
    """

    a_idx: np.ndarray
    b_idx: np.ndarray
    f_a: CondProbModel
    f_b: CondProbModel
    w_a: Optional[DensityRatioModel]
    w_b: Optional[DensityRatioModel]
    f_source: np.ndarray  # (n, K)
    f_target: np.ndarray  # (N, K)
    omega_source: np.ndarray  # (n,)
    lam: float
    fallback: bool = False


def split_indices(n: int, seed: int):
    """Seeded shuffle into two folds whose sizes differ by at most one."""
    if n < 4:
        raise ValidationError("cross-fitting needs at least 4 rows per source")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 17])).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def _fit_fold_cond_prob(x, y, all_y, n_classes, lam) -> CondProbModel:
    if len(np.unique(y)) < 2:
        K = n_classes - 1
        counts = np.bincount(all_y, minlength=n_classes).astype(float)
        freqs = np.clip(counts / counts.sum(), P_CLIP, 1.0 - P_CLIP)
        return CondProbModel(
            coef=np.zeros((K, x.shape[1])),
            intercept=np.log(freqs[1:] / freqs[0]),
            lam=lam,
            fallback=True,
        )
    return fit_multinomial_logistic(x, y, lam, n_classes=n_classes)


def cross_fit_nuisance(dataset: LabeledDataset, target: UnlabeledDataset,
                       n_classes: int, seed: int, lam: Optional[float] = None,
                       no_shift: bool = False) -> NuisancePair:
    """Two-fold cross-fitted conditional-probability and density-ratio models.

    With no_shift=True the density-ratio models are skipped and omega is
    identically 1.
    """
    x, y = dataset.x, dataset.y
    a_idx, b_idx = split_indices(dataset.n, seed)
    if lam is None:
        lam = select_ridge(x, y, n_classes, seed)
    f_a = _fit_fold_cond_prob(x[a_idx], y[a_idx], y, n_classes, lam)
    f_b = _fit_fold_cond_prob(x[b_idx], y[b_idx], y, n_classes, lam)

    f_source = np.empty((dataset.n, n_classes - 1))
    f_source[a_idx] = f_b.predict_k(x[a_idx])  # swap rule
    f_source[b_idx] = f_a.predict_k(x[b_idx])
    f_target = 0.5 * (f_a.predict_k(target.x) + f_b.predict_k(target.x))

    if no_shift:
        w_a = w_b = None
        omega = np.ones(dataset.n)
    else:
        w_a = fit_density_ratio(x[a_idx], target.x)
        w_b = fit_density_ratio(x[b_idx], target.x)
        omega = np.empty(dataset.n)
        omega[a_idx] = w_b.ratio(x[a_idx])
        omega[b_idx] = w_a.ratio(x[b_idx])

    return NuisancePair(
        a_idx=a_idx,
        b_idx=b_idx,
        f_a=f_a,
        f_b=f_b,
        w_a=w_a,
        w_b=w_b,
        f_source=f_source,
        f_target=f_target,
        omega_source=omega,
        lam=lam,
        fallback=f_a.fallback or f_b.fallback,
    )


def oracle_nuisance(dataset: LabeledDataset, target: UnlabeledDataset,
                    f_source, f_target, omega_source) -> NuisancePair:
    """Wrap externally supplied nuisance values (true models, perturbed
    models, indicator labels, ...) in the NuisancePair interface for tests
    and diagnostics."""
    f_source = np.asarray(f_source, dtype=float)
    f_target = np.asarray(f_target, dtype=float)
    omega_source = np.asarray(omega_source, dtype=float)
    if f_source.shape[0] != dataset.n or f_target.shape[0] != target.n:
        raise ValidationError("nuisance prediction shapes do not match the data")
    half = dataset.n // 2
    return NuisancePair(
        a_idx=np.arange(half),
        b_idx=np.arange(half, dataset.n),
        f_a=None,
        f_b=None,
        w_a=None,
        w_b=None,
        f_source=f_source,
        f_target=f_target,
        omega_source=omega_source,
        lam=0.0,
    )
