"""Per-source moment vectors and their covariance matrices.

Moments are the stacked vectors mu^(l) with class-c block
-E_Q[f_c(X) X]; the no-shift regime estimates them directly from labels,
the covariate-shift regime via the bias-corrected (cross-fitted) form. All
vectors use class-major stacking (class 1 block first).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data_model import LabeledDataset, UnlabeledDataset, ValidationError
from .nuisance import NuisancePair, cross_fit_nuisance


def one_hot(y: np.ndarray, K: int) -> np.ndarray:
    """(n, K) indicator matrix of classes 1..K (class 0 drops out)."""
    out = np.zeros((len(y), K))
    pos = y >= 1
    out[np.flatnonzero(pos), y[pos] - 1] = 1.0
    return out


def stacked_outer(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: row i is v_i (K,) kron x_i (d,) -> (n, dK)."""
    n, K = v.shape
    d = x.shape[1]
    return (v[:, :, None] * x[:, None, :]).reshape(n, K * d)


def empirical_cov(z: np.ndarray) -> np.ndarray:
    """Covariance with 1/n normalization of rows of z."""
    if z.shape[0] < 2:
        raise ValidationError("covariance needs at least 2 rows")
    centered = z - z.mean(axis=0)
    return centered.T @ centered / z.shape[0]


def psd_project(m: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero."""
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= 0.0:
        return sym
    clipped = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return 0.5 * (clipped + clipped.T)


def mu_hat_no_shift(dataset: LabeledDataset, K: int) -> np.ndarray:
    """Label-average moment estimate, valid when source X matches target X."""
    y = one_hot(dataset.y, K)
    return -(y.T @ dataset.x).ravel() / dataset.n


def mu_hat_dml(dataset: LabeledDataset, target: UnlabeledDataset,
               nuisance: NuisancePair) -> np.ndarray:
    """Bias-corrected moment estimate for the covariate-shift regime.

    Plug-in term averages f_c(X^Q) X^Q over the target; the correction term
    reweights source residuals by the estimated density ratio.
    """
    K = nuisance.f_target.shape[1]
    plug_in = -(nuisance.f_target.T @ target.x).ravel() / target.n
    resid = one_hot(dataset.y, K) - nuisance.f_source  # (n, K)
    weighted = nuisance.omega_source[:, None] * resid
    correction = -(weighted.T @ dataset.x).ravel() / dataset.n
    return plug_in + correction


def mu_hat_plugin(target: UnlabeledDataset, f_target: np.ndarray) -> np.ndarray:
    """Uncorrected plug-in estimate, used as a comparison in diagnostics."""
    return -(np.asarray(f_target).T @ target.x).ravel() / target.n


def cov_hat_no_shift(dataset: LabeledDataset, K: int) -> np.ndarray:
    """(1/n) x empirical covariance of the stacked indicator-covariate vector."""
    z = stacked_outer(one_hot(dataset.y, K), dataset.x)
    return psd_project(empirical_cov(z) / dataset.n)


def cov_hat_dml(dataset: LabeledDataset, target: UnlabeledDataset,
                nuisance: NuisancePair) -> np.ndarray:
    """Covariance of the bias-corrected moment estimate.

    Source term: covariance of [omega * (f - y)] kron X over source rows.
    Target term: covariance of f kron X over target rows.
    """
    K = nuisance.f_target.shape[1]
    resid = nuisance.f_source - one_hot(dataset.y, K)
    z_src = stacked_outer(nuisance.omega_source[:, None] * resid, dataset.x)
    z_tgt = stacked_outer(nuisance.f_target, target.x)
    cov = empirical_cov(z_src) / dataset.n + empirical_cov(z_tgt) / target.n
    return psd_project(cov)


@dataclass(frozen=True)
class MomentSet:
    """All per-source moments needed by the solver and inference."""

    mu_hat: tuple  # L vectors, each (dK,)
    cov_hat: tuple  # L matrices, each (dK, dK)
    u_hat: np.ndarray  # (dK, L)
    n_per_source: tuple
    d: int
    K: int
    nuisances: tuple = ()

    @property
    def L(self) -> int:
        return self.u_hat.shape[1]

    @property
    def sigma_l_diag(self) -> float:
        """Smallest singular value of the stacked moment matrix (diagnostic)."""
        return float(np.linalg.svd(self.u_hat, compute_uv=False)[-1])


def build_moment_set(sources: Sequence[LabeledDataset],
                     target: UnlabeledDataset, K: int, seed: int,
                     no_shift: bool = False,
                     ridge: Optional[float] = None) -> MomentSet:
    """Estimate moments and covariances for every source.

    no_shift=True uses the direct label-average estimators and skips all
    nuisance fitting; otherwise each source gets cross-fitted nuisances
    (seeded per source) and the bias-corrected forms.
    """
    d = target.d
    mus, covs, nuis = [], [], []
    for idx, ds in enumerate(sources):
        if ds.d != d:
            raise ValidationError("source/target dimension mismatch")
        if no_shift:
            mus.append(mu_hat_no_shift(ds, K))
            covs.append(cov_hat_no_shift(ds, K))
        else:
            pair = cross_fit_nuisance(ds, target, K + 1,
                                      seed=int(seed) + 1000 * (idx + 1),
                                      lam=ridge)
            nuis.append(pair)
            mus.append(mu_hat_dml(ds, target, pair))
            covs.append(cov_hat_dml(ds, target, pair))
    return MomentSet(
        mu_hat=tuple(mus),
        cov_hat=tuple(covs),
        u_hat=np.column_stack(mus),
        n_per_source=tuple(ds.n for ds in sources),
        d=d,
        K=K,
        nuisances=tuple(nuis),
    )


def moment_set_from_arrays(mus, covs, n_per_source, d, K) -> MomentSet:
    """Assemble a MomentSet from precomputed arrays (tests, perturbations)."""
    mus = tuple(np.asarray(m, dtype=float) for m in mus)
    return MomentSet(
        mu_hat=mus,
        cov_hat=tuple(np.asarray(c, dtype=float) for c in covs),
        u_hat=np.column_stack(mus),
        n_per_source=tuple(int(n) for n in n_per_source),
        d=int(d),
        K=int(K),
    )
