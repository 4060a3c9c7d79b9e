"""Synthetic data-generating processes for the simulation studies.

Each setting draws its coefficients once from a spec seed and freezes them;
per-replication seeds then drive the sampling. Covariates are Gaussian per
domain and labels follow a softmax of per-(source, class) score functions,
which are linear in most settings and a smooth nonlinear form in S2/S5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data_model import LabeledDataset, UnlabeledDataset, ValidationError

SETTINGS = (
    "S1",
    "S2",
    "S3",
    "S4",
    "S5",
    "FIG2",
    "FIG3_NONREG",
    "FIG3_UNSTABLE",
    "FIG3_REG",
)

_NONLINEAR = {"S2", "S5"}


def _rng(seed, *keys) -> np.random.Generator:
    """Deterministic child stream keyed by (seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class DGPSpec:
    """Frozen parameters of one data-generating process.

    beta has shape (L, K+1, d) and always includes the reference class k=0
    (all-zero for the linear settings). For the nonlinear settings the score
    is built from (a, b, c, w) plus the sparse delta bump instead.
    """

    setting_id: str
    L: int
    K: int
    d: int
    source_means: np.ndarray  # (L, d)
    source_sds: np.ndarray  # (L,), isotropic std devs
    target_mean: np.ndarray  # (d,)
    target_sd: float
    beta: Optional[np.ndarray] = None  # (L, K+1, d), linear settings
    a: Optional[np.ndarray] = None  # (L, K+1)
    b: Optional[np.ndarray] = None  # (L, K+1)
    c: Optional[np.ndarray] = None  # (L, K+1)
    w: Optional[np.ndarray] = None  # (L, d)
    delta: float = 0.0

    @property
    def nonlinear(self) -> bool:
        return self.setting_id in _NONLINEAR


def _linear_spec(setting_id, L, K, d, beta, target_mean, target_sd=1.0,
                 source_means=None, source_sds=None, delta=0.0) -> DGPSpec:
    if source_means is None:
        source_means = np.zeros((L, d))
    if source_sds is None:
        source_sds = np.ones(L)
    return DGPSpec(
        setting_id=setting_id,
        L=L,
        K=K,
        d=d,
        source_means=np.asarray(source_means, dtype=float),
        source_sds=np.asarray(source_sds, dtype=float),
        target_mean=np.asarray(target_mean, dtype=float),
        target_sd=float(target_sd),
        beta=np.asarray(beta, dtype=float),
        delta=float(delta),
    )


def make_spec(setting_id: str, seed: int = 0, delta: float = 0.0,
              sigma: float = 0.3, d: Optional[int] = None) -> DGPSpec:
    """Build a frozen DGP for one of the named simulation settings.

    delta drives the sparse perturbation in S3/S5, sigma the coefficient
    noise in S4; d overrides the default dimension where the setting allows.
    """
    if setting_id not in SETTINGS:
        raise ValidationError(f"unknown setting {setting_id!r}; choose from {SETTINGS}")
    rng = _rng(seed, 0)

    if setting_id == "S1":
        d = 20 if d is None else d
        L, K = 2, 1
        beta = np.zeros((L, K + 1, d))
        for l in range(L):
            beta[l, 1] = rng.normal(0.0, 0.5, size=d)
        return _linear_spec("S1", L, K, d, beta, target_mean=0.2 * np.ones(d))

    if setting_id == "S3":
        d = 20 if d is None else d
        if d < 6:
            raise ValidationError("S3 requires d >= 6")
        if not (0.0 <= delta <= 4.0):
            raise ValidationError("S3 requires delta in [0, 4]")
        L, K = 2, 1
        beta = np.zeros((L, K + 1, d))
        beta[0, 1, 0] = 0.5 + delta
        beta[0, 1, 1:4] = 0.5
        beta[1, 1, 4:6] = 0.5
        return _linear_spec("S3", L, K, d, beta, target_mean=0.2 * np.ones(d),
                            delta=delta)

    if setting_id == "S4":
        d = 20 if d is None else d
        if d < 5:
            raise ValidationError("S4 requires d >= 5")
        L, K = 4, 3
        beta = np.zeros((L, K + 1, d))
        base = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
        for l in range(L):
            for k in range(1, K + 1):
                beta[l, k, :5] = base + rng.normal(0.0, sigma, size=5)
        return _linear_spec("S4", L, K, d, beta, target_mean=0.2 * np.ones(d))

    if setting_id == "FIG2":
        d = 4
        L, K = 2, 1
        beta = np.zeros((L, K + 1, d))
        beta[0, 1] = np.array([-0.4, -0.4, 0.2, 0.2])
        beta[1, 1] = np.array([1.0, 1.0, 0.2, 0.2])
        return _linear_spec("FIG2", L, K, d, beta,
                            target_mean=np.array([-1.0, -1.0, 1.0, 1.0]))

    if setting_id == "FIG3_NONREG":
        d = 20 if d is None else d
        L, K = 2, 1
        beta = np.zeros((L, K + 1, d))
        beta[0, 1, 0] = 6.0
        beta[0, 1, 1:4] = 0.5
        beta[1, 1, :4] = 0.5
        return _linear_spec("FIG3_NONREG", L, K, d, beta,
                            target_mean=0.1 * np.ones(d))

    if setting_id == "FIG3_UNSTABLE":
        d = 4
        L, K = 4, 1
        beta = np.zeros((L, K + 1, d))
        base = np.array([1.0, 1.0, 0.0, 0.0])
        for l in range(L):
            beta[l, 1] = base + rng.normal(0.0, 0.1, size=d)
        return _linear_spec("FIG3_UNSTABLE", L, K, d, beta,
                            target_mean=0.1 * np.ones(d))

    if setting_id == "FIG3_REG":
        d = 20 if d is None else d
        L, K = 2, 1
        beta = np.zeros((L, K + 1, d))
        beta[0, 1, :2] = 0.5
        beta[1, 1, 2:4] = 0.5
        return _linear_spec("FIG3_REG", L, K, d, beta,
                            target_mean=0.1 * np.ones(d))

    # Nonlinear multi-class settings.
    if setting_id == "S2":
        L, K, d = 4, 3, (5 if d is None else d)
        use_delta = 0.0
    else:  # S5
        L, K, d = 3, 3, (5 if d is None else d)
        if not (0.0 <= delta <= 1.0):
            raise ValidationError("S5 requires delta in [0, 1]")
        use_delta = delta
    if d < 4:
        raise ValidationError(f"{setting_id} requires d >= 4")
    a = rng.uniform(-0.5, 0.5, size=(L, K + 1))
    b = rng.uniform(-0.5, 0.5, size=(L, K + 1))
    c = rng.uniform(-0.5, 0.5, size=(L, K + 1))
    w = rng.dirichlet(np.ones(d), size=L)
    return DGPSpec(
        setting_id=setting_id,
        L=L,
        K=K,
        d=d,
        source_means=np.zeros((L, d)),
        source_sds=np.ones(L),
        target_mean=0.2 * np.ones(d),
        target_sd=0.5,
        a=a,
        b=b,
        c=c,
        w=w,
        delta=use_delta,
    )


def _scores(spec: DGPSpec, x: np.ndarray, l: int) -> np.ndarray:
    """Score matrix phi_k(x_i), shape (n, K+1), for source l."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if not spec.nonlinear:
        return x @ spec.beta[l].T
    out = np.empty((n, spec.K + 1))
    for k in range(spec.K + 1):
        kernel = np.exp(-((x - k / 4.0) ** 2) / 4.0) @ spec.w[l]
        out[:, k] = (
            spec.a[l, k]
            + kernel
            + spec.b[l, k] * x[:, 0] * x[:, 1]
            + spec.c[l, k] * np.sin((x[:, 2] - x[:, 3]) + k / 3.0)
        )
        if spec.delta != 0.0 and l == 0 and k == 1:
            out[:, k] += spec.delta * x[:, 0]
    return out


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def eval_cond_prob(spec: DGPSpec, x, l: int) -> np.ndarray:
    """True conditional class probabilities P^(l)(Y=c | X=x).

    Accepts one d-vector or an (n, d) matrix; returns a (K+1,) vector or an
    (n, K+1) matrix accordingly, classes ordered 0..K.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    probs = _softmax_rows(_scores(spec, x, l))
    return probs[0] if single else probs


def gen_source(spec: DGPSpec, l: int, n: int, seed: int) -> LabeledDataset:
    """Draw one labeled source sample of size n from domain l (0-based)."""
    if not (0 <= l < spec.L):
        raise ValidationError(f"source index {l} outside [0, {spec.L})")
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = _rng(seed, 1, l)
    x = spec.source_means[l] + spec.source_sds[l] * rng.standard_normal((n, spec.d))
    probs = eval_cond_prob(spec, x, l)
    # Inverse-CDF categorical draw, vectorized over rows.
    u = rng.random(n)
    cum = np.cumsum(probs, axis=1)
    y = (u[:, None] > cum).sum(axis=1)
    return LabeledDataset(x=x, y=y, source_id=l + 1)


def gen_target(spec: DGPSpec, N: int, seed: int) -> UnlabeledDataset:
    """Draw N unlabeled target covariate rows."""
    if N < 1:
        raise ValidationError("N must be >= 1")
    rng = _rng(seed, 2)
    x = spec.target_mean + spec.target_sd * rng.standard_normal((N, spec.d))
    return UnlabeledDataset(x=x)


def gen_problem(spec: DGPSpec, n, N: int, seed: int):
    """Convenience: all L sources plus the target for one replication.

    n may be an int (same size per source) or a length-L sequence.
    """
    sizes = [int(n)] * spec.L if np.isscalar(n) else [int(v) for v in n]
    if len(sizes) != spec.L:
        raise ValidationError(f"expected {spec.L} source sizes, got {len(sizes)}")
    sources = [gen_source(spec, l, sizes[l], seed) for l in range(spec.L)]
    target = gen_target(spec, N, seed)
    return sources, target
