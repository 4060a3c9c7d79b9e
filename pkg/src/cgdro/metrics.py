"""Oracle evaluation quantities for the simulation harness.

These evaluators use the true conditional probabilities exposed by the
data-generating spec, so they measure a fitted model against the actual
worst-case mixture rather than against noisy labels.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data_model import ProblemConfig
from .datagen import DGPSpec, eval_cond_prob, gen_problem
from .solver import cgdro_fit, softmax_p

_LOG_CLIP = 1e-12


@dataclass(frozen=True)
class EvalReport:
    """Worst-case and per-source losses of one fitted parameter vector."""

    method: str
    worst_case_loss: float
    per_source_loss: tuple
    non_reducible: tuple
    est_error: Optional[float] = None


def model_log_probs(theta: np.ndarray, x: np.ndarray, K: int) -> np.ndarray:
    """(n, K+1) log probabilities of the fitted softmax model."""
    p1 = softmax_p(x, theta, K)  # classes 1..K
    p0 = np.clip(1.0 - p1.sum(axis=1, keepdims=True), _LOG_CLIP, 1.0)
    full = np.concatenate([p0, np.clip(p1, _LOG_CLIP, 1.0)], axis=1)
    return np.log(full)

def worst_case_loss(theta: np.ndarray, spec: DGPSpec, target_x: np.ndarray):
    """Max over sources of the expected cross-entropy on target covariates.

    The per-source loss averages -sum_c P^(l)(c|x) log p_c(x, theta) over the
    target rows, using the analytic conditional probabilities; the worst case
    over mixtures of sources is attained at a single source by linearity.
    """
    log_p = model_log_probs(theta, target_x, spec.K)
    losses = []
    for l in range(spec.L):
        true_p = eval_cond_prob(spec, target_x, l)
        losses.append(float(-np.mean((true_p * log_p).sum(axis=1))))
    losses = tuple(losses)
    return max(losses), losses


def non_reducible_loss(spec: DGPSpec, l: int, target_x: np.ndarray,
                       seed: int) -> float:
    """Cross-entropy of the true source-l conditional law against labels it
    generated itself on the target covariates; the entropy floor up to
    Monte Carlo noise in the simulated labels."""
    probs = eval_cond_prob(spec, target_x, l)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, int(l)]))
    u = rng.random(target_x.shape[0])
    y = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    picked = np.clip(probs[np.arange(len(y)), y], _LOG_CLIP, 1.0)
    return float(-np.mean(np.log(picked)))


def estimation_error(theta_hat: np.ndarray, theta_ref: np.ndarray,
                     d: int) -> float:
    """Euclidean distance normalized by sqrt(d)."""
    return float(np.linalg.norm(np.asarray(theta_hat) - np.asarray(theta_ref))
                 / np.sqrt(d))


def _spec_digest(spec: DGPSpec, n_big: int, N_big: int, seed: int,
                 config: ProblemConfig) -> str:
    payload = {
        "setting": spec.setting_id,
        "L": spec.L,
        "K": spec.K,
        "d": spec.d,
        "delta": spec.delta,
        "target_mean": spec.target_mean.tolist(),
        "target_sd": spec.target_sd,
        "beta": None if spec.beta is None else spec.beta.tolist(),
        "a": None if spec.a is None else spec.a.tolist(),
        "b": None if spec.b is None else spec.b.tolist(),
        "c": None if spec.c is None else spec.c.tolist(),
        "w": None if spec.w is None else spec.w.tolist(),
        "n_big": n_big,
        "N_big": N_big,
        "seed": seed,
        "no_shift": config.no_shift,
        "eta": config.eta,
        "tol": config.tol,
        "ridge": config.ridge,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def _cache_dir() -> Path:
    root = os.environ.get("CGDRO_CACHE_DIR")
    path = Path(root) if root else Path.home() / ".cache" / "cgdro"
    path.mkdir(parents=True, exist_ok=True)
    return path


def population_theta(spec: DGPSpec, n_big: int = 100_000,
                     N_big: int = 200_000, seed: int = 0,
                     config: Optional[ProblemConfig] = None,
                     cache: bool = True) -> np.ndarray:
    """Reference parameter from a single very large replication, disk-cached.

    Serves as the stand-in for the population minimax solution when
    measuring estimation error or interval coverage.
    """
    config = config or ProblemConfig(ridge=1e-3)
    key = _spec_digest(spec, n_big, N_big, seed, config)
    path = _cache_dir() / f"theta_ref_{key}.npy"
    if cache and path.exists():
        return np.load(path)
    sources, target = gen_problem(spec, n_big, N_big, seed=int(seed) + 777_001)
    result, _, _ = cgdro_fit(sources, target, config, K=spec.K)
    if cache:
        np.save(path, result.theta)
    return result.theta
