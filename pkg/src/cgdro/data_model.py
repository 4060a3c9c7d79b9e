"""Core containers, configuration, and file I/O shared by all modules.

Datasets travel as immutable numpy-backed records. Parameter vectors are
stored stacked class-major: theta = (theta_1^T, ..., theta_K^T)^T with the
reference class 0 fixed at zero and never stored.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np


class ValidationError(ValueError):
    """Malformed input data or configuration."""


class NumericalError(RuntimeError):
    """An iterative numerical routine failed to meet its contract."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LabeledDataset:
    """One source domain's covariates and categorical labels.

    x has shape (n, d); y is an integer vector with entries in {0, ..., K}.
    """

    x: np.ndarray
    y: np.ndarray
    source_id: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValidationError(
                f"source {self.source_id}: covariate matrix must be 2-D with >= 1 row"
            )
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"source {self.source_id}: non-finite covariate entries")
        if y.shape != (x.shape[0],):
            raise ValidationError(
                f"source {self.source_id}: label vector length {y.shape} does not match n={x.shape[0]}"
            )
        if not np.issubdtype(y.dtype, np.integer):
            yf = np.asarray(y, dtype=float)
            if not np.all(yf == np.round(yf)):
                raise ValidationError(f"source {self.source_id}: labels must be integers")
            y = yf.astype(np.int64)
        else:
            y = y.astype(np.int64)
        if y.min() < 0:
            raise ValidationError(f"source {self.source_id}: negative label")
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "y", _freeze(y))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def max_label(self) -> int:
        return int(self.y.max())


@dataclass(frozen=True)
class UnlabeledDataset:
    """Target-domain covariates, shape (N, d)."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValidationError("target covariate matrix must be 2-D with >= 1 row")
        if not np.all(np.isfinite(x)):
            raise ValidationError("target covariates contain non-finite entries")
        object.__setattr__(self, "x", _freeze(x))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def num_classes(sources: Sequence[LabeledDataset], declared: Optional[int] = None) -> int:
    """Number of non-reference classes K, inferred as the max label.

    With `declared`, labels exceeding it raise a validation error.
    """
    k_obs = max(ds.max_label for ds in sources)
    if declared is not None:
        if k_obs > declared:
            raise ValidationError(
                f"label {k_obs} outside declared range {{0,...,{declared}}}"
            )
        return declared
    return max(k_obs, 1)


@dataclass(frozen=True)
class ProblemConfig:
    """Tuning knobs for fitting and inference.

    alpha is the CI significance level, alpha0 the filtering budget
    (alpha > alpha0, and alpha' = alpha - alpha0 drives the per-draw
    interval quantile). eta scales the Mirror Prox learning rates.
    ridge=None selects the penalty by cross-validation.
    """

    alpha: float = 0.05
    alpha0: float = 0.01
    eta0: float = 0.1
    M: int = 500
    eta: float = 0.1
    max_iter: int = 20000
    tol: float = 1e-4
    ridge: Optional[float] = None
    seed: int = 0
    no_shift: bool = False
    gap_check_every: int = 25
    tol_inner: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        if not (0.0 < self.alpha < 0.5):
            raise ValidationError("alpha must lie in (0, 0.5)")
        if not (0.0 < self.alpha0 <= 0.01):
            raise ValidationError("alpha0 must lie in (0, 0.01]")
        if self.alpha <= self.alpha0:
            raise ValidationError("alpha must exceed alpha0")
        if self.eta0 <= 0:
            raise ValidationError("eta0 must be positive")
        if self.M < 1:
            raise ValidationError("M must be a positive integer")
        if self.eta <= 0:
            raise ValidationError("eta must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be positive")
        if self.tol <= 0:
            raise ValidationError("tol must be positive")
        if self.ridge is not None and self.ridge < 0:
            raise ValidationError("ridge must be >= 0")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    @property
    def alpha_prime(self) -> float:
        return self.alpha - self.alpha0


@dataclass(frozen=True)
class FitResult:
    """Minimax solution with its duality-gap trace."""

    theta: np.ndarray
    gamma: np.ndarray
    gap_trace: tuple
    gap_iterations: tuple
    iterations: int
    converged: bool

    def __post_init__(self):
        object.__setattr__(self, "theta", _freeze(np.asarray(self.theta, dtype=float)))
        object.__setattr__(self, "gamma", _freeze(np.asarray(self.gamma, dtype=float)))
        object.__setattr__(self, "gap_trace", tuple(float(g) for g in self.gap_trace))
        object.__setattr__(self, "gap_iterations", tuple(int(i) for i in self.gap_iterations))


@dataclass(frozen=True)
class InferenceResult:
    """Union confidence interval for one coordinate of theta*."""

    coord: int
    intervals: tuple  # per kept draw, (lo, hi)
    ci: tuple  # merged disjoint intervals, sorted
    kept: tuple  # kept draw indices
    n_draws: int
    alpha: float
    alpha0: float
    theta: np.ndarray
    gamma: np.ndarray
    gap_trace: tuple = ()
    gap_iterations: tuple = ()
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta", _freeze(np.asarray(self.theta, dtype=float)))
        object.__setattr__(self, "gamma", _freeze(np.asarray(self.gamma, dtype=float)))

    @property
    def alpha_prime(self) -> float:
        return self.alpha - self.alpha0

    @property
    def reject_zero(self) -> bool:
        return not any(lo <= 0.0 <= hi for lo, hi in self.ci)

    @property
    def total_length(self) -> float:
        return float(sum(hi - lo for lo, hi in self.ci))


ResultType = Union[FitResult, InferenceResult]


# ---------------------------------------------------------------------------
# CSV dataset I/O
# ---------------------------------------------------------------------------

def _parse_float(token: str, line_no: int, col: str) -> float:
    try:
        v = float(token)
    except ValueError as exc:
        raise ValidationError(f"line {line_no}: cannot parse {col}={token!r}") from exc
    if not math.isfinite(v):
        raise ValidationError(f"line {line_no}: non-finite value in column {col}")
    return v


def load_labeled(path, declared_k: Optional[int] = None) -> list:
    """Load source datasets from a CSV with header ``source,y,x1,...,xd``.

    Returns one LabeledDataset per distinct source id, sorted by id.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = [c.strip() for c in header.split(",")]
        if len(cols) < 3 or cols[0] != "source" or cols[1] != "y":
            raise ValidationError(f"{path}: expected header 'source,y,x1,...,xd', got {header!r}")
        d = len(cols) - 2
        rows: dict = {}
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 2:
                raise ValidationError(
                    f"{path} line {line_no}: expected {d + 2} fields, got {len(parts)}"
                )
            try:
                sid = int(parts[0])
                y = int(parts[1])
            except ValueError as exc:
                raise ValidationError(f"{path} line {line_no}: malformed source/y field") from exc
            xs = [_parse_float(tok, line_no, cols[j + 2]) for j, tok in enumerate(parts[2:])]
            rows.setdefault(sid, ([], []))
            rows[sid][0].append(xs)
            rows[sid][1].append(y)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    datasets = [
        LabeledDataset(x=np.array(xs), y=np.array(ys), source_id=sid)
        for sid, (xs, ys) in sorted(rows.items())
    ]
    num_classes(datasets, declared_k)  # bounds check against declared K
    return datasets


def load_unlabeled(path) -> UnlabeledDataset:
    """Load target covariates from a CSV with header ``x1,...,xd``."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = [c.strip() for c in header.split(",")]
        d = len(cols)
        data = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d:
                raise ValidationError(f"{path} line {line_no}: expected {d} fields")
            data.append([_parse_float(tok, line_no, cols[j]) for j, tok in enumerate(parts)])
    if not data:
        raise ValidationError(f"{path}: no data rows")
    return UnlabeledDataset(x=np.array(data))


def save_labeled(datasets: Sequence[LabeledDataset], path) -> None:
    d = datasets[0].d
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("source,y," + ",".join(f"x{j + 1}" for j in range(d)) + "\n")
        for ds in datasets:
            for i in range(ds.n):
                fh.write(
                    f"{ds.source_id},{ds.y[i]},"
                    + ",".join(repr(float(v)) for v in ds.x[i])
                    + "\n"
                )


def save_unlabeled(target: UnlabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"x{j + 1}" for j in range(target.d)) + "\n")
        for i in range(target.n):
            fh.write(",".join(repr(float(v)) for v in target.x[i]) + "\n")


# ---------------------------------------------------------------------------
# Result JSON I/O
# ---------------------------------------------------------------------------

def result_to_dict(result: ResultType) -> dict:
    if isinstance(result, FitResult):
        return {
            "theta": [float(v) for v in result.theta],
            "gamma": [float(v) for v in result.gamma],
            "gap_trace": list(result.gap_trace),
            "gap_iterations": list(result.gap_iterations),
            "iterations": result.iterations,
            "converged": result.converged,
            "ci": None,
            "filtered_m": None,
        }
    if isinstance(result, InferenceResult):
        return {
            "theta": [float(v) for v in result.theta],
            "gamma": [float(v) for v in result.gamma],
            "gap_trace": list(result.gap_trace),
            "gap_iterations": list(result.gap_iterations),
            "iterations": result.iterations,
            "ci": [[lo, hi] for lo, hi in result.ci],
            "intervals": [[lo, hi] for lo, hi in result.intervals],
            "filtered_m": len(result.kept),
            "kept": list(result.kept),
            "n_draws": result.n_draws,
            "coord": result.coord,
            "alpha": result.alpha,
            "alpha0": result.alpha0,
            "reject_zero": result.reject_zero,
        }
    raise TypeError(f"unsupported result type {type(result)!r}")


def save_results(result: ResultType, path) -> None:
    """Serialize a fit or inference result to JSON.

    Floats are written with shortest round-trip repr, so a save/load
    cycle reproduces them bit-exactly.
    """
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(result_to_dict(result), fh, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write result to {path}: {exc}") from exc


def load_results(path) -> ResultType:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("ci") is None:
        return FitResult(
            theta=np.array(doc["theta"], dtype=float),
            gamma=np.array(doc["gamma"], dtype=float),
            gap_trace=tuple(doc["gap_trace"]),
            gap_iterations=tuple(doc["gap_iterations"]),
            iterations=int(doc["iterations"]),
            converged=bool(doc["converged"]),
        )
    return InferenceResult(
        coord=int(doc["coord"]),
        intervals=tuple((lo, hi) for lo, hi in doc["intervals"]),
        ci=tuple((lo, hi) for lo, hi in doc["ci"]),
        kept=tuple(doc["kept"]),
        n_draws=int(doc["n_draws"]),
        alpha=float(doc["alpha"]),
        alpha0=float(doc["alpha0"]),
        theta=np.array(doc["theta"], dtype=float),
        gamma=np.array(doc["gamma"], dtype=float),
        gap_trace=tuple(doc["gap_trace"]),
        gap_iterations=tuple(doc["gap_iterations"]),
        iterations=int(doc["iterations"]),
    )


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def load_config(path, **overrides) -> ProblemConfig:
    """Read a ProblemConfig from a TOML or JSON file, with keyword overrides."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    if path.suffix.lower() == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib  # type: ignore[no-redef]
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    known = {f.name for f in dataclasses.fields(ProblemConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ProblemConfig(**doc)
