from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import ot
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import cdist

from blocksel.errors import (
    ConfigurationError,
    DimensionMismatchError,
    MomentError,
    NumericalDomainError,
    SinkhornConvergenceWarning,
    SolverCapacityError,
)
from blocksel.features import LabeledFeatureSet
from blocksel.provenance import write_json
from blocksel.telemetry import get_logger

log = get_logger(__name__)

REPORT_CSV_COLUMNS = (
    "block",
    "BI",
    "numerator",
    "denominator",
    "n_src",
    "n_src_prime",
    "n_tgt",
)


class OTDDConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    solver: Literal["exact", "sinkhorn"] = "sinkhorn"
    sinkhorn_reg: float = Field(default=0.1, gt=0.0)
    sinkhorn_max_iter: int = Field(default=10_000, ge=1)
    sinkhorn_tol: float = Field(default=1e-9, gt=0.0)
    cov_regularizer: float = Field(default=1e-6, gt=0.0)
    # cov_regularizer is multiplied by the mean feature variance.
    scale_regularizer: bool = True
    covariance: Literal["full", "diagonal"] = "full"
    p: Literal[2] = 2
    eps: float = Field(default=1e-9, ge=0.0)
    subsample: int = Field(default=500, ge=2)
    exact_cap: int = Field(default=64, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**63)
    # Draw the target as a third source window (resampling null experiment).
    null_target: bool = False


@dataclass(frozen=True)
class ClassMoments:
    means: dict[int, np.ndarray]
    covariances: dict[int, np.ndarray]
    regularizer: float

    def labels(self) -> list[int]:
        return sorted(self.means)


@dataclass(frozen=True)
class TransportResult:
    plan: np.ndarray
    total_cost: float
    residual: float
    converged: bool = True
    iterations: int | None = None


@dataclass(frozen=True)
class ImportanceResult:
    """
    One importance ratio with both distances it was built from.
    """

    value: float
    numerator: float
    denominator: float
    eps: float
    n_src: int
    n_src_prime: int
    n_tgt: int
    seeds: tuple[int, int, int]
    block_id: int | None = None
    layer_id: str | None = None

    @property
    def degenerate(self) -> bool:
        return self.denominator <= self.eps

    def to_dict(self) -> dict[str, Any]:
        return {
            "block_id": self.block_id,
            "layer_id": self.layer_id,
            "BI": self.value,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "eps": self.eps,
            "degenerate": self.degenerate,
            "n_src": self.n_src,
            "n_src_prime": self.n_src_prime,
            "n_tgt": self.n_tgt,
            "seeds": list(self.seeds),
        }


@dataclass
class BlockImportanceReport:
    entries: list[ImportanceResult] = field(default_factory=list)

    def values(self) -> list[float]:
        return [e.value for e in self.entries]

    def to_dict(self) -> dict[str, Any]:
        return {"blocks": [e.to_dict() for e in self.entries]}

    def write_json(self, path: str | Path, **stamp: Any) -> Path:
        return write_json(path, {**self.to_dict(), **stamp})

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_CSV_COLUMNS)
            for e in self.entries:
                writer.writerow(
                    [
                        e.block_id,
                        repr(e.value),
                        repr(e.numerator),
                        repr(e.denominator),
                        e.n_src,
                        e.n_src_prime,
                        e.n_tgt,
                    ]
                )

        return path


def class_moments(fs: LabeledFeatureSet, regularizer: float) -> ClassMoments:
    """
    Per-class sample mean and covariance (denominator n - 1) plus
    regularizer times the identity.
    """

    if regularizer <= 0:
        raise ConfigurationError("covariance regularizer must be > 0")

    x_all = np.asarray(fs.features, dtype=np.float64)
    d = x_all.shape[1]
    means: dict[int, np.ndarray] = {}
    covariances: dict[int, np.ndarray] = {}

    for label in np.unique(fs.labels):
        x = x_all[fs.labels == label]

        if x.shape[0] < 2:
            raise MomentError(
                f"class {int(label)} has a single sample; "
                "covariance needs at least 2",
                label=int(label),
            )

        cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
        means[int(label)] = x.mean(axis=0)
        covariances[int(label)] = cov + regularizer * np.eye(d)

    return ClassMoments(means, covariances, regularizer)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    root = np.sqrt(np.clip(eigenvalues, 0.0, None))
    return (eigenvectors * root) @ eigenvectors.T


def _check_covariance(matrix: Any, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))

    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise NumericalDomainError(f"{name} must be a square matrix")

    if not np.all(np.isfinite(matrix)):
        raise NumericalDomainError(f"{name} has non-finite entries")

    scale = max(1.0, float(np.abs(matrix).max()))
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-10 * scale):
        raise NumericalDomainError(f"{name} is not symmetric")

    if np.linalg.eigvalsh(matrix).min() < -1e-10 * scale:
        raise NumericalDomainError(f"{name} is not positive semi-definite")

    return matrix


def _w2_squared(
    m1: np.ndarray,
    s1: np.ndarray,
    m2: np.ndarray,
    s2: np.ndarray,
    s2_root: np.ndarray | None = None,
) -> float:
    if np.array_equal(m1, m2) and np.array_equal(s1, s2):
        return 0.0

    if s2_root is None:
        s2_root = _psd_sqrt(s2)

    cross = s2_root @ s1 @ s2_root
    cross = 0.5 * (cross + cross.T)
    cross_trace = np.sqrt(np.clip(np.linalg.eigvalsh(cross), 0.0, None)).sum()

    mean_term = float(np.sum((m1 - m2) ** 2))
    cov_term = float(np.trace(s1) + np.trace(s2) - 2.0 * cross_trace)

    return max(0.0, mean_term + cov_term)


def _w2_squared_diagonal(
    m1: np.ndarray,
    s1: np.ndarray,
    m2: np.ndarray,
    s2: np.ndarray,
) -> float:
    root1 = np.sqrt(np.clip(np.diag(s1), 0.0, None))
    root2 = np.sqrt(np.clip(np.diag(s2), 0.0, None))

    return max(0.0, float(np.sum((m1 - m2) ** 2) + np.sum((root1 - root2) ** 2)))


def gaussian_w2(m1: Any, s1: Any, m2: Any, s2: Any) -> float:
    """
    Closed-form 2-Wasserstein distance between N(m1, s1) and N(m2, s2).
    """

    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    m2 = np.atleast_1d(np.asarray(m2, dtype=np.float64))
    s1 = _check_covariance(s1, "S1")
    s2 = _check_covariance(s2, "S2")

    if not (m1.shape == m2.shape and s1.shape == s2.shape == (m1.size, m1.size)):
        raise DimensionMismatchError("means and covariances disagree in dimension")

    return math.sqrt(_w2_squared(m1, s1, m2, s2))


def label_distances(
    moments_a: ClassMoments,
    moments_b: ClassMoments,
    covariance: Literal["full", "diagonal"] = "full",
) -> np.ndarray:
    """
    Squared W2 between every class of A and every class of B.

    Rows follow moments_a.labels(), columns moments_b.labels().
    """

    labels_a = moments_a.labels()
    labels_b = moments_b.labels()
    out = np.zeros((len(labels_a), len(labels_b)))

    roots = {}
    if covariance == "full":
        roots = {c: _psd_sqrt(moments_b.covariances[c]) for c in labels_b}

    for i, ca in enumerate(labels_a):
        for j, cb in enumerate(labels_b):
            args = (
                moments_a.means[ca],
                moments_a.covariances[ca],
                moments_b.means[cb],
                moments_b.covariances[cb],
            )
            if covariance == "diagonal":
                out[i, j] = _w2_squared_diagonal(*args)
            else:
                out[i, j] = _w2_squared(*args, s2_root=roots[cb])

    return out


def _label_index(labels: np.ndarray, known: list[int], side: str) -> np.ndarray:
    known_array = np.asarray(known)
    index = np.searchsorted(known_array, labels)

    if np.any(index >= len(known_array)) or np.any(known_array[np.minimum(index, len(known_array) - 1)] != labels):
        raise ValueError(f"labels of {side} are missing from its class moments")

    return index


def pairwise_cost(
    fs_a: LabeledFeatureSet,
    fs_b: LabeledFeatureSet,
    moments_a: ClassMoments,
    moments_b: ClassMoments,
    covariance: Literal["full", "diagonal"] = "full",
) -> np.ndarray:
    """
    Ground cost: squared feature distance plus squared label distance.
    """

    if fs_a.feature_dim != fs_b.feature_dim:
        raise DimensionMismatchError(
            f"feature dimensions differ: {fs_a.feature_dim} != {fs_b.feature_dim}"
        )

    features = cdist(
        np.asarray(fs_a.features, dtype=np.float64),
        np.asarray(fs_b.features, dtype=np.float64),
        metric="sqeuclidean",
    )

    labels = label_distances(moments_a, moments_b, covariance)
    rows = _label_index(fs_a.labels, moments_a.labels(), "A")
    cols = _label_index(fs_b.labels, moments_b.labels(), "B")

    return features + labels[np.ix_(rows, cols)]


def _marginals(
    cost: np.ndarray,
    a: np.ndarray | None,
    b: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    n, m = cost.shape
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=np.float64)

    return a, b


def marginal_residual(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(
        max(
            np.abs(plan.sum(axis=1) - a).max(),
            np.abs(plan.sum(axis=0) - b).max(),
        )
    )


def solve_exact(
    cost: Any,
    a: np.ndarray | None = None,
    b: np.ndarray | None = None,
    *,
    cap: int = 64,
) -> TransportResult:
    cost = np.asarray(cost, dtype=np.float64)

    if cost.ndim != 2 or 0 in cost.shape:
        raise ValueError("cost must be a non-empty matrix")

    if max(cost.shape) > cap:
        raise SolverCapacityError(
            f"exact solver is capped at {cap} points per side, "
            f"got {cost.shape[0]}x{cost.shape[1]}; use the sinkhorn solver"
        )

    a, b = _marginals(cost, a, b)
    plan = ot.emd(a, b, cost)

    return TransportResult(
        plan=plan,
        total_cost=float(np.sum(plan * cost)),
        residual=marginal_residual(plan, a, b),
    )


def round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Project a nearly feasible plan onto the transport polytope: scale down
    overfull rows, then overfull columns, then spread the missing mass as
    a rank-one correction. Moves at most the current marginal error.
    """

    rows = plan.sum(axis=1)
    scaled = plan * np.minimum(1.0, a / np.where(rows > 0, rows, 1.0))[:, None]
    cols = scaled.sum(axis=0)
    scaled = scaled * np.minimum(1.0, b / np.where(cols > 0, cols, 1.0))[None, :]

    err_a = a - scaled.sum(axis=1)
    err_b = b - scaled.sum(axis=0)
    missing = err_a.sum()

    if missing <= 0.0:
        return scaled

    return scaled + np.outer(err_a, err_b) / missing


def annealing_schedule(cost: np.ndarray, reg: float, factor: float = 0.5) -> list[float]:
    """
    Regularizations from the largest absolute cost down to reg, halving each step.
    """

    start = float(np.abs(cost).max())
    if start <= reg:
        return [reg]

    steps = math.ceil(math.log(reg / start) / math.log(factor))
    return [start * factor**k for k in range(steps)] + [reg]


def solve_sinkhorn(
    cost: Any,
    a: np.ndarray | None = None,
    b: np.ndarray | None = None,
    *,
    reg: float,
    max_iter: int = 10_000,
    tol: float = 1e-9,
) -> TransportResult:
    """
    Entropic OT with epsilon scaling: each regularization in the annealing
    schedule is solved by the stabilized log-absorbing Sinkhorn, warm
    started from the dual potentials of the previous one. The final plan
    is rounded onto the marginals. total_cost is <plan, cost> without the
    entropy term. A run that stops at max_iter still returns its plan.
    """

    if reg <= 0:
        raise ConfigurationError(f"sinkhorn regularization must be > 0, got {reg}")

    cost = np.asarray(cost, dtype=np.float64)
    a, b = _marginals(cost, a, b)

    schedule = annealing_schedule(cost, reg)
    warmstart = None
    iterations = 0

    for step, step_reg in enumerate(schedule):
        final = step == len(schedule) - 1
        plan, info = ot.bregman.sinkhorn_stabilized(
            a,
            b,
            cost,
            step_reg,
            numItermax=max_iter,
            stopThr=tol if final else max(tol, 1e-6),
            warmstart=warmstart,
            log=True,
            warn=False,
        )
        warmstart = info["warmstart"]
        iterations += int(info.get("n_iter", info.get("niter", max_iter)))

    plan = np.asarray(plan)
    sinkhorn_residual = marginal_residual(plan, a, b)
    converged = sinkhorn_residual <= tol

    if not converged:
        log.warning(
            "sinkhorn stopped after %d iterations with marginal residual %.3e",
            iterations,
            sinkhorn_residual,
        )
        warnings.warn(
            f"sinkhorn did not converge: residual {sinkhorn_residual:.3e} > {tol:.1e}",
            SinkhornConvergenceWarning,
            stacklevel=2,
        )

    if np.all(np.isfinite(plan)):
        plan = round_to_marginals(plan, a, b)

    return TransportResult(
        plan=plan,
        total_cost=float(np.sum(plan * cost)),
        residual=marginal_residual(plan, a, b),
        converged=converged,
        iterations=iterations,
    )


def effective_regularizer(
    fs_a: LabeledFeatureSet,
    fs_b: LabeledFeatureSet,
    config: OTDDConfig,
) -> float:
    if not config.scale_regularizer:
        return config.cov_regularizer

    pooled = np.vstack(
        [
            np.asarray(fs_a.features, dtype=np.float64),
            np.asarray(fs_b.features, dtype=np.float64),
        ]
    )
    variance = float(pooled.var(axis=0).mean())

    if variance <= 0.0:
        return config.cov_regularizer

    return config.cov_regularizer * variance


def transport(
    fs_a: LabeledFeatureSet,
    fs_b: LabeledFeatureSet,
    config: OTDDConfig,
) -> TransportResult:
    regularizer = effective_regularizer(fs_a, fs_b, config)
    cost = pairwise_cost(
        fs_a,
        fs_b,
        class_moments(fs_a, regularizer),
        class_moments(fs_b, regularizer),
        config.covariance,
    )

    if config.solver == "exact":
        return solve_exact(cost, cap=config.exact_cap)

    return solve_sinkhorn(
        cost,
        reg=config.sinkhorn_reg,
        max_iter=config.sinkhorn_max_iter,
        tol=config.sinkhorn_tol,
    )


def otdd(
    fs_a: LabeledFeatureSet,
    fs_b: LabeledFeatureSet,
    config: OTDDConfig,
) -> float:
    """
    Optimal transport dataset distance between two labeled feature sets.
    """

    for name, fs in (("A", fs_a), ("B", fs_b)):
        if fs.n_samples == 0:
            raise ValueError(f"feature set {name} is empty")

    result = transport(fs_a, fs_b, config)
    return math.sqrt(max(0.0, result.total_cost))


def _importance(
    src: LabeledFeatureSet,
    src_prime: LabeledFeatureSet,
    tgt: LabeledFeatureSet,
    config: OTDDConfig,
) -> tuple[float, float, float]:
    numerator = otdd(src, tgt, config)
    denominator = otdd(src, src_prime, config)

    return numerator / (denominator + config.eps), numerator, denominator


def block_importance(
    src: LabeledFeatureSet,
    src_prime: LabeledFeatureSet,
    tgt: LabeledFeatureSet,
    config: OTDDConfig,
    *,
    block_id: int | None = None,
) -> ImportanceResult:
    """
    OTDD(source, target) over OTDD(source, source') plus eps.

    Low values mean the block's features on the target already look like
    its features on the source.
    """

    value, numerator, denominator = _importance(src, src_prime, tgt, config)
    result = ImportanceResult(
        value=value,
        numerator=numerator,
        denominator=denominator,
        eps=config.eps,
        n_src=src.n_samples,
        n_src_prime=src_prime.n_samples,
        n_tgt=tgt.n_samples,
        seeds=(src.seed, src_prime.seed, tgt.seed),
        block_id=block_id if block_id is not None else src.block_id,
    )

    if result.degenerate:
        log.warning(
            "block %s: source resampling distance %.3e is below eps",
            result.block_id,
            denominator,
        )

    return result


def layer_importance(
    src: LabeledFeatureSet,
    src_prime: LabeledFeatureSet,
    tgt: LabeledFeatureSet,
    config: OTDDConfig,
    *,
    layer_id: str | None = None,
) -> ImportanceResult:
    value, numerator, denominator = _importance(src, src_prime, tgt, config)
    result = ImportanceResult(
        value=value,
        numerator=numerator,
        denominator=denominator,
        eps=config.eps,
        n_src=src.n_samples,
        n_src_prime=src_prime.n_samples,
        n_tgt=tgt.n_samples,
        seeds=(src.seed, src_prime.seed, tgt.seed),
        layer_id=layer_id,
    )

    if result.degenerate:
        log.warning(
            "layer %s: source resampling distance %.3e is below eps",
            layer_id,
            denominator,
        )

    return result
