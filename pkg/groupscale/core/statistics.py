"""Calibration statistics: Hessian proxy H = E[XX^T] and deviation correlation R = E[dX X^T].

Samples are rows: a calibration batch is an (N x d) matrix, and E[.] is the
sample mean. Any positive rescaling of H leaves every scale argmin unchanged,
so mean versus sum only affects numeric range.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from .errors import (
    DegenerateStatsError,
    EmptyCalibrationError,
    FactorizationError,
    ShapeMismatchError,
)
from .tensor_io import PathLike, Tensor, load_tensor, save_tensor

logger = logging.getLogger(__name__)

DEFAULT_DAMP = 0.01
SYMMETRY_TOL = 1e-12

ArrayLike = Union[np.ndarray, Tensor]


class GroupPartition(NamedTuple):
    """Contiguous groups of length g over a channel of length d; the last may be short."""
    d: int
    g: int

    @classmethod
    def create(cls, d: int, group_size: int) -> "GroupPartition":
        if d < 1:
            raise ValueError(f"Channel length must be >= 1, got {d}")
        if group_size < 1:
            raise ValueError(f"Group size must be >= 1, got {group_size}")
        return cls(d, group_size)

    @property
    def n_g(self) -> int:
        return math.ceil(self.d / self.g)

    def bounds(self, i: int):
        if not 0 <= i < self.n_g:
            raise IndexError(f"Group index {i} out of range for {self.n_g} groups")
        return i * self.g, min((i + 1) * self.g, self.d)

    def slice(self, i: int) -> slice:
        start, stop = self.bounds(i)
        return slice(start, stop)

    def lengths(self) -> np.ndarray:
        return np.array([stop - start for start, stop in map(self.bounds, range(self.n_g))])

    def expand(self, values: np.ndarray) -> np.ndarray:
        """Repeat per-group values along the last axis so they align with channel entries."""
        return np.repeat(np.asarray(values), self.lengths(), axis=-1)


@dataclass(frozen=True)
class LayerStats:
    H: np.ndarray
    R: Optional[np.ndarray] = None
    n_samples: int = 0
    damp_lambda: float = 0.0

    def __post_init__(self):
        H = self.H
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ShapeMismatchError(f"H must be square, got {H.shape}")
        tol = SYMMETRY_TOL * np.maximum(1.0, np.abs(H))
        if np.any(np.abs(H - H.T) > tol):
            raise ValueError("H is not symmetric")
        if self.R is not None and self.R.shape != H.shape:
            raise ShapeMismatchError(f"R shape {self.R.shape} != H shape {H.shape}")

    @property
    def d(self) -> int:
        return self.H.shape[0]

    def damped_hessian(self) -> np.ndarray:
        return self.H + self.damp_lambda * np.eye(self.d)


def _as_matrix(samples: ArrayLike) -> np.ndarray:
    if isinstance(samples, Tensor):
        samples = samples.to_array()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples.reshape(1, -1)
    if samples.ndim != 2:
        raise ShapeMismatchError(f"Samples must be (N x d), got shape {samples.shape}")
    return samples


def estimate_hessian(samples: ArrayLike) -> np.ndarray:
    """H = (1/N) sum_n x_n x_n^T, undamped."""
    X = _as_matrix(samples)
    if X.shape[0] == 0:
        raise EmptyCalibrationError("No calibration samples")
    H = X.T @ X / X.shape[0]
    return (H + H.T) / 2


def damping_lambda(H: np.ndarray, frac: float) -> float:
    if frac <= 0:
        raise ValueError(f"Damping fraction must be > 0, got {frac}")
    mean_diag = float(np.mean(np.diag(H)))
    if mean_diag == 0.0:
        raise DegenerateStatsError("Mean diagonal of H is zero (all-zero calibration inputs?)")
    return frac * mean_diag


def dampen(H: np.ndarray, frac: float = DEFAULT_DAMP) -> np.ndarray:
    """H' = H + frac * mean(diag(H)) * I, checked positive definite."""
    H_damped = H + damping_lambda(H, frac) * np.eye(H.shape[0])
    try:
        np.linalg.cholesky(H_damped)
    except np.linalg.LinAlgError as e:
        raise FactorizationError(f"Damped Hessian is not positive definite; increase --damp ({e})") from e
    return H_damped


def estimate_deviation_correlation(quantized_inputs: ArrayLike, fp_inputs: ArrayLike) -> np.ndarray:
    """R = (1/N) sum_n (x_n - x~_n) x_n^T, the second factor being the quantized-run input."""
    X = _as_matrix(quantized_inputs)
    X_fp = _as_matrix(fp_inputs)
    if X.shape != X_fp.shape:
        raise ShapeMismatchError(f"Quantized inputs {X.shape} and FP inputs {X_fp.shape} differ")
    if X.shape[0] == 0:
        raise EmptyCalibrationError("No calibration samples")
    return (X - X_fp).T @ X / X.shape[0]


def collect_stats(
    quantized_inputs: ArrayLike,
    fp_inputs: Optional[ArrayLike] = None,
    damp: float = DEFAULT_DAMP,
) -> LayerStats:
    """Build LayerStats for one layer. R is estimated only when an FP stream is given."""
    X = _as_matrix(quantized_inputs)
    H = estimate_hessian(X)
    lam = damping_lambda(H, damp)
    R = estimate_deviation_correlation(X, fp_inputs) if fp_inputs is not None else None
    rank = np.linalg.matrix_rank(H)
    if rank < H.shape[0]:
        logger.warning("Hessian is rank deficient (rank %d of %d); relying on damping", rank, H.shape[0])
    return LayerStats(H=H, R=R, n_samples=X.shape[0], damp_lambda=lam)


def block(H: np.ndarray, partition: GroupPartition, i: int, j: int) -> np.ndarray:
    """H_{i,j}: rows of group i, columns of group j."""
    return H[partition.slice(i), partition.slice(j)]


def row_block(H: np.ndarray, partition: GroupPartition, i: int) -> np.ndarray:
    """H_{i,:}: rows of group i, all columns."""
    return H[partition.slice(i), :]


def save_stats(stats: LayerStats, directory: PathLike, prefix: str) -> None:
    """Persist as <prefix>.H.qt, optional <prefix>.R.qt and a <prefix>.json sidecar."""
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    save_tensor(Tensor("f64", stats.H.shape, stats.H), os.path.join(directory, f"{prefix}.H.qt"))
    if stats.R is not None:
        save_tensor(Tensor("f64", stats.R.shape, stats.R), os.path.join(directory, f"{prefix}.R.qt"))
    with open(os.path.join(directory, f"{prefix}.json"), "w") as f:
        json.dump(
            {"n_samples": stats.n_samples, "damp_lambda": stats.damp_lambda, "has_R": stats.R is not None},
            f,
            indent=2,
            sort_keys=True,
        )


def load_stats(directory: PathLike, prefix: str) -> LayerStats:
    directory = os.fspath(directory)
    with open(os.path.join(directory, f"{prefix}.json"), "r") as f:
        meta = json.load(f)
    H = load_tensor(os.path.join(directory, f"{prefix}.H.qt")).to_array()
    R = None
    if meta.get("has_R"):
        R = load_tensor(os.path.join(directory, f"{prefix}.R.qt")).to_array()
    return LayerStats(H=H, R=R, n_samples=int(meta["n_samples"]), damp_lambda=float(meta["damp_lambda"]))
