"""Uniform affine group quantization: grids, clamp-round, dequantize.

A weight w in group i maps to the integer code

    w_int = clamp(round(w / s_i) + z_i, 0, 2^b - 1)        round = half-to-even

and back to q = s_i * (w_int - z_i). Every closed-form scale update works on
the effective integers v = w_int - z, so q is linear in s_i. With z = 0
(symmetric mode) all formulas are the plain q = s * w_int.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np

from .errors import ShapeMismatchError
from .statistics import GroupPartition
from .tensor_io import PathLike, Tensor, load_tensor, save_tensor

logger = logging.getLogger(__name__)

SCALE_EPS = 1e-8
MIN_BITS = 2
MAX_BITS = 16


def max_code(bits: int) -> int:
    return (1 << bits) - 1


def scales_from_beta(
    W_seg: np.ndarray, beta: float, bits: int, symmetric: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise clipped min-max scale and zero-point for an (r x g) block of segments.

    s = beta * (max - min) / (2^b - 1);  z = clamp(-round(beta * min / s), 0, 2^b - 1).
    A constant segment gets s = max(|w|, eps) / (2^b - 1) and the zero-point that
    reproduces the constant.
    """
    W_seg = np.asarray(W_seg, dtype=np.float64)
    if W_seg.ndim != 2 or W_seg.shape[1] == 0:
        raise ValueError(f"Expected a non-empty (rows x g) block, got shape {W_seg.shape}")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    maxq = max_code(bits)
    wmin = W_seg.min(axis=1)
    wmax = W_seg.max(axis=1)
    flat = wmax == wmin

    s = np.where(flat, np.maximum(np.abs(wmin), SCALE_EPS) / maxq, beta * (wmax - wmin) / maxq)
    if symmetric:
        z = np.zeros(W_seg.shape[0], dtype=np.int64)
    else:
        z = np.clip(-np.rint(beta * wmin / s), 0, maxq).astype(np.int64)
        z = np.where(flat, np.where(wmin < 0, maxq, 0), z)
    return s, z


def scale_from_beta(w_seg, beta: float, bits: int, symmetric: bool = False) -> Tuple[float, int]:
    """Scalar form of scales_from_beta for one segment."""
    s, z = scales_from_beta(np.asarray(w_seg, dtype=np.float64).reshape(1, -1), beta, bits, symmetric)
    return float(s[0]), int(z[0])


def quantize_group(w_seg, s, z, bits: int) -> np.ndarray:
    """clamp(round(w / s) + z, 0, 2^b - 1) with half-to-even rounding."""
    w_seg = np.asarray(w_seg, dtype=np.float64)
    return np.clip(np.rint(w_seg / s) + z, 0, max_code(bits)).astype(np.int64)


def effective_int(w_int, z) -> np.ndarray:
    """v = w_int - z as float64; with z = 0 this is w_int itself."""
    return (np.asarray(w_int, dtype=np.int64) - np.asarray(z, dtype=np.int64)).astype(np.float64)


def dequantize(w_int, s, z) -> np.ndarray:
    """q = s * (w_int - z)."""
    return s * effective_int(w_int, z)


class GridRow(NamedTuple):
    """Scales and zero-points of one output channel."""
    bits: int
    partition: GroupPartition
    scales: np.ndarray  # (n_g,)
    zeros: np.ndarray  # (n_g,)

    @property
    def maxq(self) -> int:
        return max_code(self.bits)

    def expanded(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.partition.expand(self.scales), self.partition.expand(self.zeros)


@dataclass
class GroupGrid:
    bits: int
    partition: GroupPartition
    scales: np.ndarray  # (n_rows, n_g) float64
    zeros: np.ndarray  # (n_rows, n_g) int64
    symmetric: bool = False

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.zeros = np.asarray(self.zeros, dtype=np.int64)
        expected = (self.scales.shape[0], self.partition.n_g)
        if self.scales.ndim != 2 or self.scales.shape != expected or self.zeros.shape != expected:
            raise ShapeMismatchError(
                f"Grid scales {self.scales.shape} / zeros {self.zeros.shape} do not match "
                f"{self.partition.n_g} groups"
            )
        if not np.all(self.scales > 0):
            raise ValueError("All grid scales must be positive")
        if np.any(self.zeros < 0) or np.any(self.zeros > self.maxq):
            raise ValueError(f"Zero-points must lie in [0, {self.maxq}]")

    @property
    def n_rows(self) -> int:
        return self.scales.shape[0]

    @property
    def maxq(self) -> int:
        return max_code(self.bits)

    def row(self, r: int) -> GridRow:
        return GridRow(self.bits, self.partition, self.scales[r], self.zeros[r])

    def with_scales(self, scales: np.ndarray) -> "GroupGrid":
        return GroupGrid(self.bits, self.partition, np.array(scales, dtype=np.float64), self.zeros.copy(), self.symmetric)

    def take_rows(self, rows) -> "GroupGrid":
        return GroupGrid(self.bits, self.partition, self.scales[rows], self.zeros[rows], self.symmetric)


def quantize_rows(W: np.ndarray, grid: GroupGrid) -> np.ndarray:
    """Round-to-nearest of every weight on its group's grid (no error compensation)."""
    W = np.asarray(W, dtype=np.float64)
    s_full = grid.partition.expand(grid.scales)
    z_full = grid.partition.expand(grid.zeros)
    return np.clip(np.rint(W / s_full) + z_full, 0, grid.maxq).astype(np.int64)


def dequantize_rows(w_int: np.ndarray, grid: GroupGrid) -> np.ndarray:
    s_full = grid.partition.expand(grid.scales)
    z_full = grid.partition.expand(grid.zeros)
    return s_full * effective_int(w_int, z_full)


@dataclass
class QuantizedLayer:
    """Frozen integer weights plus the grid they live on."""
    w_int: np.ndarray  # (n_rows, d) int64
    grid: GroupGrid

    def __post_init__(self):
        self.w_int = np.asarray(self.w_int, dtype=np.int64)
        if self.w_int.shape != (self.grid.n_rows, self.grid.partition.d):
            raise ShapeMismatchError(
                f"w_int shape {self.w_int.shape} does not match grid "
                f"({self.grid.n_rows}, {self.grid.partition.d})"
            )
        if np.any(self.w_int < 0) or np.any(self.w_int > self.grid.maxq):
            raise ValueError(f"Integer weights must lie in [0, {self.grid.maxq}]")

    def dequantize(self) -> np.ndarray:
        return dequantize_rows(self.w_int, self.grid)


def save_quantized_layer(layer: QuantizedLayer, directory: PathLike, prefix: str) -> None:
    """Write <prefix>.w_int.qt (i32), .scales.qt (f32), .zeros.qt (i32) and a .json sidecar."""
    directory = os.fspath(directory)
    grid = layer.grid
    save_tensor(Tensor("i32", layer.w_int.shape, layer.w_int), os.path.join(directory, f"{prefix}.w_int.qt"))
    save_tensor(Tensor("f32", grid.scales.shape, grid.scales), os.path.join(directory, f"{prefix}.scales.qt"))
    save_tensor(Tensor("i32", grid.zeros.shape, grid.zeros), os.path.join(directory, f"{prefix}.zeros.qt"))
    with open(os.path.join(directory, f"{prefix}.json"), "w") as f:
        json.dump(
            {"bits": grid.bits, "group_size": grid.partition.g, "symmetric": grid.symmetric},
            f,
            indent=2,
            sort_keys=True,
        )


def load_quantized_layer(directory: PathLike, prefix: str) -> QuantizedLayer:
    directory = os.fspath(directory)
    with open(os.path.join(directory, f"{prefix}.json"), "r") as f:
        meta = json.load(f)
    w_int = load_tensor(os.path.join(directory, f"{prefix}.w_int.qt")).to_array(np.int64)
    scales = load_tensor(os.path.join(directory, f"{prefix}.scales.qt")).to_array()
    zeros = load_tensor(os.path.join(directory, f"{prefix}.zeros.qt")).to_array(np.int64)
    partition = GroupPartition.create(w_int.shape[1], int(meta["group_size"]))
    grid = GroupGrid(int(meta["bits"]), partition, scales, zeros, bool(meta.get("symmetric", False)))
    return QuantizedLayer(w_int, grid)
