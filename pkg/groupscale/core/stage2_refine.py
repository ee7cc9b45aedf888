"""Coordinate-descent refinement of group scales with frozen integer weights.

For one output channel with effective integers v (frozen) and scales s the
deviation-aware layer loss is

    L(s) = (q - w)^T H (q - w) + 2 w^T R (q - w),      q = s (.)_g v

It is quadratic in each s_i, so the exact coordinate minimizer is

    s_i* = s_i + [v_i^T H_{i,:} (w - q) - w^T R_{:,i} v_i] / (v_i^T H_ii v_i)

With R absent (first layer) the R term vanishes. Groups are visited in
ascending order and q is refreshed after every update.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ShapeMismatchError
from .quantizer import GridRow, QuantizedLayer, effective_int
from .statistics import GroupPartition, LayerStats
from .thread_pool import ThreadPool, get_serial_pool

logger = logging.getLogger(__name__)

SKIP_TOL = 1e-12
MIN_SCALE = 1e-8
MONOTONE_RTOL = 1e-9


@dataclass
class UpdateEvent:
    sweep: int
    group: int
    old_scale: float
    new_scale: float
    loss_before: float
    loss_after: float
    skipped: bool = False
    clamped: bool = False

    @property
    def delta(self) -> float:
        return self.loss_after - self.loss_before


class RefineState:
    """Mutable CD state for one row. q always equals dequantize(w_int, s, z)."""

    def __init__(
        self,
        w: np.ndarray,
        w_int: np.ndarray,
        zeros: np.ndarray,
        scales: np.ndarray,
        partition: GroupPartition,
        H: np.ndarray,
        R: Optional[np.ndarray] = None,
        check_consistency: bool = False,
    ):
        d = partition.d
        if np.shape(w) != (d,) or np.shape(w_int) != (d,):
            raise ShapeMismatchError(f"Row vectors must have length {d}")
        if np.shape(scales) != (partition.n_g,) or np.shape(zeros) != (partition.n_g,):
            raise ShapeMismatchError(f"Expected {partition.n_g} scales and zero-points")
        if H.shape != (d, d) or (R is not None and R.shape != (d, d)):
            raise ShapeMismatchError(f"Statistics must be {d}x{d}")

        self.w = _frozen(np.asarray(w, dtype=np.float64))
        self.w_int = _frozen(np.asarray(w_int, dtype=np.int64))
        self.zeros = _frozen(np.asarray(zeros, dtype=np.int64))
        self.scales = np.array(scales, dtype=np.float64, copy=True)
        self.partition = partition
        self.H = H
        self.R = R
        self.check_consistency = check_consistency
        self.v = _frozen(effective_int(self.w_int, partition.expand(self.zeros)))
        self.q = self.full_q()
        self.events: List[UpdateEvent] = []

    @classmethod
    def from_row(
        cls, w: np.ndarray, w_int: np.ndarray, grid_row: GridRow, stats: LayerStats, check_consistency: bool = False
    ) -> "RefineState":
        return cls(w, w_int, grid_row.zeros, grid_row.scales, grid_row.partition, stats.H, stats.R, check_consistency)

    def full_q(self) -> np.ndarray:
        return self.partition.expand(self.scales) * self.v

    def set_scale(self, i: int, value: float) -> None:
        sl = self.partition.slice(i)
        self.scales[i] = value
        self.q[sl] = value * self.v[sl]
        if self.check_consistency and not np.array_equal(self.q, self.full_q()):
            raise AssertionError(f"Incremental q diverged from full recomputation at group {i}")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


def layer_loss(state: RefineState) -> float:
    """(q - w)^T H (q - w) + 2 w^T R (q - w); the s-independent constant is excluded."""
    e = state.q - state.w
    loss = float(e @ (state.H @ e))
    if state.R is not None:
        loss += 2.0 * float((state.w @ state.R) @ e)
    return loss


def cd_update_scale(state: RefineState, i: int, sweep: int = 0) -> float:
    """Exact minimization of layer_loss along s_i. Returns the new s_i."""
    sl = state.partition.slice(i)
    v = state.v[sl]
    H_ii = state.H[sl, sl]
    old = float(state.scales[i])
    loss_before = layer_loss(state)

    denom = float(v @ (H_ii @ v))
    tol = SKIP_TOL * float(v @ v) * max(float(np.max(np.abs(np.diag(H_ii)))), np.finfo(float).tiny)
    if denom <= tol:
        logger.debug("Skipping group %d: degenerate denominator %.3e", i, denom)
        state.events.append(UpdateEvent(sweep, i, old, old, loss_before, loss_before, skipped=True))
        return old

    numer = float(v @ (state.H[sl, :] @ (state.w - state.q)))
    if state.R is not None:
        numer -= float((state.w @ state.R[:, sl]) @ v)
    new = old + numer / denom

    clamped = new <= 0.0
    if clamped:
        logger.debug("Clamping group %d scale %.3e to %.1e", i, new, MIN_SCALE)
        new = MIN_SCALE

    state.set_scale(i, new)
    state.events.append(UpdateEvent(sweep, i, old, new, loss_before, layer_loss(state), clamped=clamped))
    return new


@dataclass
class RefineReport:
    loss_before: float
    loss_after: float
    deltas: List[float] = field(default_factory=list)
    sweep_improvements: List[float] = field(default_factory=list)
    n_skips: int = 0
    n_clamps: int = 0
    events: List[UpdateEvent] = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return all(
            e.loss_after <= e.loss_before + MONOTONE_RTOL * abs(e.loss_before) for e in self.events
        )


def refine_scales(state: RefineState, sweeps: int = 1) -> Tuple[np.ndarray, RefineReport]:
    """Run `sweeps` ascending passes of cd_update_scale over all groups."""
    if sweeps < 1:
        raise ValueError(f"sweeps must be >= 1, got {sweeps}")
    first_event = len(state.events)
    loss_before = layer_loss(state)
    sweep_improvements = []
    for sweep in range(sweeps):
        sweep_start = layer_loss(state)
        for i in range(state.partition.n_g):
            cd_update_scale(state, i, sweep)
        sweep_improvements.append(sweep_start - layer_loss(state))

    events = state.events[first_event:]
    report = RefineReport(
        loss_before=loss_before,
        loss_after=layer_loss(state),
        deltas=[e.delta for e in events],
        sweep_improvements=sweep_improvements,
        n_skips=sum(e.skipped for e in events),
        n_clamps=sum(e.clamped for e in events),
        events=events,
    )
    if not report.monotone:
        logger.warning("Refinement loss increased beyond tolerance (%.6e -> %.6e)", report.loss_before, report.loss_after)
    return state.scales.copy(), report


@dataclass
class LayerRefineReport:
    loss_before: float
    loss_after: float
    n_skips: int
    n_clamps: int
    rows_improved: int
    rows: List[RefineReport]

    @property
    def monotone(self) -> bool:
        return all(r.monotone for r in self.rows)


def refine_layer(
    quantized: QuantizedLayer,
    W: np.ndarray,
    stats: LayerStats,
    sweeps: int = 1,
    pool: Optional[ThreadPool] = None,
    check_consistency: bool = False,
) -> Tuple[QuantizedLayer, LayerRefineReport]:
    """Refine every row's scales independently; w_int and zero-points pass through unchanged."""
    W = np.asarray(W, dtype=np.float64)
    grid = quantized.grid
    if W.shape != quantized.w_int.shape:
        raise ShapeMismatchError(f"Weight shape {W.shape} does not match quantized layer {quantized.w_int.shape}")
    pool = pool or get_serial_pool()

    def run(rows: slice):
        out = []
        for r in range(rows.start, rows.stop):
            state = RefineState.from_row(W[r], quantized.w_int[r], grid.row(r), stats, check_consistency)
            out.append(refine_scales(state, sweeps))
        return out

    results = [item for chunk in pool.map_rows(run, W.shape[0]) for item in chunk]
    scales = np.stack([s for s, _ in results], axis=0)
    reports = [rep for _, rep in results]

    layer_report = LayerRefineReport(
        loss_before=float(sum(r.loss_before for r in reports)),
        loss_after=float(sum(r.loss_after for r in reports)),
        n_skips=sum(r.n_skips for r in reports),
        n_clamps=sum(r.n_clamps for r in reports),
        rows_improved=sum(r.loss_after < r.loss_before for r in reports),
        rows=reports,
    )
    if layer_report.n_skips or layer_report.n_clamps:
        logger.warning(
            "Refinement skipped %d and clamped %d scale updates", layer_report.n_skips, layer_report.n_clamps
        )
    refined = QuantizedLayer(quantized.w_int.copy(), grid.with_scales(scales))
    return refined, layer_report


def layer_loss_rows(W: np.ndarray, Q: np.ndarray, stats: LayerStats) -> np.ndarray:
    """Per-row layer_loss for dequantized weights Q against FP weights W."""
    E = np.asarray(Q, dtype=np.float64) - np.asarray(W, dtype=np.float64)
    losses = np.einsum("rd,rd->r", E @ stats.H, E)
    if stats.R is not None:
        losses = losses + 2.0 * np.einsum("rd,rd->r", W @ stats.R, E)
    return losses
