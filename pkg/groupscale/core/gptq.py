"""GPTQ: column-by-column quantization with Hessian-based error compensation.

Each row is quantized left to right. After column c is rounded onto its
group's grid, the rounding error is pushed onto the not-yet-quantized columns
through the upper Cholesky factor U of H^-1 (U^T U = H^-1):

    e = (w[c] - q[c]) / U[c, c]
    w[c+1:] -= e * U[c, c+1:]

Compensation is grid-agnostic and crosses group boundaries. Rows are
independent, and every row update is elementwise, so a row's codes do not
depend on which other rows share its batch.
"""

import logging
from typing import NamedTuple, Optional

import numpy as np

from .errors import FactorizationError, ShapeMismatchError
from .quantizer import GridRow, GroupGrid, QuantizedLayer
from .statistics import LayerStats
from .thread_pool import ThreadPool, get_serial_pool

logger = logging.getLogger(__name__)


class CompensationContext(NamedTuple):
    chol_inv: np.ndarray  # upper triangular, chol_inv^T chol_inv = H^-1
    order: np.ndarray  # column processing order (natural)


def prepare_compensation(H_damped: np.ndarray) -> CompensationContext:
    """Upper Cholesky factor of the inverse of a positive definite (damped) Hessian."""
    H_damped = np.asarray(H_damped, dtype=np.float64)
    d = H_damped.shape[0]
    try:
        L = np.linalg.cholesky(H_damped)
        L_inv = np.linalg.inv(L)
        H_inv = L_inv.T @ L_inv
        H_inv = (H_inv + H_inv.T) / 2
        U = np.linalg.cholesky(H_inv, upper=True)
    except np.linalg.LinAlgError as e:
        raise FactorizationError(f"Cholesky of the damped Hessian failed; increase --damp ({e})") from e
    if not np.all(np.diag(U) > 0):
        raise FactorizationError("Inverse Hessian factor has a non-positive diagonal; increase --damp")
    return CompensationContext(chol_inv=U, order=np.arange(d))


def _gptq_block(
    W: np.ndarray, s_full: np.ndarray, z_full: np.ndarray, maxq: int, ctx: CompensationContext
) -> np.ndarray:
    W = np.array(W, dtype=np.float64, copy=True)
    U = ctx.chol_inv
    codes = np.empty(W.shape, dtype=np.int64)
    for c in ctx.order:
        col = W[:, c]
        code = np.clip(np.rint(col / s_full[:, c]) + z_full[:, c], 0, maxq)
        q = s_full[:, c] * (code - z_full[:, c])
        err = (col - q) / U[c, c]
        W[:, c + 1:] -= np.outer(err, U[c, c + 1:])
        codes[:, c] = code
    return codes


def gptq_quantize_row(w: np.ndarray, grid_row: GridRow, ctx: CompensationContext) -> np.ndarray:
    """Quantize one output channel. The input vector is not modified."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (grid_row.partition.d,) or ctx.chol_inv.shape != (w.size, w.size):
        raise ShapeMismatchError(f"Row of length {w.size} does not match grid/Hessian")
    s_full, z_full = grid_row.expanded()
    return _gptq_block(w[None, :], s_full[None, :], z_full[None, :], grid_row.maxq, ctx)[0]


def gptq_quantize_layer(
    W: np.ndarray,
    grid: GroupGrid,
    stats: LayerStats,
    pool: Optional[ThreadPool] = None,
    ctx: Optional[CompensationContext] = None,
) -> QuantizedLayer:
    """Quantize every row of W on `grid`, sharing one compensation context."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (grid.n_rows, grid.partition.d):
        raise ShapeMismatchError(f"Weight shape {W.shape} does not match grid ({grid.n_rows}, {grid.partition.d})")
    if stats.d != W.shape[1]:
        raise ShapeMismatchError(f"Hessian is {stats.d}x{stats.d} but rows have length {W.shape[1]}")
    if ctx is None:
        ctx = prepare_compensation(stats.damped_hessian())
    pool = pool or get_serial_pool()

    s_full = grid.partition.expand(grid.scales)
    z_full = grid.partition.expand(grid.zeros)

    def run(rows: slice) -> np.ndarray:
        return _gptq_block(W[rows], s_full[rows], z_full[rows], grid.maxq, ctx)

    w_int = np.concatenate(pool.map_rows(run, W.shape[0]), axis=0)
    logger.debug("GPTQ quantized %d rows of length %d", W.shape[0], W.shape[1])
    return QuantizedLayer(w_int, grid)
