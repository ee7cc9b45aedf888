"""Input-aware scale initialization.

Each (row, group) pair picks its clipping factor beta from a finite grid by
minimizing the group-local reconstruction loss

    (s * v - w_i)^T H_ii (s * v - w_i),     v = effective integers at that beta

where H_ii is the diagonal block of the layer Hessian. With H_ii = I this is
the usual weight-space min-max search that plain GPTQ performs.
"""

import logging
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .errors import ShapeMismatchError
from .quantizer import GroupGrid, max_code, scales_from_beta
from .statistics import GroupPartition, LayerStats, block
from .thread_pool import ThreadPool, get_serial_pool

logger = logging.getLogger(__name__)


class GridSearchSpec(NamedTuple):
    """Candidates beta_k = 1 - k * max_shrink / M, k = 0..M."""
    n_candidates: int = 100
    max_shrink: float = 0.8

    def validate(self) -> None:
        if self.n_candidates < 1:
            raise ValueError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if not 0.0 < self.max_shrink < 1.0:
            raise ValueError(f"max_shrink must be in (0, 1), got {self.max_shrink}")

    def betas(self) -> np.ndarray:
        self.validate()
        k = np.arange(self.n_candidates + 1)
        return 1.0 - k * self.max_shrink / self.n_candidates


def group_loss(err: np.ndarray, H_ii: np.ndarray) -> np.ndarray:
    """err^T H_ii err over the last axis of an error block of shape (..., g).

    Plain einsum loops (no BLAS) so every entry is reduced in the same order
    whatever the batch it sits in.
    """
    return np.einsum("...g,gh,...h->...", err, H_ii, err)


def search_group_scales(
    W_seg: np.ndarray,
    H_ii: np.ndarray,
    bits: int,
    spec: GridSearchSpec = GridSearchSpec(),
    symmetric: bool = False,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid search over beta for every row of an (r x g) block. Returns (s, z, loss)."""
    W_seg = np.asarray(W_seg, dtype=np.float64)
    if H_ii.shape != (W_seg.shape[1], W_seg.shape[1]):
        raise ShapeMismatchError(f"H_ii shape {H_ii.shape} does not match group length {W_seg.shape[1]}")
    maxq = max_code(bits)

    betas = spec.betas()
    s = np.empty((betas.size, W_seg.shape[0]))
    z = np.empty((betas.size, W_seg.shape[0]), dtype=np.int64)
    for k, beta in enumerate(betas):
        s[k], z[k] = scales_from_beta(W_seg, beta, bits, symmetric)
    codes = np.clip(np.rint(W_seg[None] / s[:, :, None]) + z[:, :, None], 0, maxq)
    err = s[:, :, None] * (codes - z[:, :, None]) - W_seg[None]
    loss = group_loss(err, H_ii)

    # betas are descending and argmin keeps the first minimum: ties stay with the larger beta
    best = np.argmin(loss, axis=0)
    rows = np.arange(W_seg.shape[0])
    return s[best, rows], z[best, rows], loss[best, rows]


def init_group_scale(
    w_i: np.ndarray,
    H_ii: np.ndarray,
    bits: int,
    spec: GridSearchSpec = GridSearchSpec(),
    symmetric: bool = False,
) -> Tuple[float, int]:
    """Best (s_i, z_i) for a single group segment."""
    s, z, _ = search_group_scales(np.asarray(w_i, dtype=np.float64).reshape(1, -1), np.asarray(H_ii), bits, spec, symmetric)
    return float(s[0]), int(z[0])


def init_layer_scales(
    W: np.ndarray,
    stats: Optional[LayerStats],
    partition: GroupPartition,
    bits: int,
    spec: GridSearchSpec = GridSearchSpec(),
    symmetric: bool = False,
    pool: Optional[ThreadPool] = None,
) -> GroupGrid:
    """Initialize every (row, group) scale independently.

    H_ii blocks are sliced from stats.H. With stats=None every block is the
    identity, which reproduces the plain GPTQ weight-space search.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != partition.d:
        raise ShapeMismatchError(f"Weight shape {W.shape} does not match partition length {partition.d}")
    if stats is not None and stats.d != partition.d:
        raise ShapeMismatchError(f"Hessian is {stats.d}x{stats.d} but rows have length {partition.d}")
    spec.validate()
    pool = pool or get_serial_pool()

    if stats is None:
        blocks = [np.eye(stop - start) for start, stop in map(partition.bounds, range(partition.n_g))]
    else:
        blocks = [block(stats.H, partition, i, i) for i in range(partition.n_g)]

    def run(rows: slice):
        n = rows.stop - rows.start
        s = np.empty((n, partition.n_g))
        z = np.empty((n, partition.n_g), dtype=np.int64)
        for i in range(partition.n_g):
            s[:, i], z[:, i], _ = search_group_scales(W[rows, partition.slice(i)], blocks[i], bits, spec, symmetric)
        return s, z

    results = pool.map_rows(run, W.shape[0])
    scales = np.concatenate([r[0] for r in results], axis=0)
    zeros = np.concatenate([r[1] for r in results], axis=0)
    logger.debug(
        "Initialized %d x %d group scales (%s search)",
        scales.shape[0], scales.shape[1], "identity" if stats is None else "input-aware",
    )
    return GroupGrid(bits, partition, scales, zeros, symmetric)
