"""
Tests for the input-aware clipping search.
"""

import unittest

import numpy as np

from groupscale.core.errors import ShapeMismatchError
from groupscale.core.oracle import random_spd
from groupscale.core.quantizer import max_code, scales_from_beta
from groupscale.core.stage1_init import (
    GridSearchSpec,
    group_loss,
    init_group_scale,
    init_layer_scales,
    search_group_scales,
)
from groupscale.core.statistics import GroupPartition, LayerStats, collect_stats
from groupscale.core.thread_pool import ThreadPool


def candidate_losses(w, H_ii, bits, spec):
    """Loss of every beta candidate, evaluated one at a time."""
    losses = []
    for beta in spec.betas():
        s, z = scales_from_beta(w[None, :], beta, bits)
        codes = np.clip(np.rint(w / s[0]) + z[0], 0, max_code(bits))
        e = s[0] * (codes - z[0]) - w
        losses.append(float(e @ H_ii @ e))
    return np.array(losses)


class TestGridSearchSpec(unittest.TestCase):
    def test_default_candidates(self):
        """Test the default candidate betas."""
        betas = GridSearchSpec().betas()
        self.assertEqual(betas.size, 101)
        self.assertEqual(betas[0], 1.0)
        self.assertAlmostEqual(betas[-1], 0.2)
        self.assertTrue(np.all(np.diff(betas) < 0))

    def test_validation(self):
        """Test that bad search settings are rejected."""
        with self.assertRaises(ValueError):
            GridSearchSpec(n_candidates=0).validate()
        with self.assertRaises(ValueError):
            GridSearchSpec(max_shrink=1.0).validate()


class TestSearchGroupScales(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.w = rng.standard_normal(4)
        self.H = random_spd(rng, 4)
        self.spec = GridSearchSpec()

    def test_not_worse_than_full_range(self):
        """Test that the chosen grid is no worse than the full min-max range."""
        s, z, loss = search_group_scales(self.w[None, :], self.H, 2, self.spec)
        losses = candidate_losses(self.w, self.H, 2, self.spec)
        self.assertLessEqual(loss[0], losses[0] * (1 + 1e-12))

    def test_equals_dense_scan_minimum(self):
        """Test that the search returns the dense scan minimum."""
        _, _, loss = search_group_scales(self.w[None, :], self.H, 2, self.spec)
        losses = candidate_losses(self.w, self.H, 2, self.spec)
        self.assertAlmostEqual(loss[0], losses.min(), delta=1e-12 * max(1.0, losses.min()))

    def test_scaled_identity_gives_same_choice(self):
        """Test that scaling the Hessian does not change the choice."""
        W = np.random.default_rng(1).standard_normal((10, 6))
        base = search_group_scales(W, np.eye(6), 3)
        for c in (0.25, 4.0):
            scaled = search_group_scales(W, c * np.eye(6), 3)
            np.testing.assert_array_equal(scaled[0], base[0])
            np.testing.assert_array_equal(scaled[1], base[1])

    def test_ties_keep_largest_beta(self):
        """Test that ties go to the largest beta."""
        # a zero Hessian block makes every candidate tie
        W = np.random.default_rng(2).standard_normal((3, 5))
        s, z, _ = search_group_scales(W, np.zeros((5, 5)), 2)
        s_full, z_full = scales_from_beta(W, 1.0, 2)
        np.testing.assert_array_equal(s, s_full)
        np.testing.assert_array_equal(z, z_full)

    def test_shape_mismatch(self):
        """Test that a Hessian of the wrong size is rejected."""
        with self.assertRaises(ShapeMismatchError):
            search_group_scales(np.zeros((2, 4)), np.eye(3), 2)

    def test_init_group_scale_scalar(self):
        """Test the scalar single-group entry point."""
        s, z = init_group_scale(self.w, self.H, 2)
        self.assertIsInstance(s, float)
        self.assertIsInstance(z, int)
        self.assertGreater(s, 0)


def test_group_loss_matches_quadratic_form():
    """Test the vectorized group loss against e^T H e."""
    rng = np.random.default_rng(3)
    err = rng.standard_normal((5, 4))
    H = random_spd(rng, 4)
    np.testing.assert_allclose(group_loss(err, H), np.einsum("ri,ij,rj->r", err, H, err), rtol=1e-12)


def test_identity_search_when_stats_absent():
    """Test that missing stats fall back to an identity Hessian."""
    rng = np.random.default_rng(4)
    W = rng.standard_normal((6, 8))
    partition = GroupPartition.create(8, 4)
    plain = init_layer_scales(W, None, partition, 2)
    explicit = init_layer_scales(W, LayerStats(H=np.eye(8)), partition, 2)
    np.testing.assert_array_equal(plain.scales, explicit.scales)
    np.testing.assert_array_equal(plain.zeros, explicit.zeros)


def test_input_aware_search_lowers_group_loss():
    """Test that the input-aware grid never has higher group loss than the stats-free one."""
    rng = np.random.default_rng(5)
    W = rng.standard_normal((12, 16))
    X = rng.standard_normal((200, 16)) * np.exp(rng.standard_normal(16))
    stats = collect_stats(X)
    partition = GroupPartition.create(16, 4)
    plain = init_layer_scales(W, None, partition, 2)
    aware = init_layer_scales(W, stats, partition, 2)
    for i in range(partition.n_g):
        sl = partition.slice(i)
        H_ii = stats.H[sl, sl]
        for r in range(12):
            def loss(grid):
                s, z = grid.scales[r, i], grid.zeros[r, i]
                codes = np.clip(np.rint(W[r, sl] / s) + z, 0, 3)
                e = s * (codes - z) - W[r, sl]
                return e @ H_ii @ e
            assert loss(aware) <= loss(plain) * (1 + 1e-9) + 1e-15


def test_row_permutation_permutes_grid():
    """Test that permuting rows permutes the grid."""
    rng = np.random.default_rng(6)
    W = rng.standard_normal((9, 8))
    stats = collect_stats(rng.standard_normal((30, 8)))
    partition = GroupPartition.create(8, 4)
    perm = rng.permutation(9)
    a = init_layer_scales(W, stats, partition, 3)
    b = init_layer_scales(W[perm], stats, partition, 3)
    np.testing.assert_array_equal(a.scales[perm], b.scales)
    np.testing.assert_array_equal(a.zeros[perm], b.zeros)


def test_parallel_matches_serial():
    """Test that the thread pool does not change the grid."""
    rng = np.random.default_rng(7)
    W = rng.standard_normal((8, 16))
    stats = collect_stats(rng.standard_normal((40, 16)))
    partition = GroupPartition.create(16, 4)
    serial = init_layer_scales(W, stats, partition, 2)
    with ThreadPool(max_workers=4) as pool:
        parallel = init_layer_scales(W, stats, partition, 2, pool=pool)
    np.testing.assert_array_equal(serial.scales, parallel.scales)
    np.testing.assert_array_equal(serial.zeros, parallel.zeros)


def test_channel_wise_group():
    """Test that a group larger than the channel count gives one group per row."""
    W = np.random.default_rng(8).standard_normal((4, 6))
    grid = init_layer_scales(W, None, GroupPartition.create(6, 64), 4)
    assert grid.scales.shape == (4, 1)
