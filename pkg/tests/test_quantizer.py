import unittest

import numpy as np
import pytest

from groupscale.core.quantizer import (
    GroupGrid,
    QuantizedLayer,
    dequantize,
    dequantize_rows,
    effective_int,
    load_quantized_layer,
    max_code,
    quantize_group,
    quantize_rows,
    save_quantized_layer,
    scale_from_beta,
    scales_from_beta,
)
from groupscale.core.statistics import GroupPartition


class TestScaleFromBeta(unittest.TestCase):
    def test_min_max_scale(self):
        """Test that beta = 1 gives the min-max scale."""
        s, z = scale_from_beta([0.0, 3.0], 1.0, 2)
        self.assertAlmostEqual(s, 1.0)
        self.assertEqual(z, 0)

    def test_linear_in_beta(self):
        """Test that the scale is linear in beta."""
        s, _ = scale_from_beta([0.0, 3.0], 0.5, 2)
        self.assertAlmostEqual(s, 0.5)

    def test_zero_point_for_signed_range(self):
        """Test the zero-point of a range straddling zero."""
        s, z = scale_from_beta([-1.0, 1.0], 1.0, 2)
        self.assertAlmostEqual(s, 2.0 / 3.0)
        self.assertEqual(z, 2)
        q = dequantize(quantize_group([-1.0, 1.0], s, z, 2), s, z)
        np.testing.assert_allclose(q, [-1.0, 1.0], atol=s / 2)

    def test_symmetric_forces_zero_point(self):
        """Test that symmetric mode pins the zero-point to 0."""
        _, z = scale_from_beta([-1.0, 1.0], 1.0, 2, symmetric=True)
        self.assertEqual(z, 0)

    def test_constant_positive_segment(self):
        """Test that a constant positive segment is represented exactly."""
        s, z = scale_from_beta([0.5, 0.5], 1.0, 2)
        self.assertAlmostEqual(s, 0.5 / 3)
        self.assertEqual(z, 0)
        np.testing.assert_allclose(dequantize(quantize_group([0.5, 0.5], s, z, 2), s, z), [0.5, 0.5])

    def test_constant_negative_segment(self):
        """Test that a constant negative segment puts the zero-point at the top code."""
        s, z = scale_from_beta([-0.5, -0.5], 1.0, 2)
        self.assertEqual(z, 3)
        np.testing.assert_allclose(dequantize(quantize_group([-0.5, -0.5], s, z, 2), s, z), [-0.5, -0.5])

    def test_all_zero_segment_gets_positive_scale(self):
        """Test that an all-zero segment gets a strictly positive scale."""
        s, _ = scale_from_beta([0.0, 0.0, 0.0], 1.0, 4)
        self.assertGreater(s, 0.0)

    def test_beta_out_of_range(self):
        """Test that beta outside (0, 1] is rejected."""
        with self.assertRaises(ValueError):
            scale_from_beta([0.0, 1.0], 0.0, 2)
        with self.assertRaises(ValueError):
            scale_from_beta([0.0, 1.0], 1.5, 2)

    def test_rows_are_independent(self):
        """Test that each row gets its own scale and zero-point."""
        W = np.array([[0.0, 3.0], [-1.0, 1.0]])
        s, z = scales_from_beta(W, 1.0, 2)
        for r in range(2):
            s_r, z_r = scale_from_beta(W[r], 1.0, 2)
            self.assertEqual(s[r], s_r)
            self.assertEqual(z[r], z_r)


class TestQuantizeGroup(unittest.TestCase):
    def test_on_grid(self):
        """Test that values already on the grid keep their codes."""
        np.testing.assert_array_equal(quantize_group([0, 1, 2, 3], 1.0, 0, 2), [0, 1, 2, 3])

    def test_zero_point_shift(self):
        """Test that the zero-point shifts the codes."""
        np.testing.assert_array_equal(quantize_group([-1, 0, 1], 1.0, 1, 2), [0, 1, 2])

    def test_half_to_even(self):
        """Test that ties round half to even."""
        np.testing.assert_array_equal(quantize_group([0.49, 0.5, 1.5], 1.0, 0, 2), [0, 0, 2])

    def test_clamps_to_range(self):
        """Test that out-of-range values clamp to the code range."""
        np.testing.assert_array_equal(quantize_group([-5.0, 9.0], 1.0, 0, 2), [0, 3])

    def test_monotone(self):
        """Test that codes never decrease as the input grows."""
        w = np.sort(np.random.default_rng(0).uniform(-2, 2, 200))
        codes = quantize_group(w, 0.3, 5, 4)
        self.assertTrue(np.all(np.diff(codes) >= 0))


class TestDequantize(unittest.TestCase):
    def test_identity_grid(self):
        """Test dequantization on the unit grid."""
        np.testing.assert_array_equal(dequantize([0, 1, 2, 3], 1.0, 0), [0, 1, 2, 3])

    def test_half_scale_with_zero_point(self):
        """Test dequantization with a half-unit scale and a zero-point."""
        np.testing.assert_array_equal(dequantize([0, 1, 2], 0.5, 1), [-0.5, 0, 0.5])

    def test_effective_int(self):
        """Test the effective integer v = w_int - z."""
        np.testing.assert_array_equal(effective_int([0, 3], 2), [-2, 1])
        np.testing.assert_array_equal(effective_int([4, 1, 0], 0), [4, 1, 0])

    def test_dequantize_is_scaled_effective_int(self):
        """Test that dequantize equals scale times the effective integer."""
        w_int = np.array([0, 5, 7, 2])
        np.testing.assert_array_equal(dequantize(w_int, 0.37, 3), 0.37 * effective_int(w_int, 3))


def test_rounding_error_bound():
    """Test that min-max rounding error stays within half a step."""
    rng = np.random.default_rng(1)
    for bits in (2, 3, 4, 8):
        w = rng.standard_normal(16)
        s, z = scale_from_beta(w, 1.0, bits)
        q = dequantize(quantize_group(w, s, z, bits), s, z)
        assert np.max(np.abs(q - w)) <= s / 2 + 1e-12


def _grid(W, g, bits, symmetric=False):
    rows, d = W.shape
    partition = GroupPartition.create(d, g)
    scales = np.empty((rows, partition.n_g))
    zeros = np.empty((rows, partition.n_g), dtype=np.int64)
    for i in range(partition.n_g):
        scales[:, i], zeros[:, i] = scales_from_beta(W[:, partition.slice(i)], 1.0, bits, symmetric)
    return GroupGrid(bits, partition, scales, zeros, symmetric)


class TestGroupGrid(unittest.TestCase):
    def test_rejects_non_positive_scale(self):
        """Test that a zero scale is rejected."""
        with self.assertRaises(ValueError):
            GroupGrid(2, GroupPartition.create(4, 2), np.array([[1.0, 0.0]]), np.zeros((1, 2)))

    def test_rejects_zero_point_out_of_range(self):
        """Test that a zero-point past the top code is rejected."""
        with self.assertRaises(ValueError):
            GroupGrid(2, GroupPartition.create(4, 2), np.ones((1, 2)), np.array([[0, 4]]))

    def test_rejects_bits_out_of_range(self):
        """Test that one-bit grids are rejected."""
        with self.assertRaises(ValueError):
            GroupGrid(1, GroupPartition.create(4, 2), np.ones((1, 2)), np.zeros((1, 2)))
        with self.assertRaises(ValueError):
            GroupGrid(17, GroupPartition.create(4, 2), np.ones((1, 2)), np.zeros((1, 2)))

    def test_row_view(self):
        """Test that a row view carries that row's scales and zero-points."""
        W = np.random.default_rng(2).standard_normal((3, 6))
        grid = _grid(W, 4, 3)
        row = grid.row(1)
        s_full, z_full = row.expanded()
        self.assertEqual(s_full.shape, (6,))
        self.assertEqual(row.maxq, max_code(3))
        np.testing.assert_array_equal(s_full[:4], grid.scales[1, 0])

    def test_rtn_rows_match_quantize_group(self):
        """Test that RTN on a layer matches per-group quantize_group."""
        W = np.random.default_rng(3).standard_normal((4, 10))
        grid = _grid(W, 4, 2)
        codes = quantize_rows(W, grid)
        for r in range(4):
            for i in range(grid.partition.n_g):
                sl = grid.partition.slice(i)
                np.testing.assert_array_equal(
                    codes[r, sl], quantize_group(W[r, sl], grid.scales[r, i], grid.zeros[r, i], 2)
                )

    def test_quantized_layer_range_check(self):
        """Test that QuantizedLayer rejects codes outside the range."""
        grid = _grid(np.random.default_rng(4).standard_normal((2, 4)), 2, 2)
        with self.assertRaises(ValueError):
            QuantizedLayer(np.full((2, 4), 4), grid)


def test_quantized_layer_round_trip(tmp_path):
    """Test that a quantized layer survives a save and load."""
    W = np.random.default_rng(5).standard_normal((5, 12))
    grid = _grid(W, 5, 3)
    layer = QuantizedLayer(quantize_rows(W, grid), grid)
    save_quantized_layer(layer, tmp_path, "layer_000")
    loaded = load_quantized_layer(tmp_path, "layer_000")
    np.testing.assert_array_equal(loaded.w_int, layer.w_int)
    np.testing.assert_array_equal(loaded.grid.zeros, grid.zeros)
    np.testing.assert_array_equal(loaded.grid.scales, grid.scales.astype(np.float32).astype(np.float64))
    assert loaded.grid.bits == 3
    assert loaded.grid.partition == grid.partition
    np.testing.assert_allclose(loaded.dequantize(), dequantize_rows(layer.w_int, grid), rtol=1e-6)


def test_symmetric_flag_persists(tmp_path):
    """Test that the symmetric flag is saved with the layer."""
    W = np.abs(np.random.default_rng(6).standard_normal((2, 4)))
    grid = _grid(W, 4, 2, symmetric=True)
    save_quantized_layer(QuantizedLayer(quantize_rows(W, grid), grid), tmp_path, "q")
    assert load_quantized_layer(tmp_path, "q").grid.symmetric is True


@pytest.mark.parametrize("bits", [2, 16])
def test_max_code(bits):
    """Test the top code for each bit width."""
    assert max_code(bits) == 2 ** bits - 1
