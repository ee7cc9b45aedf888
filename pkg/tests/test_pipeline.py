"""
Tests for the sequential quantization pipeline and stage ablation.
"""

import json
import unittest

import numpy as np
import pytest

from groupscale.core.errors import ConfigError, ShapeMismatchError
from groupscale.core.gptq import gptq_quantize_layer
from groupscale.core.manifest import DenseModel
from groupscale.core.pipeline import (
    METHODS,
    PipelineConfig,
    QuantizedModel,
    evaluate,
    forward,
    load_quantized_model,
    quantize_model,
    run_ablation,
)
from groupscale.core.stage1_init import init_layer_scales
from groupscale.core.statistics import GroupPartition, collect_stats
from groupscale.core.synthetic import SyntheticSpec, gen_synthetic, write_synthetic
from groupscale.core.thread_pool import ThreadPool


def dense_from(synthetic):
    return DenseModel([t.to_array() for t in synthetic.weights], [layer.activation for layer in synthetic.manifest.layers])


def small_model(seed=0, n_layers=2, d=16, n_samples=64):
    synthetic = gen_synthetic(SyntheticSpec(d_in=d, d_out=d, n_layers=n_layers, n_samples=n_samples, seed=seed))
    return synthetic, dense_from(synthetic), synthetic.calibration.to_array()


class TestForward(unittest.TestCase):
    def test_identity_passthrough(self):
        """Test that an identity layer with no activation passes inputs through."""
        x = np.random.default_rng(0).standard_normal((5, 3))
        acts = forward(DenseModel([np.eye(3)], ["none"]), x)
        np.testing.assert_array_equal(acts[-1], x)

    def test_relu_zeroes_negative_outputs(self):
        """Test that relu zeroes negative outputs."""
        x = np.abs(np.random.default_rng(1).standard_normal((4, 3)))
        acts = forward(DenseModel([-np.eye(3)], ["relu"]), x)
        np.testing.assert_array_equal(acts[-1], np.zeros((4, 3)))

    def test_returns_every_layer_input_and_output(self):
        """Test that forward returns the input plus every layer output."""
        model = DenseModel([np.ones((4, 3)), np.ones((2, 4))], ["relu", "none"])
        acts = forward(model, np.ones((6, 3)))
        self.assertEqual([a.shape for a in acts], [(6, 3), (6, 4), (6, 2)])

    def test_input_width_checked(self):
        """Test that inputs of the wrong width are rejected."""
        with self.assertRaises(ShapeMismatchError):
            forward(DenseModel([np.eye(3)], ["none"]), np.ones((2, 4)))


class TestPipelineConfig(unittest.TestCase):
    def test_for_method_sets_stages(self):
        """Test that for_method sets the stage flags."""
        config = PipelineConfig.for_method("stage1_only", bits=3)
        self.assertEqual((config.stage1, config.stage2, config.bits), (True, False, 3))
        config.validate()

    def test_unknown_method(self):
        """Test that an unknown method name raises ConfigError."""
        with self.assertRaises(ConfigError):
            PipelineConfig.for_method("nope")

    def test_rejects_one_bit(self):
        """Test that one-bit quantization is rejected."""
        with self.assertRaises(ConfigError):
            PipelineConfig(bits=1).validate()

    def test_rejects_inconsistent_stages(self):
        """Test that stage flags contradicting the method are rejected."""
        with self.assertRaises(ConfigError):
            PipelineConfig(method="gptq_default").validate()

    def test_rejects_bad_grid(self):
        """Test that an out-of-range shrink bound is rejected."""
        with self.assertRaises(ConfigError):
            PipelineConfig(grid=PipelineConfig().grid._replace(max_shrink=1.5)).validate()

    def test_to_dict_is_json_ready(self):
        """Test that the config serializes to JSON."""
        data = json.loads(json.dumps(PipelineConfig().to_dict()))
        self.assertEqual(data["grid"]["n_candidates"], 100)


def test_evaluate_identical_models_is_zero():
    """Test that evaluating a model against itself gives zero error."""
    _, model, X = small_model()
    result = evaluate(model, model, X)
    assert result["final_mse"] == 0.0
    assert result["per_layer_error"] == [0.0, 0.0]
    assert result["n_samples"] == X.shape[0]


def test_gptq_default_matches_manual_baseline():
    """Test that gptq_default matches a hand-assembled min-max GPTQ run."""
    _, model, X = small_model(n_layers=1)
    config = PipelineConfig.for_method("gptq_default", bits=3, group_size=8)
    qmodel, _ = quantize_model(model, X, config)
    W = model.weights[0]
    stats = collect_stats(X, None, config.damp)
    grid = init_layer_scales(W, None, GroupPartition.create(W.shape[1], 8), 3, config.grid)
    manual = gptq_quantize_layer(W, grid, stats)
    np.testing.assert_array_equal(qmodel.layers[0].w_int, manual.w_int)
    np.testing.assert_array_equal(qmodel.layers[0].grid.scales, manual.grid.scales)


def test_sixteen_bits_is_nearly_lossless():
    """Test that 16-bit quantization is nearly lossless."""
    _, model, X = small_model(seed=2)
    _, report = quantize_model(model, X, PipelineConfig(bits=16, group_size=8))
    reference = forward(model, X)[-1]
    assert report.evaluation["final_mse"] <= 1e-6 * float(np.mean(reference * reference))


def test_stages_never_raise_layer_loss():
    """Test that refinement never raises a layer's loss."""
    _, model, X = small_model(seed=3, n_layers=3)
    _, report = quantize_model(model, X, PipelineConfig(bits=2, group_size=8))
    for layer in report.layers:
        slack = 1e-9 * abs(layer.loss_after_stage1_grid) + 1e-12
        assert layer.loss_after_stage2 <= layer.loss_after_stage1_grid + slack
    assert report.timings["total"] >= report.timings["gptq"]
    assert set(report.to_dict()) == {"method", "config", "layers", "totals", "evaluation", "timings"}


def test_deviation_statistics_start_at_second_layer(tmp_path):
    """Test that R is saved from the second layer on."""
    _, model, X = small_model(seed=4)
    quantize_model(model, X, PipelineConfig(bits=3, group_size=8), stats_dir=tmp_path)
    assert json.loads((tmp_path / "layer_000.json").read_text())["has_R"] is False
    assert json.loads((tmp_path / "layer_001.json").read_text())["has_R"] is True


def test_quantized_directory_round_trip(tmp_path):
    """Test that a quantized directory loads back with the same codes."""
    synthetic, model, X = small_model(seed=5)
    write_synthetic(synthetic, tmp_path / "model")
    qmodel, _ = quantize_model(synthetic.manifest, X, PipelineConfig(bits=4, group_size=8), out_dir=tmp_path / "q")
    loaded = load_quantized_model(tmp_path / "q")
    assert isinstance(loaded, QuantizedModel)
    assert loaded.activations == qmodel.activations
    for a, b in zip(loaded.layers, qmodel.layers):
        np.testing.assert_array_equal(a.w_int, b.w_int)
        np.testing.assert_allclose(a.dequantize(), b.dequantize(), rtol=1e-6)


def test_out_dir_requires_manifest(tmp_path):
    """Test that out_dir needs a manifest-backed model."""
    _, model, X = small_model(seed=6, n_layers=1)
    with pytest.raises(ConfigError):
        quantize_model(model, X, PipelineConfig(bits=4, group_size=8), out_dir=tmp_path)


def test_thread_count_does_not_change_results():
    """Test that the worker count does not change results."""
    _, model, X = small_model(seed=7, d=40, n_samples=96)
    config = PipelineConfig(bits=2, group_size=8)
    serial, a = quantize_model(model, X, config)
    with ThreadPool(max_workers=4) as pool:
        parallel, b = quantize_model(model, X, config, pool=pool)
    for x, y in zip(serial.layers, parallel.layers):
        np.testing.assert_array_equal(x.w_int, y.w_int)
        np.testing.assert_array_equal(x.grid.scales, y.grid.scales)
    assert a.evaluation == b.evaluation


def test_ablation_ordering_on_benchmark():
    """Test that each stage beats the baseline and both stages beat either one alone."""
    counts = dict.fromkeys(
        (
            "stage1_beats_default",
            "stage2_beats_default",
            "both_beats_stage1",
            "both_beats_stage2",
            "both_beats_default",
            "both_is_best",
        ),
        0,
    )
    n_seeds = 20
    for seed in range(n_seeds):
        synthetic = gen_synthetic(SyntheticSpec(d_in=128, d_out=128, n_layers=3, n_samples=256, seed=seed))
        reports = run_ablation(dense_from(synthetic), synthetic.calibration, PipelineConfig(bits=2, group_size=32))
        totals = {report.method: report.total_loss for report in reports}
        assert set(totals) == set(METHODS)
        counts["stage1_beats_default"] += totals["stage1_only"] < totals["gptq_default"]
        counts["stage2_beats_default"] += totals["stage2_only"] < totals["gptq_default"]
        counts["both_beats_stage1"] += totals["two_stage"] < totals["stage1_only"]
        counts["both_beats_stage2"] += totals["two_stage"] < totals["stage2_only"]
        counts["both_beats_default"] += totals["two_stage"] < totals["gptq_default"]
        counts["both_is_best"] += totals["two_stage"] == min(totals.values())
    for name, count in counts.items():
        assert count >= 0.9 * n_seeds, name
