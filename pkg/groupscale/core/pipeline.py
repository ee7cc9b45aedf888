"""Sequential whole-model quantization.

For every layer k, in order:

  1. X~_k from the full-precision prefix, X_k from the quantized-so-far prefix
  2. H_k from X_k; R_k from (X_k, X~_k), absent for the first layer
  3. grid: input-aware search on H_ii blocks (stage 1) or identity search (GPTQ default)
  4. GPTQ with error compensation on that grid
  5. closed-form CD refinement of the scales with (H_k, R_k) (stage 2)

Layer k+1 then sees the output of the quantized layer k.
"""

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, NumericError, ShapeMismatchError
from .gptq import gptq_quantize_layer, prepare_compensation
from .manifest import (
    DenseModel,
    LayerSpec,
    ModelManifest,
    apply_activation,
    load_manifest,
    save_manifest,
)
from .quantizer import MAX_BITS, MIN_BITS, QuantizedLayer, load_quantized_layer, save_quantized_layer
from .stage1_init import GridSearchSpec, init_layer_scales
from .stage2_refine import layer_loss_rows, refine_layer
from .statistics import DEFAULT_DAMP, GroupPartition, collect_stats, save_stats
from .synthetic import holdout_inputs
from .tensor_io import PathLike, Tensor
from .thread_pool import ThreadPool, get_serial_pool

logger = logging.getLogger(__name__)

METHODS = ("gptq_default", "two_stage", "stage1_only", "stage2_only")
METHOD_STAGES = {
    "gptq_default": (False, False),
    "two_stage": (True, True),
    "stage1_only": (True, False),
    "stage2_only": (False, True),
}
TIMING_KEYS = ("stats", "stage1", "gptq", "stage2", "forward", "total")


class PipelineConfig(NamedTuple):
    bits: int = 4
    group_size: int = 128
    symmetric: bool = False
    damp: float = DEFAULT_DAMP
    grid: GridSearchSpec = GridSearchSpec()
    sweeps: int = 1
    stage1: bool = True
    stage2: bool = True
    method: str = "two_stage"
    check_consistency: bool = False  # recompute q in full after every CD update

    @classmethod
    def for_method(cls, method: str, **overrides) -> "PipelineConfig":
        if method not in METHOD_STAGES:
            raise ConfigError(f"Unknown method {method!r}, expected one of {METHODS}")
        stage1, stage2 = METHOD_STAGES[method]
        return cls(method=method, stage1=stage1, stage2=stage2, **overrides)

    def validate(self) -> None:
        if self.method not in METHOD_STAGES:
            raise ConfigError(f"Unknown method {self.method!r}, expected one of {METHODS}")
        if (self.stage1, self.stage2) != METHOD_STAGES[self.method]:
            raise ConfigError(
                f"Method {self.method} requires stage1={METHOD_STAGES[self.method][0]}, "
                f"stage2={METHOD_STAGES[self.method][1]}"
            )
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ConfigError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.damp <= 0:
            raise ConfigError(f"damp must be > 0, got {self.damp}")
        if self.sweeps < 1:
            raise ConfigError(f"sweeps must be >= 1, got {self.sweeps}")
        try:
            self.grid.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        data = self._asdict()
        data["grid"] = self.grid._asdict()
        return data


class QuantizedModel:
    """Quantized layers plus the activations between them."""

    def __init__(self, layers: Sequence[QuantizedLayer], activations: Sequence[str]):
        if len(layers) != len(activations):
            raise ShapeMismatchError(f"{len(layers)} layers but {len(activations)} activations")
        self.layers = list(layers)
        self.activations = list(activations)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def to_dense(self) -> DenseModel:
        return DenseModel([layer.dequantize() for layer in self.layers], self.activations)


Model = Union[DenseModel, QuantizedModel]


def _dense(model: Model) -> DenseModel:
    return model.to_dense() if isinstance(model, QuantizedModel) else model


def _as_inputs(inputs, d_in: int) -> np.ndarray:
    if isinstance(inputs, Tensor):
        inputs = inputs.to_array()
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeMismatchError(f"Inputs must be (N x {d_in}), got shape {x.shape}")
    return x


def layer_forward(W: np.ndarray, activation: str, x: np.ndarray) -> np.ndarray:
    return apply_activation(activation, x @ W.T)


def forward(model: Model, inputs) -> List[np.ndarray]:
    """Input of every layer (post-activation of the previous one), then the model output."""
    dense = _dense(model)
    x = _as_inputs(inputs, dense.d_in)
    acts = [x]
    for W, activation in zip(dense.weights, dense.activations):
        x = layer_forward(W, activation, x)
        acts.append(x)
    return acts


def output_error(Q: np.ndarray, W: np.ndarray, x_q: np.ndarray, x_fp: np.ndarray) -> float:
    """(1/N) sum_n ||Q x_n - W x~_n||^2."""
    diff = x_q @ Q.T - x_fp @ W.T
    return float(np.mean(np.sum(diff * diff, axis=1)))


def evaluate(fp_model: Model, quantized_model: Model, eval_inputs) -> Dict[str, Any]:
    """Final-output MSE and per-layer true-output error on held-out inputs."""
    fp = _dense(fp_model)
    q = _dense(quantized_model)
    if [w.shape for w in fp.weights] != [w.shape for w in q.weights]:
        raise ShapeMismatchError("FP and quantized models have different layer shapes")
    fp_acts = forward(fp, eval_inputs)
    q_acts = forward(q, eval_inputs)
    per_layer = [
        output_error(Q, W, x_q, x_fp)
        for Q, W, x_q, x_fp in zip(q.weights, fp.weights, q_acts[:-1], fp_acts[:-1])
    ]
    final = q_acts[-1] - fp_acts[-1]
    return {
        "final_mse": float(np.mean(final * final)),
        "per_layer_error": per_layer,
        "n_samples": int(fp_acts[0].shape[0]),
    }


@dataclass
class LayerRecord:
    index: int
    rows: int
    n_groups: int
    loss_gptq_grid: float
    loss_after_stage1_grid: float
    loss_after_stage2: float
    deviation_constant: float
    output_error: float
    skips: int = 0
    clamps: int = 0
    rows_improved: int = 0


@dataclass
class RunReport:
    method: str
    config: Dict[str, Any]
    layers: List[LayerRecord] = field(default_factory=list)
    evaluation: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def total_loss(self) -> float:
        """Sum of per-layer calibration output errors (deviation-aware loss incl. its constant)."""
        return float(sum(layer.output_error for layer in self.layers))

    @property
    def total_layer_loss(self) -> float:
        return float(sum(layer.loss_after_stage2 for layer in self.layers))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "config": self.config,
            "layers": [asdict(layer) for layer in self.layers],
            "totals": {"loss": self.total_loss, "layer_loss": self.total_layer_loss},
            "evaluation": self.evaluation,
            "timings": self.timings,
        }


def _quantize_layer(
    k: int,
    W: np.ndarray,
    x_q: np.ndarray,
    x_fp: np.ndarray,
    config: PipelineConfig,
    pool: ThreadPool,
    timings: Dict[str, float],
    stats_dir: Optional[str],
) -> Tuple[QuantizedLayer, LayerRecord]:
    t0 = time.perf_counter()
    # The first layer sees unquantized inputs, so it gets no deviation term
    stats = collect_stats(x_q, x_fp if k > 0 else None, config.damp)
    partition = GroupPartition.create(W.shape[1], config.group_size)
    ctx = prepare_compensation(stats.damped_hessian())
    if stats_dir is not None:
        save_stats(stats, stats_dir, f"layer_{k:03d}")
    t1 = time.perf_counter()
    timings["stats"] += t1 - t0

    base_grid = init_layer_scales(W, None, partition, config.bits, config.grid, config.symmetric, pool)
    quantized = gptq_quantize_layer(W, base_grid, stats, pool, ctx)
    loss_gptq = float(layer_loss_rows(W, quantized.dequantize(), stats).sum())
    t3 = time.perf_counter()
    timings["gptq"] += t3 - t1

    loss_stage1 = loss_gptq
    if config.stage1:
        grid = init_layer_scales(W, stats, partition, config.bits, config.grid, config.symmetric, pool)
        t4 = time.perf_counter()
        timings["stage1"] += t4 - t3
        quantized = gptq_quantize_layer(W, grid, stats, pool, ctx)
        loss_stage1 = float(layer_loss_rows(W, quantized.dequantize(), stats).sum())
        timings["gptq"] += time.perf_counter() - t4

    loss_stage2 = loss_stage1
    skips = clamps = rows_improved = 0
    if config.stage2:
        t5 = time.perf_counter()
        quantized, refine_report = refine_layer(quantized, W, stats, config.sweeps, pool, config.check_consistency)
        loss_stage2 = float(layer_loss_rows(W, quantized.dequantize(), stats).sum())
        skips, clamps, rows_improved = refine_report.n_skips, refine_report.n_clamps, refine_report.rows_improved
        if not refine_report.monotone:
            logger.warning("Layer %d: refinement was not monotone on every update", k)
        timings["stage2"] += time.perf_counter() - t5

    deviation = (x_q - x_fp) @ W.T
    record = LayerRecord(
        index=k,
        rows=W.shape[0],
        n_groups=partition.n_g,
        loss_gptq_grid=loss_gptq,
        loss_after_stage1_grid=loss_stage1,
        loss_after_stage2=loss_stage2,
        deviation_constant=float(np.mean(np.sum(deviation * deviation, axis=1))),
        output_error=output_error(quantized.dequantize(), W, x_q, x_fp),
        skips=skips,
        clamps=clamps,
        rows_improved=rows_improved,
    )
    return quantized, record


def quantize_model(
    model: Union[ModelManifest, DenseModel],
    calibration,
    config: PipelineConfig,
    out_dir: Optional[PathLike] = None,
    pool: Optional[ThreadPool] = None,
    eval_inputs=None,
    eval_seed: int = 1,
    stats_dir: Optional[PathLike] = None,
) -> Tuple[QuantizedModel, RunReport]:
    """Quantize every layer in order and evaluate against the FP model on held-out inputs.

    When eval_inputs is None, held-out inputs are drawn from the Gaussian fitted
    to the calibration batch with `eval_seed`. Writing to `out_dir` requires a
    manifest (its weight paths are referenced by the quantized manifest).
    """
    config.validate()
    pool = pool or get_serial_pool()
    manifest = model if isinstance(model, ModelManifest) else None
    fp = DenseModel.from_manifest(manifest) if manifest is not None else model
    X = _as_inputs(calibration, fp.d_in)
    if X.shape[0] < 1:
        raise ShapeMismatchError("Calibration batch is empty")

    timings: Dict[str, float] = dict.fromkeys(TIMING_KEYS, 0.0)
    start = time.perf_counter()
    logger.info(
        "Quantizing %d layers: method=%s bits=%d group_size=%d samples=%d",
        fp.n_layers, config.method, config.bits, config.group_size, X.shape[0],
    )

    x_q = x_fp = X
    layers: List[QuantizedLayer] = []
    records: List[LayerRecord] = []
    for k, (W, activation) in enumerate(zip(fp.weights, fp.activations)):
        try:
            quantized, record = _quantize_layer(
                k, W, x_q, x_fp, config, pool, timings, os.fspath(stats_dir) if stats_dir else None
            )
        except NumericError as e:
            raise e.at_layer(k) from e
        except np.linalg.LinAlgError as e:
            raise NumericError(f"linear algebra failure: {e}", layer_index=k) from e
        logger.info(
            "Layer %d: loss gptq=%.6g stage1=%.6g stage2=%.6g (skips=%d clamps=%d)",
            k, record.loss_gptq_grid, record.loss_after_stage1_grid, record.loss_after_stage2,
            record.skips, record.clamps,
        )
        layers.append(quantized)
        records.append(record)

        t = time.perf_counter()
        x_fp = layer_forward(W, activation, x_fp)
        x_q = layer_forward(quantized.dequantize(), activation, x_q)
        timings["forward"] += time.perf_counter() - t

    qmodel = QuantizedModel(layers, fp.activations)
    if eval_inputs is None:
        eval_inputs = holdout_inputs(X, X.shape[0], eval_seed)
    evaluation = evaluate(fp, qmodel, eval_inputs)
    timings["total"] = time.perf_counter() - start

    report = RunReport(
        method=config.method,
        config=config.to_dict(),
        layers=records,
        evaluation=evaluation,
        timings=dict(timings),
    )
    logger.info("Done in %.2fs: total loss %.6g, held-out MSE %.6g", timings["total"], report.total_loss, evaluation["final_mse"])

    if out_dir is not None:
        if manifest is None:
            raise ConfigError("Writing a quantized model directory requires a manifest")
        save_quantized_model(qmodel, manifest, out_dir, config)
    return qmodel, report


def save_quantized_model(
    qmodel: QuantizedModel, manifest: ModelManifest, out_dir: PathLike, config: PipelineConfig
) -> None:
    """manifest.json referencing the FP weights plus per-layer QuantizedLayer files."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    layers = []
    for k, (spec, layer) in enumerate(zip(manifest.layers, qmodel.layers)):
        prefix = f"layer_{k:03d}"
        save_quantized_layer(layer, out_dir, prefix)
        weight_path = os.path.relpath(os.path.abspath(manifest.resolve(spec.weight_path)), os.path.abspath(out_dir))
        layers.append(LayerSpec(weight_path, spec.in_dim, spec.out_dim, spec.activation, quantized=prefix))
    metadata = dict(manifest.metadata)
    metadata.update({"quantized": True, "method": config.method, "bits": config.bits, "group_size": config.group_size})
    save_manifest(ModelManifest(layers, metadata, root=out_dir), out_dir)
    logger.info("Wrote quantized model to %s", out_dir)


def load_quantized_model(path: PathLike) -> QuantizedModel:
    manifest = load_manifest(path)
    layers = []
    for k, spec in enumerate(manifest.layers):
        if spec.quantized is None:
            raise ConfigError(f"Layer {k} of {path} has no quantized files; not a quantized model directory")
        layer = load_quantized_layer(manifest.root, spec.quantized)
        if layer.w_int.shape != (spec.out_dim, spec.in_dim):
            raise ShapeMismatchError(f"Layer {k} quantized shape {layer.w_int.shape} != manifest dims")
        layers.append(layer)
    return QuantizedModel(layers, [spec.activation for spec in manifest.layers])


def run_ablation(
    model: Union[ModelManifest, DenseModel],
    calibration,
    config: PipelineConfig,
    pool: Optional[ThreadPool] = None,
    eval_seed: int = 1,
    methods: Sequence[str] = METHODS,
) -> List[RunReport]:
    """One quantize_model run per method on identical inputs (stage ablation)."""
    fp = DenseModel.from_manifest(model) if isinstance(model, ModelManifest) else model
    X = _as_inputs(calibration, fp.d_in)
    eval_inputs = holdout_inputs(X, X.shape[0], eval_seed)
    reports = []
    for method in methods:
        stage1, stage2 = METHOD_STAGES[method]
        method_config = config._replace(method=method, stage1=stage1, stage2=stage2)
        _, report = quantize_model(fp, X, method_config, pool=pool, eval_inputs=eval_inputs)
        reports.append(report)
    return reports
