"""groupscale public API."""

__version__ = "0.1.0"

from .core.errors import (
    ConfigError,
    DegenerateStatsError,
    EmptyCalibrationError,
    FactorizationError,
    GroupScaleError,
    InstanceTooLargeError,
    ManifestError,
    NumericError,
    ShapeMismatchError,
    TensorFormatError,
)
from .core.tensor_io import Tensor, load_tensor, save_tensor, load_array, save_array
from .core.manifest import DenseModel, LayerSpec, ModelManifest, load_manifest, save_manifest
from .core.synthetic import SyntheticSpec, gen_synthetic, holdout_inputs, write_synthetic
from .core.statistics import (
    GroupPartition,
    LayerStats,
    block,
    collect_stats,
    dampen,
    estimate_deviation_correlation,
    estimate_hessian,
)
from .core.quantizer import (
    GroupGrid,
    QuantizedLayer,
    dequantize,
    effective_int,
    quantize_group,
    scale_from_beta,
)
from .core.gptq import gptq_quantize_layer, gptq_quantize_row, prepare_compensation
from .core.stage1_init import GridSearchSpec, init_group_scale, init_layer_scales
from .core.stage2_refine import RefineState, cd_update_scale, layer_loss, refine_layer, refine_scales
from .core.pipeline import (
    PipelineConfig,
    QuantizedModel,
    RunReport,
    evaluate,
    forward,
    load_quantized_model,
    quantize_model,
    run_ablation,
)
from .core.oracle import (
    ScanSpec,
    exhaustive_best_integers,
    run_verification,
    sample_loss,
    scan_minimize_scale,
)
from .core.thread_pool import ThreadPool
from .core.report_manager import ReportManager

__all__ = [
    "ConfigError", "DegenerateStatsError", "EmptyCalibrationError", "FactorizationError",
    "GroupScaleError", "InstanceTooLargeError", "ManifestError", "NumericError",
    "ShapeMismatchError", "TensorFormatError",
    "Tensor", "load_tensor", "save_tensor", "load_array", "save_array",
    "DenseModel", "LayerSpec", "ModelManifest", "load_manifest", "save_manifest",
    "SyntheticSpec", "gen_synthetic", "holdout_inputs", "write_synthetic",
    "GroupPartition", "LayerStats", "block", "collect_stats", "dampen",
    "estimate_deviation_correlation", "estimate_hessian",
    "GroupGrid", "QuantizedLayer", "dequantize", "effective_int", "quantize_group", "scale_from_beta",
    "gptq_quantize_layer", "gptq_quantize_row", "prepare_compensation",
    "GridSearchSpec", "init_group_scale", "init_layer_scales",
    "RefineState", "cd_update_scale", "layer_loss", "refine_layer", "refine_scales",
    "PipelineConfig", "QuantizedModel", "RunReport", "evaluate", "forward",
    "load_quantized_model", "quantize_model", "run_ablation",
    "ScanSpec", "exhaustive_best_integers", "run_verification", "sample_loss", "scan_minimize_scale",
    "ThreadPool", "ReportManager",
]
