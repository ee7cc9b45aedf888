"""Command-line front end.

    groupscale quantize      --model m/ --calib c.qt --out q/ --report r.json
    groupscale compare       --model m/ --calib c.qt --report cmp.json
    groupscale eval          --model m/ --quantized q/ --calib c.qt --report e.json
    groupscale gen-synthetic --out m/ --d-in 128 --d-out 128 --n-layers 3 --seed 7
    groupscale verify        --seed 0 --instances 100 --report v.json

Exit codes: 0 ok, 1 configuration or shape error, 2 numeric failure,
3 I/O or file format error, 4 verification violations.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, NamedTuple, Optional

from .core.errors import (
    ConfigError,
    InstanceTooLargeError,
    ManifestError,
    NumericError,
    ShapeMismatchError,
    TensorFormatError,
)
from .core.manifest import DenseModel, load_manifest
from .core.oracle import run_verification
from .core.pipeline import METHODS, PipelineConfig, QuantizedModel, evaluate, load_quantized_model, quantize_model, run_ablation
from .core.report_manager import ReportManager, comparison_dict, format_comparison_table
from .core.stage1_init import GridSearchSpec
from .core.synthetic import WEIGHT_DISTS, SyntheticSpec, gen_synthetic, holdout_inputs, write_synthetic
from .core.tensor_io import load_array
from .core.thread_pool import ThreadPool

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3
EXIT_VIOLATIONS = 4

DEFAULT_LOG_LEVEL = "INFO"

# Values used when neither --config nor a flag sets an option
DEFAULTS: Dict[str, Any] = {
    "bits": 4,
    "group_size": 128,
    "symmetric": False,
    "damp": 0.01,
    "grid_m": 100,
    "max_shrink": 0.8,
    "sweeps": 1,
    "method": "two_stage",
    "check_consistency": False,
    "seed": 0,
    "threads": None,
}


def _add_global_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file of option overrides; explicit flags win.")
    parser.add_argument("--seed", type=int, default=None, help="Seed (held-out inputs use seed + 1).")
    parser.add_argument("--threads", type=int, default=None, help="Worker thread cap (results do not depend on it).")
    parser.add_argument(
        "--log-level", default=DEFAULT_LOG_LEVEL, choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log level."
    )


def _add_pipeline_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="Model directory or manifest.json.")
    parser.add_argument("--calib", required=True, help="Calibration inputs (.qt, N x d_in).")
    parser.add_argument("--bits", type=int, default=None, help="Bit-width in [2, 16] (default 4).")
    parser.add_argument("--group-size", type=int, default=None, help="Group size g (default 128).")
    parser.add_argument("--symmetric", action="store_true", default=None, help="Force zero-points to 0.")
    parser.add_argument("--damp", type=float, default=None, help="Hessian damping fraction (default 0.01).")
    parser.add_argument("--grid-m", type=int, default=None, help="Number of clipping steps M (default 100).")
    parser.add_argument("--max-shrink", type=float, default=None, help="Largest clipping shrink (default 0.8).")
    parser.add_argument("--sweeps", type=int, default=None, help="Refinement sweeps (default 1).")
    parser.add_argument(
        "--check-consistency", action="store_true", default=None,
        help="Recompute dequantized rows in full after every refinement update.",
    )
    parser.add_argument("--csv", help="Also write a flat per-layer CSV here.")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports bad flags as a ConfigError instead of exiting."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="groupscale",
        description="GPTQ group-wise quantization with input-aware scale initialization and refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    quantize = sub.add_parser("quantize", help="Quantize a model and write the quantized directory.")
    _add_global_options(quantize)
    _add_pipeline_options(quantize)
    quantize.add_argument("--method", choices=METHODS, default=None, help="Stage selection (default two_stage).")
    quantize.add_argument("--out", required=True, help="Quantized model directory.")
    quantize.add_argument("--report", required=True, help="RunReport JSON path.")
    quantize.add_argument("--save-stats", action="store_true", help="Also write per-layer H/R under <out>/stats.")
    quantize.set_defaults(func=cmd_quantize)

    compare = sub.add_parser("compare", help="Run all four methods on identical inputs and tabulate losses.")
    _add_global_options(compare)
    _add_pipeline_options(compare)
    compare.add_argument("--report", required=True, help="Comparison JSON path.")
    compare.set_defaults(func=cmd_compare)

    ev = sub.add_parser("eval", help="Compare a quantized model against its FP model on held-out inputs.")
    _add_global_options(ev)
    ev.add_argument("--model", required=True, help="FP model directory or manifest.json.")
    ev.add_argument("--quantized", required=True, help="Quantized model directory (or another FP model).")
    ev.add_argument("--inputs", help="Evaluation inputs (.qt). Drawn from --calib statistics when absent.")
    ev.add_argument("--calib", help="Calibration inputs used to fit held-out inputs.")
    ev.add_argument("--n-samples", type=int, default=None, help="Held-out sample count (default: calibration size).")
    ev.add_argument("--report", required=True, help="Metrics JSON path.")
    ev.set_defaults(func=cmd_eval)

    gen = sub.add_parser("gen-synthetic", help="Write a seeded synthetic MLP and calibration batch.")
    _add_global_options(gen)
    gen.add_argument("--out", required=True, help="Output directory.")
    gen.add_argument("--d-in", type=int, default=128)
    gen.add_argument("--d-out", type=int, default=128)
    gen.add_argument("--n-layers", type=int, default=3)
    gen.add_argument("--n-samples", type=int, default=256)
    gen.add_argument("--weight-dist", choices=WEIGHT_DISTS, default="gauss")
    gen.add_argument("--activation", choices=["none", "relu"], default="relu")
    gen.set_defaults(func=cmd_gen_synthetic)

    verify = sub.add_parser("verify", help="Run the brute-force oracle suite.")
    _add_global_options(verify)
    verify.add_argument("--instances", type=int, default=100, help="Random instances per check.")
    verify.add_argument("--report", help="Violations JSON path.")
    verify.set_defaults(func=cmd_verify)
    return parser


def resolve_options(args: argparse.Namespace) -> Dict[str, Any]:
    """Defaults, then --config, then explicit flags."""
    options = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, "r") as f:
                overrides = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
        if not isinstance(overrides, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(overrides) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{args.config}: unknown options {unknown}")
        options.update(overrides)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    return options


def pipeline_config(options: Dict[str, Any]) -> PipelineConfig:
    method = options["method"]
    try:
        config = PipelineConfig.for_method(
            method,
            bits=int(options["bits"]),
            group_size=int(options["group_size"]),
            symmetric=bool(options["symmetric"]),
            damp=float(options["damp"]),
            grid=GridSearchSpec(int(options["grid_m"]), float(options["max_shrink"])),
            sweeps=int(options["sweeps"]),
            check_consistency=bool(options["check_consistency"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid option value: {e}") from e
    config.validate()
    return config


def _check_distinct(**paths: Optional[str]) -> None:
    seen: Dict[str, str] = {}
    for name, path in paths.items():
        if path is None:
            continue
        key = os.path.abspath(path)
        if key in seen:
            raise ConfigError(f"--{seen[key]} and --{name} point to the same path {path}")
        seen[key] = name


def _threads(options: Dict[str, Any]) -> Optional[int]:
    threads = options["threads"]
    if threads is not None and int(threads) < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    return threads


class CliConfig(NamedTuple):
    """Everything a subcommand runs with, after defaults, --config and flags are merged."""
    pipeline: Optional[PipelineConfig]
    paths: Dict[str, str]
    seed: int = 0
    threads: Optional[int] = None
    log_level: str = DEFAULT_LOG_LEVEL


def cli_config(args: argparse.Namespace, path_names: List[str], with_pipeline: bool = True) -> CliConfig:
    options = resolve_options(args)
    paths = {name: getattr(args, name) for name in path_names if getattr(args, name, None) is not None}
    _check_distinct(**paths)
    return CliConfig(
        pipeline=pipeline_config(options) if with_pipeline else None,
        paths=paths,
        seed=int(options["seed"]),
        threads=_threads(options),
        log_level=args.log_level,
    )


def cmd_quantize(args: argparse.Namespace) -> int:
    cfg = cli_config(args, ["model", "calib", "out", "report", "csv"])
    manifest = load_manifest(args.model)
    calibration = load_array(args.calib)
    stats_dir = os.path.join(args.out, "stats") if args.save_stats else None

    with ThreadPool(cfg.threads) as pool:
        _, report = quantize_model(
            manifest, calibration, cfg.pipeline, out_dir=args.out, pool=pool,
            eval_seed=cfg.seed + 1, stats_dir=stats_dir,
        )
    manager = ReportManager(args.report)
    manager.save(report.to_dict())
    if args.csv:
        manager.save_csv([report], args.csv)
    logger.info("Report written to %s", args.report)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = cli_config(args, ["model", "calib", "report", "csv"])
    manifest = load_manifest(args.model)
    calibration = load_array(args.calib)

    with ThreadPool(cfg.threads) as pool:
        reports = run_ablation(manifest, calibration, cfg.pipeline, pool=pool, eval_seed=cfg.seed + 1)
    manager = ReportManager(args.report)
    manager.save(comparison_dict(reports))
    if args.csv:
        manager.save_csv(reports, args.csv)
    print(format_comparison_table(reports))
    return EXIT_OK


def _load_model(path: str):
    manifest = load_manifest(path)
    if all(layer.quantized is not None for layer in manifest.layers):
        return load_quantized_model(path)
    return DenseModel.from_manifest(manifest)


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = cli_config(args, ["model", "quantized", "inputs", "report"], with_pipeline=False)
    fp = DenseModel.from_manifest(load_manifest(args.model))
    quantized = _load_model(args.quantized)
    if args.inputs:
        inputs = load_array(args.inputs)
    elif args.calib:
        calibration = load_array(args.calib)
        n = args.n_samples or calibration.shape[0]
        inputs = holdout_inputs(calibration, n, cfg.seed + 1)
    else:
        raise ConfigError("eval needs --inputs or --calib")

    metrics = evaluate(fp, quantized, inputs)
    metrics["quantized"] = isinstance(quantized, QuantizedModel)
    ReportManager(args.report).save(metrics)
    logger.info("Held-out final MSE %.6g", metrics["final_mse"])
    return EXIT_OK


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    cfg = cli_config(args, ["out"], with_pipeline=False)
    spec = SyntheticSpec(
        d_in=args.d_in,
        d_out=args.d_out,
        n_layers=args.n_layers,
        n_samples=args.n_samples,
        weight_dist=args.weight_dist,
        seed=cfg.seed,
        activation=args.activation,
    )
    spec.validate()
    write_synthetic(gen_synthetic(spec), args.out)
    logger.info("Synthetic model written to %s", args.out)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = cli_config(args, ["report"], with_pipeline=False)
    if args.instances < 1:
        raise ConfigError(f"--instances must be >= 1, got {args.instances}")
    report = run_verification(seed=cfg.seed, n_instances=args.instances)
    if args.report:
        ReportManager(args.report).save(report.to_dict())
    if not report.ok:
        logger.error("%d verification violations", len(report.violations))
        return EXIT_VIOLATIONS
    return EXIT_OK


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        _configure_logging(DEFAULT_LOG_LEVEL)
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    _configure_logging(args.log_level)
    try:
        return args.func(args)
    except (ConfigError, ShapeMismatchError, InstanceTooLargeError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except NumericError as e:
        logger.error("Numeric failure: %s", e)
        return EXIT_NUMERIC
    except (TensorFormatError, ManifestError, OSError) as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except ValueError as e:
        logger.error("Invalid value: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
