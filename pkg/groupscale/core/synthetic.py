"""Seeded toy models and calibration data for desk-scale experiments."""

import logging
import math
import os
from typing import List, NamedTuple

import numpy as np

from .errors import ConfigError
from .manifest import LayerSpec, ModelManifest, MANIFEST_NAME, save_manifest
from .tensor_io import PathLike, Tensor, save_tensor

logger = logging.getLogger(__name__)

WEIGHT_DISTS = ("gauss", "gauss+outliers")
OUTLIER_FRACTION = 0.01
OUTLIER_GAIN = 10.0
CALIB_NAME = "calib.qt"


class SyntheticSpec(NamedTuple):
    """Shape and seed of a generated model. Layer 0 maps d_in -> d_out, the rest d_out -> d_out."""
    d_in: int
    d_out: int
    n_layers: int = 1
    n_samples: int = 128
    weight_dist: str = "gauss"
    seed: int = 0
    activation: str = "relu"  # hidden layers; the last layer is always linear

    def validate(self) -> None:
        for name in ("d_in", "d_out", "n_layers", "n_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.weight_dist not in WEIGHT_DISTS:
            raise ConfigError(f"weight_dist must be one of {WEIGHT_DISTS}, got {self.weight_dist!r}")


class SyntheticModel(NamedTuple):
    manifest: ModelManifest
    calibration: Tensor
    weights: List[Tensor]


def _streams(seed: int):
    # weights, outlier picks, input transform, calibration samples
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(4)]


def _input_transform(spec: SyntheticSpec, rng: np.random.Generator):
    """Mixing matrix and per-channel gains giving correlated, unevenly scaled inputs."""
    d = spec.d_in
    mixing = np.eye(d) + 0.5 * rng.standard_normal((d, d)) / math.sqrt(d)
    gains = np.exp(0.5 * rng.standard_normal(d))
    offset = 0.1 * rng.standard_normal(d)
    return mixing, gains, offset


def sample_inputs(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n input rows from the SyntheticSpec input distribution using `rng` for the samples."""
    mixing, gains, offset = _input_transform(spec, _streams(spec.seed)[2])
    z = rng.standard_normal((n, spec.d_in))
    return (z @ mixing) * gains + offset


def outlier_count(in_dim: int, out_dim: int) -> int:
    return math.ceil(OUTLIER_FRACTION * in_dim * out_dim)


def gen_synthetic(spec: SyntheticSpec) -> SyntheticModel:
    """Generate a deterministic model and calibration batch from `spec`.

    Weight paths in the returned manifest are relative (layer_XXX.qt); use
    write_synthetic to put them on disk.
    """
    spec.validate()
    weight_rng, outlier_rng, _, sample_rng = _streams(spec.seed)

    layers = []
    weights = []
    for k in range(spec.n_layers):
        in_dim = spec.d_in if k == 0 else spec.d_out
        out_dim = spec.d_out
        w = weight_rng.standard_normal((out_dim, in_dim)) / math.sqrt(in_dim)
        if spec.weight_dist == "gauss+outliers":
            picks = outlier_rng.choice(w.size, size=outlier_count(in_dim, out_dim), replace=False)
            w.flat[picks] *= OUTLIER_GAIN
        activation = spec.activation if k < spec.n_layers - 1 else "none"
        layers.append(LayerSpec(f"layer_{k:03d}.qt", in_dim, out_dim, activation))
        weights.append(Tensor("f64", w.shape, w))

    calibration = sample_inputs(spec, spec.n_samples, sample_rng)
    manifest = ModelManifest(
        layers=layers,
        metadata={"generator": "synthetic", **spec._asdict()},
    )
    manifest.validate()
    logger.info(
        "Generated %d-layer model (%d -> %d, %s, seed=%d) with %d calibration samples",
        spec.n_layers, spec.d_in, spec.d_out, spec.weight_dist, spec.seed, spec.n_samples,
    )
    return SyntheticModel(manifest, Tensor("f64", calibration.shape, calibration), weights)


def write_synthetic(model: SyntheticModel, out_dir: PathLike) -> str:
    """Write manifest.json, the layer weights and calib.qt into `out_dir`."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    for layer, weight in zip(model.manifest.layers, model.weights):
        save_tensor(weight, os.path.join(out_dir, layer.weight_path))
    save_tensor(model.calibration, os.path.join(out_dir, CALIB_NAME))
    save_manifest(model.manifest, os.path.join(out_dir, MANIFEST_NAME))
    model.manifest.root = os.path.abspath(out_dir)
    return out_dir


def holdout_inputs(calibration: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Draw n held-out rows from the Gaussian fitted to the calibration batch."""
    calibration = np.asarray(calibration, dtype=np.float64)
    mean = calibration.mean(axis=0)
    centered = calibration - mean
    cov = centered.T @ centered / max(1, calibration.shape[0] - 1)
    rng = np.random.default_rng(seed)
    return rng.multivariate_normal(mean, cov, size=n, method="eigh")
