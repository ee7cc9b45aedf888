"""Toy-model manifests: an ordered stack of linear layers with optional relu."""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import ManifestError, ShapeMismatchError
from .tensor_io import PathLike, load_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

ACTIVATIONS = {
    "none": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
}


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    try:
        return ACTIVATIONS[name](x)
    except KeyError:
        raise ManifestError(f"Unknown activation {name!r}, expected one of {sorted(ACTIVATIONS)}") from None


@dataclass(frozen=True)
class LayerSpec:
    """One linear layer. Weights are stored (out_dim x in_dim): row = output channel."""
    weight_path: str
    in_dim: int
    out_dim: int
    activation: str = "none"
    # Prefix of the QuantizedLayer files; only set in quantized-model manifests
    quantized: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "weight_path": self.weight_path,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "activation": self.activation,
        }
        if self.quantized is not None:
            data["quantized"] = self.quantized
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        try:
            return cls(
                weight_path=str(data["weight_path"]),
                in_dim=int(data["in_dim"]),
                out_dim=int(data["out_dim"]),
                activation=str(data.get("activation", "none")),
                quantized=data.get("quantized"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"Malformed layer entry {data!r}: {e}") from e


@dataclass
class ModelManifest:
    layers: List[LayerSpec]
    metadata: Dict[str, Any] = field(default_factory=dict)
    # Directory that relative weight paths resolve against; not serialized
    root: str = "."

    def resolve(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def validate(self) -> None:
        """Check dims, activations and the out_dim -> in_dim chaining."""
        if not self.layers:
            raise ManifestError("Manifest has no layers")
        for k, layer in enumerate(self.layers):
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise ManifestError(f"Layer {k} has non-positive dims ({layer.out_dim}, {layer.in_dim})")
            if layer.activation not in ACTIVATIONS:
                raise ManifestError(f"Layer {k} has unknown activation {layer.activation!r}")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise ManifestError(
                    f"Layer {k} out_dim {self.layers[k].out_dim} != "
                    f"layer {k + 1} in_dim {self.layers[k + 1].in_dim}"
                )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], root: str = ".") -> "ModelManifest":
        if not isinstance(data, dict) or "layers" not in data:
            raise ManifestError("Manifest must be a JSON object with a 'layers' list")
        manifest = cls(
            layers=[LayerSpec.from_dict(entry) for entry in data["layers"]],
            metadata=dict(data.get("metadata", {})),
            root=root,
        )
        manifest.validate()
        return manifest


def manifest_path(path: PathLike) -> str:
    """Accept either a manifest file or the directory holding manifest.json."""
    path = os.fspath(path)
    if os.path.isdir(path):
        return os.path.join(path, MANIFEST_NAME)
    return path


def load_manifest(path: PathLike) -> ModelManifest:
    path = manifest_path(path)
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: invalid JSON ({e})") from e
    return ModelManifest.from_dict(data, root=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: ModelManifest, path: PathLike) -> None:
    manifest.validate()
    with open(manifest_path(path), "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)


class DenseModel:
    """Full-precision model: float64 weight matrices plus activation names."""

    def __init__(self, weights: Sequence[np.ndarray], activations: Sequence[str]):
        if len(weights) != len(activations):
            raise ShapeMismatchError(f"{len(weights)} weight matrices but {len(activations)} activations")
        if not weights:
            raise ManifestError("Model has no layers")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.activations = list(activations)
        for k, w in enumerate(self.weights):
            if w.ndim != 2:
                raise ShapeMismatchError(f"Layer {k} weight must be 2-D, got shape {w.shape}")
            if self.activations[k] not in ACTIVATIONS:
                raise ManifestError(f"Layer {k} has unknown activation {self.activations[k]!r}")
        for k in range(len(self.weights) - 1):
            if self.weights[k].shape[0] != self.weights[k + 1].shape[1]:
                raise ShapeMismatchError(
                    f"Layer {k} output {self.weights[k].shape[0]} does not feed "
                    f"layer {k + 1} input {self.weights[k + 1].shape[1]}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @classmethod
    def from_manifest(cls, manifest: ModelManifest) -> "DenseModel":
        manifest.validate()
        weights = []
        for k, layer in enumerate(manifest.layers):
            tensor = load_tensor(manifest.resolve(layer.weight_path))
            if tensor.shape != (layer.out_dim, layer.in_dim):
                raise ManifestError(
                    f"Layer {k} weight {layer.weight_path} has shape {tensor.shape}, "
                    f"manifest says {(layer.out_dim, layer.in_dim)}"
                )
            weights.append(tensor.to_array())
        logger.debug("Loaded %d-layer model from %s", len(weights), manifest.root)
        return cls(weights, [layer.activation for layer in manifest.layers])
