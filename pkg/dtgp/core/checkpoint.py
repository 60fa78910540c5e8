"""
Model checkpoints: one ``.npz`` container holding a YAML header and every
raw parameter array, plus the fixed mean-function arrays of each layer.
"""

from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import io
import logging

import numpy as np
import yaml

from .errors import CheckpointError
from .kernels import MeanFn
from .model import DTGPModel, ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


def _mean_arrays(model: DTGPModel) -> Dict[str, np.ndarray]:
    arrays = {}
    for layer in model.layers:
        if layer.mean.kind == "linear":
            arrays[f"{layer.name}.mean.weights"] = layer.mean.weights
            arrays[f"{layer.name}.mean.bias"] = layer.mean.bias
    return arrays


def save_checkpoint(model: DTGPModel, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``model`` (and free-form ``metadata``, e.g. normalization statistics) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "input_dim": model.input_dim,
        "means": [{"kind": layer.mean.kind, "d_out": layer.mean.d_out} for layer in model.layers],
        "param_names": model.registry.names(),
        "metadata": metadata or {},
    }
    arrays = {f"param:{name}": value for name, value in model.registry.values().items()}
    arrays.update({f"mean:{name}": value for name, value in _mean_arrays(model).items()})
    arrays[HEADER_KEY] = np.array(yaml.safe_dump(header, sort_keys=False))

    # Write through a buffer so np.savez does not append ".npz" to the name.
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    path.write_bytes(buffer.getvalue())
    logger.info(f"Checkpoint written: {path} ({len(header['param_names'])} parameters)")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    with _open(path) as data:
        return _parse_header(data, path)


def _open(path: Union[str, Path]):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")


def _parse_header(data, path) -> Dict[str, Any]:
    if HEADER_KEY not in data.files:
        raise CheckpointError(f"{path} has no checkpoint header")
    header = yaml.safe_load(str(data[HEADER_KEY]))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {version} in {path}")
    return header


def load_checkpoint(path: Union[str, Path]) -> Tuple[DTGPModel, Dict[str, Any]]:
    """Rebuild a model from ``path``; returns the model and the stored metadata."""
    with _open(path) as data:
        header = _parse_header(data, path)
        config = ModelConfig.from_dict(header["model_config"])
        means = []
        for index, spec in enumerate(header["means"]):
            if spec["kind"] == "linear":
                means.append(MeanFn(
                    "linear", spec["d_out"],
                    weights=data[f"mean:layer{index}.mean.weights"],
                    bias=data[f"mean:layer{index}.mean.bias"],
                ))
            else:
                means.append(MeanFn.zero(spec["d_out"]))
        model = DTGPModel.skeleton(config, int(header["input_dim"]), means)
        if model.registry.names() != header["param_names"]:
            raise CheckpointError(f"{path}: parameter layout does not match the stored configuration")
        values = {name: data[f"param:{name}"] for name in header["param_names"]}
        model.registry.load_values(values)
    logger.info(f"Checkpoint loaded: {path} ({model.config.tag})")
    return model, header.get("metadata", {})
