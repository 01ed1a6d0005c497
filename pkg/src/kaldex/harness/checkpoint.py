"""Portable checkpoint archive: JSON manifest plus float32 parameter blobs."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from ..backbone import BackboneConfig, UNetPlusPlus
from .errors import CheckpointVersionError, MissingArtifactError

FORMAT = "kaldex-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, model: UNetPlusPlus, **meta) -> Path:
    """Write ``model`` with its architecture config and any JSON-able ``meta``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            blob = f"params/{name}.bin"
            zf.writestr(blob, arr.tobytes())
            tensors[name] = {"shape": list(arr.shape), "dtype": "float32-le", "file": blob}
        manifest = {"format": FORMAT, "version": FORMAT_VERSION,
                    "model": model.config.to_dict(), "tensors": tensors, **meta}
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint {path} not found")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointVersionError(f"{path} is not a checkpoint archive: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format {manifest.get('format')!r} version {manifest.get('version')!r}, "
            f"expected {FORMAT!r} version {FORMAT_VERSION}"
        )
    return manifest


def _state_dict(path, manifest: dict) -> dict[str, torch.Tensor]:
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name, info in manifest["tensors"].items():
            arr = np.frombuffer(zf.read(info["file"]), dtype="<f4").reshape(info["shape"])
            state[name] = torch.from_numpy(arr.astype(np.float32))
    return state


def load_into(model: UNetPlusPlus, path) -> dict:
    """Load a checkpoint into an existing model; configs must agree."""
    manifest = read_manifest(path)
    if BackboneConfig.from_dict(manifest["model"]) != model.config:
        raise CheckpointVersionError(
            f"checkpoint/config mismatch: checkpoint {manifest['model']} vs model {model.config.to_dict()}"
        )
    state = _state_dict(path, manifest)
    expected = set(model.state_dict())
    if set(state) != expected:
        raise CheckpointVersionError(
            f"checkpoint/config mismatch in parameters: {sorted(set(state) ^ expected)[:5]}"
        )
    model.load_state_dict(state)
    return manifest


def load_checkpoint(path) -> tuple[UNetPlusPlus, dict]:
    manifest = read_manifest(path)
    try:
        config = BackboneConfig.from_dict(manifest["model"])
    except (TypeError, ValueError) as exc:
        raise CheckpointVersionError(f"unusable model config in {path}: {exc}") from exc
    model = UNetPlusPlus(config)
    load_into(model, path)
    model.eval()
    return model, manifest
