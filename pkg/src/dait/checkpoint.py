"""Checkpoints: a torch weight blob plus a JSON sidecar manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from dait.config import RunConfig, config_from_dict
from dait.errors import ConfigError

MANIFEST_SUFFIX = ".json"


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(blob: Path) -> Path:
    return Path(blob).with_suffix(MANIFEST_SUFFIX)


def save_checkpoint(
    path,
    modules: dict[str, nn.Module],
    kind: str,
    config: RunConfig,
    epoch: int,
    metrics: dict,
    tensors: dict | None = None,
) -> Path:
    """Write ``path`` (weights) and its manifest; return ``path``.

    The manifest holds the config snapshot, epoch, metrics, and the SHA-256
    of the weight blob.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "kind": kind,
        "modules": {name: m.state_dict() for name, m in modules.items()},
        "tensors": dict(tensors or {}),
    }
    torch.save(blob, path)
    manifest = {
        "kind": kind,
        "weights": path.name,
        "sha256": file_digest(path),
        "epoch": epoch,
        "metrics": metrics,
        "modules": sorted(modules),
        "config": config.to_dict(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


@dataclass
class LoadedCheckpoint:
    path: Path
    kind: str
    config: RunConfig
    manifest: dict
    state: dict
    tensors: dict

    @property
    def digest(self) -> str:
        return self.manifest["sha256"]


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read a checkpoint and verify the blob against its manifest digest."""
    path = Path(path)
    mpath = manifest_path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    if not mpath.is_file():
        raise ConfigError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if file_digest(path) != manifest["sha256"]:
        raise ConfigError(f"checkpoint {path} does not match its manifest digest")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return LoadedCheckpoint(
        path=path,
        kind=manifest["kind"],
        config=config_from_dict(manifest["config"]),
        manifest=manifest,
        state=blob["modules"],
        tensors=blob["tensors"],
    )
