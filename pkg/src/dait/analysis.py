"""Representation diagnostics: linear CKA, class similarity matrices, feature export."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from dait.errors import ContractError, DaitError, DegenerateInputError

FEATURE_ROLES = ("vlm_image", "intermediate", "student")


@dataclass(frozen=True)
class FeatureDump:
    """Feature rows aligned with integer labels.

    Attributes:
        features: ``(M, D)`` float array.
        labels: length-``M`` integer array.
        source: Encoder role plus checkpoint digest, e.g. ``"intermediate@3f2a..."``.
    """

    features: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ContractError("features must be a 2-D array")
        if len(self.features) != len(self.labels):
            raise ContractError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features contain non-finite entries")


def _centered(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {a.shape}")
    centered = a - a.mean(axis=0, keepdims=True)
    # identical rows can leave a rounding residue of a few ulps after centring
    scale = np.abs(a).max() if a.size else 0.0
    if np.abs(centered).max(initial=0.0) <= 8 * np.finfo(np.float64).eps * scale:
        raise DegenerateInputError(f"{name} has zero variance (all rows identical)")
    return centered


def linear_cka(X, Y) -> float:
    """Linear centred kernel alignment between two representations of the same M items.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)`` with column-centred
    inputs. Invariant to orthogonal transforms and isotropic scaling of
    either argument.
    """
    X = np.asarray(X)
    Y = np.asarray(Y)
    if X.shape[0] != Y.shape[0]:
        raise ContractError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 3:
        raise ContractError("linear_cka needs at least 3 rows")
    xc = _centered(X, "X")
    yc = _centered(Y, "Y")
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    denom = np.linalg.norm(xc.T @ xc, "fro") * np.linalg.norm(yc.T @ yc, "fro")
    if not np.isfinite(denom) or denom == 0:
        raise DegenerateInputError("feature scale under- or overflows float64; rescale the inputs")
    return float(cross / denom)


def cka_report(X, Y) -> dict:
    """CKA together with both feature dimensions; high dims inflate the score."""
    X = np.asarray(X)
    Y = np.asarray(Y)
    return {"cka": linear_cka(X, Y), "dim_x": int(X.shape[1]), "dim_y": int(Y.shape[1]), "rows": int(X.shape[0])}


def similarity_matrix(dump: FeatureDump, num_classes: int | None = None) -> np.ndarray:
    """Cosine similarity between class-mean feature vectors."""
    labels = np.asarray(dump.labels, dtype=np.int64)
    n = int(labels.max()) + 1 if num_classes is None else num_classes
    feats = np.asarray(dump.features, dtype=np.float64)
    means = []
    for c in range(n):
        rows = feats[labels == c]
        if len(rows) == 0:
            raise ContractError(f"class {c} has no rows in the dump")
        means.append(rows.mean(axis=0))
    means = np.stack(means)
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError(f"class mean of class {int(np.argmin(norms))} is zero")
    unit = means / norms[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, 1.0)
    return sim


@torch.no_grad()
def extract_features(restored, images: torch.Tensor, role: str) -> torch.Tensor:
    """Final pooled, pre-classifier features of ``role`` for preprocessed images."""
    if role == "vlm_image":
        return restored.vlm.encode_image(images)
    if role == "intermediate":
        if restored.intermediate is None:
            raise ContractError("checkpoint holds no intermediate teacher")
        return restored.intermediate(images)[0]
    if role == "student":
        if restored.student is None:
            raise ContractError("checkpoint holds no student")
        return restored.student.features(images).mean(dim=(2, 3))
    raise ContractError(f"role must be one of {FEATURE_ROLES}, got {role!r}")


def write_feature_dump(dump: FeatureDump, path) -> Path:
    """Write a dump as CSV: header ``f0,...,f{D-1},label`` and one row per item.

    The source tag goes to a ``<path>.meta.json`` sidecar.
    """
    path = Path(path)
    d = dump.features.shape[1]
    header = ",".join([f"f{j}" for j in range(d)] + ["label"])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(header + "\n")
            for row, label in zip(dump.features, dump.labels):
                fh.write(",".join(format(float(v), ".9g") for v in row) + f",{int(label)}\n")
        Path(f"{path}.meta.json").write_text(json.dumps({"source": dump.source, "rows": len(dump.labels), "dim": d}))
    except OSError as exc:
        raise DaitError(f"cannot write feature dump {path}: {exc}") from exc
    return path


def read_feature_dump(path) -> FeatureDump:
    path = Path(path)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise DaitError(f"cannot read feature dump {path}: {exc}") from exc
    if header[-1] != "label":
        raise ContractError(f"{path}: last column must be 'label'")
    meta = Path(f"{path}.meta.json")
    source = json.loads(meta.read_text())["source"] if meta.is_file() else ""
    return FeatureDump(features=data[:, :-1], labels=data[:, -1].astype(np.int64), source=source)


def export_features(checkpoint, dataset, role: str, path) -> FeatureDump:
    """Encode ``dataset`` with ``role`` from ``checkpoint`` and write it to ``path``."""
    from dait.pipeline import make_policy, restore
    from dait.data import batch_augment

    restored = restore(checkpoint)
    cfg = restored.checkpoint.config
    x = batch_augment(dataset, range(len(dataset)), make_policy(cfg, "eval"))
    feats = torch.cat([extract_features(restored, x[i:i + 256], role) for i in range(0, len(x), 256)])
    dump = FeatureDump(
        features=feats.double().numpy(),
        labels=np.asarray(dataset.labels, dtype=np.int64),
        source=f"{role}@{restored.checkpoint.digest[:16]}",
    )
    write_feature_dump(dump, path)
    return dump
