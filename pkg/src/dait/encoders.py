"""Encoders for the three roles, projection heads, and the freeze contract.

Roles:
    * ``vlm_image`` / ``vlm_text``: the frozen vision-language teacher. At desk
      scale these are toy encoders; real backbones plug in through adapters.
    * ``intermediate``: trainable mid-sized conv net producing a pooled
      embedding, a spatial map and logits.
    * ``student``: lightweight conv net with a 1x1 alignment conv onto the
      intermediate map's channels.
"""

from __future__ import annotations

import hashlib
import importlib
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from dait.errors import BackendError, ConfigError, ContractError, FreezeViolation, TrainingError
from dait.losses import cosine_matrix

ROLES = ("vlm_image", "vlm_text", "intermediate", "student")
KINDS = ("toy", "external_adapter")
PERMANENTLY_FROZEN = ("vlm_image", "vlm_text", "f_vlm")


@dataclass(frozen=True)
class EncoderSpec:
    role: str
    kind: str = "toy"
    raw_dim: int = 256
    spatial: bool = False
    seed: int = 0
    adapter: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown encoder role {self.role!r}; expected one of {ROLES}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}; expected one of {KINDS}")
        if self.raw_dim < 1:
            raise ConfigError(f"raw_dim must be positive, got {self.raw_dim}")


@dataclass(frozen=True)
class ClassAnchors:
    """Projected text embeddings, one row per class in label order."""

    values: torch.Tensor
    class_names: tuple
    prompts: tuple


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _frozen(t: torch.Tensor) -> nn.Parameter:
    return nn.Parameter(t, requires_grad=False)


# --------------------------------------------------------------------------
# toy vision-language teacher


def low_frequency_basis(channels: int, side: int, count: int) -> torch.Tensor:
    """Orthonormal 2-D DCT-II basis images, lowest spatial frequency first.

    Returns a ``(count, channels * side * side)`` float64 matrix with
    orthonormal rows; ties in frequency are broken by channel order.
    """
    n = torch.arange(side, dtype=torch.float64)
    k = torch.arange(side, dtype=torch.float64)
    dct = torch.cos(math.pi * (n[None, :] + 0.5) * k[:, None] / side)
    dct[0] /= math.sqrt(2.0)
    dct *= math.sqrt(2.0 / side)
    order = sorted(
        ((u * u + v * v, c, u, v) for c in range(channels) for u in range(side) for v in range(side))
    )[:count]
    rows = torch.zeros(len(order), channels, side, side, dtype=torch.float64)
    for i, (_, c, u, v) in enumerate(order):
        rows[i, c] = torch.outer(dct[u], dct[v])
    return rows.flatten(1)


class ToyImageEncoder(nn.Module):
    """Frozen random orthogonal projection of flattened pixels plus a fixed tanh.

    The projection rows span the ``raw_dim`` lowest-frequency DCT images and
    are randomly rotated within that subspace, so the encoder keeps smooth
    image structure and discards most pixel noise.
    """

    def __init__(self, in_shape: Sequence[int], raw_dim: int = 256, seed: int = 0, gain: float = 0.5):
        super().__init__()
        channels, height, width = in_shape
        if height != width:
            raise ConfigError(f"toy image encoder needs square images, got {height}x{width}")
        in_features = channels * height * width
        if raw_dim > in_features:
            raise ConfigError(f"toy image encoder raw_dim {raw_dim} exceeds input size {in_features}")
        basis = low_frequency_basis(channels, height, raw_dim)
        g = torch.randn(raw_dim, raw_dim, generator=_generator(seed), dtype=torch.float64)
        rotation, _ = torch.linalg.qr(g)
        self.in_shape = tuple(in_shape)
        self.raw_dim = raw_dim
        self.gain = gain
        self.weight = _frozen((rotation @ basis).float())

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if tuple(images.shape[1:]) != self.in_shape:
            raise ContractError(f"expected images of shape (B, {self.in_shape}), got {tuple(images.shape)}")
        return torch.tanh(self.gain * images.flatten(1) @ self.weight.T)


def _prompt_seed(prompt: str) -> int:
    return int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")


class ToyTextEncoder(nn.Module):
    """Deterministic unit vectors per prompt with a fixed pairwise cosine.

    Every prompt is mapped to ``sqrt(rho) * u0 + sqrt(1 - rho) * u_c`` where ``u0``
    is shared and the ``u_c`` are orthonormalised against ``u0`` and each other,
    so distinct prompts in one call have pairwise cosine exactly ``rho``.
    """

    def __init__(self, raw_dim: int = 256, seed: int = 0, anchor_cosine: float = 0.2):
        super().__init__()
        if not 0.0 <= anchor_cosine < 1.0:
            raise ConfigError(f"anchor_cosine must lie in [0, 1), got {anchor_cosine}")
        self.raw_dim = raw_dim
        self.anchor_cosine = anchor_cosine
        shared = torch.randn(raw_dim, generator=_generator(seed), dtype=torch.float64)
        self.shared = _frozen(shared)

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        n = len(prompts)
        if n + 1 > self.raw_dim:
            raise ConfigError(f"toy text encoder raw_dim {self.raw_dim} too small for {n} prompts")
        if len(set(prompts)) != n:
            raise ContractError("prompts must be distinct")
        cols = [self.shared.detach()]
        for p in prompts:
            cols.append(torch.randn(self.raw_dim, generator=_generator(_prompt_seed(p)), dtype=torch.float64))
        q, r = torch.linalg.qr(torch.stack(cols, dim=1))
        q = q * torch.sign(torch.diagonal(r))[None, :]
        rho = self.anchor_cosine
        out = math.sqrt(rho) * q[:, :1] + math.sqrt(1.0 - rho) * q[:, 1:]
        return out.T.float()


class ProjectionMLP(nn.Module):
    """Two-layer MLP mapping raw VLM features to the shared embedding dim."""

    kind = "two_layer_nonlinear"

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None, seed: int = 0):
        super().__init__()
        hidden = hidden or max(in_dim, out_dim)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fc1 = nn.Linear(in_dim, hidden)
            self.fc2 = nn.Linear(hidden, out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class AdapterBackend:
    """Interface for real pretrained backbones.

    Implementations return raw features; projection and losses stay in this
    package. ``encode_images`` maps ``(B, C, H, W)`` to ``(B, raw_dim)``;
    ``encode_text`` maps a list of prompts to ``(N, raw_dim)``.
    """

    raw_dim: int

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError


class _AdapterModule(nn.Module):
    def __init__(self, backend: AdapterBackend, method: str):
        super().__init__()
        self.backend = backend
        self.method = method
        self.raw_dim = backend.raw_dim

    def forward(self, x):
        with torch.no_grad():
            return getattr(self.backend, self.method)(x)


def load_adapter(path: str, **kwargs) -> AdapterBackend:
    """Import ``"package.module:factory"`` and call it.

    Raises:
        BackendError: when the module or factory cannot be loaded. There is no
            fallback to the toy encoders.
    """
    if ":" not in path:
        raise BackendError(f"adapter path must look like 'module:factory', got {path!r}")
    mod_name, attr = path.split(":", 1)
    try:
        factory = getattr(importlib.import_module(mod_name), attr)
        return factory(**kwargs)
    except Exception as exc:
        raise BackendError(f"adapter {path!r} unavailable: {exc}") from exc


class VisionLanguageTeacher(nn.Module):
    """Frozen image/text encoders followed by the shared projection ``f_vlm``."""

    def __init__(self, image_encoder: nn.Module, text_encoder: nn.Module, projection: ProjectionMLP):
        super().__init__()
        if image_encoder.raw_dim != text_encoder.raw_dim:
            raise ConfigError(
                f"image raw_dim {image_encoder.raw_dim} != text raw_dim {text_encoder.raw_dim}"
            )
        if projection.in_dim != image_encoder.raw_dim:
            raise ConfigError("projection in_dim must equal the VLM raw_dim")
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.projection = projection
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def dim(self) -> int:
        return self.projection.out_dim

    @torch.no_grad()
    def raw_image_features(self, images):
        return self.image_encoder(images)

    @torch.no_grad()
    def raw_text_features(self, prompts):
        return self.text_encoder(list(prompts))

    @torch.no_grad()
    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.projection(self.image_encoder(images))

    @torch.no_grad()
    def encode_text(self, class_names: Sequence[str], template: str = "a photo of a {}") -> ClassAnchors:
        prompts = format_prompts(class_names, template)
        values = self.projection(self.text_encoder(prompts))
        return ClassAnchors(values=values, class_names=tuple(class_names), prompts=tuple(prompts))


def format_prompts(class_names: Sequence[str], template: str) -> list[str]:
    if template.count("{}") != 1 or "{" in template.replace("{}", ""):
        raise ConfigError(f"prompt template must contain exactly one '{{}}' placeholder: {template!r}")
    return [template.format(name) for name in class_names]


def vlm_encode_image(vlm: VisionLanguageTeacher, images: torch.Tensor) -> torch.Tensor:
    return vlm.encode_image(images)


def vlm_encode_text(vlm: VisionLanguageTeacher, class_names, template="a photo of a {}") -> ClassAnchors:
    return vlm.encode_text(class_names, template)


def build_vlm_encoders(
    image_spec: EncoderSpec,
    text_spec: EncoderSpec,
    in_shape: Sequence[int],
    anchor_cosine: float = 0.2,
) -> tuple[nn.Module, nn.Module]:
    """Construct the raw image and text encoders from their specs."""
    if image_spec.kind == "toy":
        image = ToyImageEncoder(in_shape, image_spec.raw_dim, seed=image_spec.seed)
    else:
        image = _AdapterModule(load_adapter(image_spec.adapter), "encode_images")
    if text_spec.kind == "toy":
        text = ToyTextEncoder(text_spec.raw_dim, seed=text_spec.seed, anchor_cosine=anchor_cosine)
    else:
        text = _AdapterModule(load_adapter(text_spec.adapter), "encode_text")
    return image, text


# --------------------------------------------------------------------------
# projection fitting


def fit_projection_head(
    vlm_raw_features: torch.Tensor,
    anchors_raw: torch.Tensor,
    labels: torch.Tensor,
    epochs: int,
    out_dim: int = 64,
    lr: float = 1e-3,
    logit_scale: float = 10.0,
    seed: int = 0,
    head: ProjectionMLP | None = None,
) -> tuple[ProjectionMLP, list[float]]:
    """Fit ``f_vlm`` on frozen raw VLM features, then freeze it.

    The objective is cross-entropy of ``logit_scale * cos(f(x), f(anchor))``
    against the labels, optimised full-batch with Adam.

    Returns:
        The frozen head and the per-epoch loss history (length ``epochs + 1``,
        entry 0 is the loss before any update).
    """
    if vlm_raw_features.shape[1] != anchors_raw.shape[1]:
        raise ContractError(
            f"raw feature dim {vlm_raw_features.shape[1]} != anchor dim {anchors_raw.shape[1]}"
        )
    if head is None:
        head = ProjectionMLP(vlm_raw_features.shape[1], out_dim, seed=seed)
    for p in head.parameters():
        p.requires_grad_(True)
    x = vlm_raw_features.detach().float()
    a = anchors_raw.detach().float()
    y = labels.long()

    def objective():
        return F.cross_entropy(logit_scale * cosine_matrix(head(x), head(a)), y)

    history = []
    if epochs > 0:
        opt = torch.optim.Adam(head.parameters(), lr=lr)
        for epoch in range(epochs):
            opt.zero_grad()
            loss = objective()
            if not torch.isfinite(loss):
                raise TrainingError(
                    "projection head fit diverged",
                    diagnostics={"epoch": epoch, "loss": loss.item(), "history": history},
                )
            history.append(loss.item())
            loss.backward()
            opt.step()
    with torch.no_grad():
        history.append(float(objective()))
    for p in head.parameters():
        p.requires_grad_(False)
    return head, history


def nearest_anchor_accuracy(features: torch.Tensor, anchors: torch.Tensor, labels: torch.Tensor) -> float:
    """Top-1 of classifying each feature row to its most cosine-similar anchor."""
    pred = cosine_matrix(features, anchors).argmax(dim=1)
    return float((pred == labels).float().mean())


# --------------------------------------------------------------------------
# intermediate teacher and student


def _conv_stack(in_ch: int, channels: Sequence[int], pool_after: int) -> nn.Sequential:
    layers = []
    prev = in_ch
    for i, ch in enumerate(channels):
        layers += [nn.Conv2d(prev, ch, 3, padding=1, bias=False), nn.BatchNorm2d(ch), nn.ReLU(inplace=True)]
        if i < pool_after:
            layers.append(nn.MaxPool2d(2))
        prev = ch
    return nn.Sequential(*layers)


class IntermediateTeacher(nn.Module):
    """Conv stack -> last map; GAP -> linear to D (pooled); linear head -> logits."""

    def __init__(
        self,
        num_classes: int,
        dim: int = 64,
        channels: Sequence[int] = (32, 64, 64),
        in_channels: int = 3,
        pools: int = 2,
        seed: int = 0,
    ):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = _conv_stack(in_channels, channels, pools)
            self.proj = nn.Linear(channels[-1], dim)
            self.head = nn.Linear(dim, num_classes)
        self.map_channels = channels[-1]
        self.dim = dim
        self.num_classes = num_classes

    def forward(self, images):
        fmap = self.backbone(images)
        pooled = self.proj(fmap.mean(dim=(2, 3)))
        return pooled, fmap, self.head(pooled)


class StudentNet(nn.Module):
    """Small conv stack with a 1x1 alignment conv onto ``teacher_channels``.

    Logits come from the globally pooled raw student map; the alignment conv
    only feeds the spatial distillation loss.
    """

    def __init__(
        self,
        num_classes: int,
        teacher_channels: int,
        channels: Sequence[int] = (16, 32),
        in_channels: int = 3,
        pools: int = 2,
        seed: int = 0,
    ):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = _conv_stack(in_channels, channels, pools)
            self.align = nn.Conv2d(channels[-1], teacher_channels, 1)
            self.classifier = nn.Linear(channels[-1], num_classes)
        self.map_channels = channels[-1]
        self.teacher_channels = teacher_channels
        self.num_classes = num_classes

    def identity_align(self):
        """Initialise the 1x1 alignment as the identity (needs equal channel counts)."""
        if self.map_channels != self.teacher_channels:
            raise ContractError("identity alignment needs equal student and teacher channels")
        with torch.no_grad():
            self.align.weight.copy_(torch.eye(self.map_channels)[:, :, None, None])
            self.align.bias.zero_()

    def features(self, images):
        return self.backbone(images)

    def forward(self, images):
        fmap = self.backbone(images)
        aligned = self.align(fmap)
        if aligned.shape[1] != self.teacher_channels:
            raise ContractError(
                f"aligned map has {aligned.shape[1]} channels, expected {self.teacher_channels}"
            )
        return aligned, self.classifier(fmap.mean(dim=(2, 3)))


class DirectStudentHead(nn.Module):
    """Linear map from pooled student features to D, for direct VLM distillation."""

    def __init__(self, in_dim: int, dim: int, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.proj = nn.Linear(in_dim, dim)

    def forward(self, fmap):
        return self.proj(fmap.mean(dim=(2, 3)))


def harmonize_spatial(z_s: torch.Tensor, z_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Adaptive-average-pool both maps to the smaller of their two grids."""
    if z_s.shape[1] != z_t.shape[1]:
        raise ContractError(f"channel mismatch after alignment: {z_s.shape[1]} vs {z_t.shape[1]}")
    h = min(z_s.shape[2], z_t.shape[2])
    w = min(z_s.shape[3], z_t.shape[3])
    if z_s.shape[2:] != (h, w):
        z_s = F.adaptive_avg_pool2d(z_s, (h, w))
    if z_t.shape[2:] != (h, w):
        z_t = F.adaptive_avg_pool2d(z_t, (h, w))
    return z_s, z_t


# --------------------------------------------------------------------------
# freeze contract


def module_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ParameterGroups:
    """Named module groups with a trainability mask and checksum bookkeeping."""

    def __init__(self, groups: dict[str, nn.Module]):
        self.groups = dict(groups)
        self.mask: dict[str, bool] = {}
        self._snapshots: dict[str, str] = {}

    def _get(self, name):
        if name not in self.groups:
            raise ConfigError(f"unknown parameter group {name!r}; known: {sorted(self.groups)}")
        return self.groups[name]

    def set_trainability(self, mask: dict[str, bool]):
        """Apply ``mask``; frozen groups go to eval mode and are checksummed."""
        for name, trainable in mask.items():
            module = self._get(name)
            if trainable and name in PERMANENTLY_FROZEN:
                raise ConfigError(f"group {name!r} is permanently frozen")
            for p in module.parameters():
                p.requires_grad_(bool(trainable))
            module.train(bool(trainable))
            self.mask[name] = bool(trainable)
            if trainable:
                self._snapshots.pop(name, None)
            else:
                self._snapshots[name] = module_checksum(module)

    def checksum(self, name: str) -> str:
        return module_checksum(self._get(name))

    def assert_frozen(self, name: str) -> bool:
        """True iff ``name`` is frozen and unchanged since the mask was applied."""
        self._get(name)
        if name not in self._snapshots:
            return False
        return self.checksum(name) == self._snapshots[name]

    def frozen_groups(self) -> list[str]:
        return [n for n, t in self.mask.items() if not t]

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        for name, trainable in self.mask.items():
            if trainable:
                params.extend(p for p in self.groups[name].parameters() if p.requires_grad)
        return params

    def train_mode(self):
        for name, trainable in self.mask.items():
            self.groups[name].train(trainable)

    def eval_mode(self):
        for module in self.groups.values():
            module.eval()

    def verify(self):
        """Raise :class:`~dait.errors.FreezeViolation` if any frozen group changed."""
        changed = [n for n in self.frozen_groups() if not self.assert_frozen(n)]
        if changed:
            raise FreezeViolation(f"frozen parameter groups changed: {changed}")


def set_trainability(groups: ParameterGroups, mask: dict[str, bool]):
    groups.set_trainability(mask)


def assert_frozen(groups: ParameterGroups, name: str) -> bool:
    return groups.assert_frozen(name)

