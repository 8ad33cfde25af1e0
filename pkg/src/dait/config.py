"""Declarative run configuration: YAML file + dotted overrides -> RunConfig."""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from dait.errors import ConfigError
from dait.schedule import ScheduleParams

STAGES = ("stage1", "stage2", "baseline_nokd", "baseline_direct")
MODES = ("feature", "logit")


@dataclass
class RunSection:
    stage: str = "stage1"
    mode: str = "feature"
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    determinism: str = "strict"
    out_dir: str = "runs/default"
    # path to a stage-1 checkpoint, or "auto" to train one first
    stage1_checkpoint: Optional[str] = None
    checkpoint_select: str = "best"
    name: Optional[str] = None


@dataclass
class OptimizerSection:
    name: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    decay_every: int = 30
    decay_factor: float = 0.1


@dataclass
class ScheduleSection:
    # None resolves to 1 / run.epochs
    k: Optional[float] = None
    b: float = 0.0
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0


@dataclass
class LossSection:
    temperature: float = 2.0
    kl_order: str = "as_printed"


@dataclass
class EncoderRoleSection:
    kind: str = "toy"
    seed: int = 0
    raw_dim: int = 256
    channels: list = field(default_factory=list)
    adapter: str = ""


@dataclass
class EncodersSection:
    dim: int = 64
    template: str = "a photo of a {}"
    anchor_cosine: float = 0.2
    fit_epochs: int = 100
    fit_lr: float = 1e-3
    fit_views: int = 8
    logit_scale: float = 10.0
    vlm_image: EncoderRoleSection = field(default_factory=lambda: EncoderRoleSection(seed=11))
    vlm_text: EncoderRoleSection = field(default_factory=lambda: EncoderRoleSection(seed=12))
    intermediate: EncoderRoleSection = field(
        default_factory=lambda: EncoderRoleSection(seed=13, channels=[32, 64, 64])
    )
    student: EncoderRoleSection = field(
        default_factory=lambda: EncoderRoleSection(seed=14, channels=[16, 32, 32])
    )


@dataclass
class DataSection:
    source: str = "synthetic"
    root: Optional[str] = None
    num_classes: int = 4
    per_class: int = 100
    image_side: int = 32
    separation: float = 1.0
    noise: float = 3.0
    nuisance: float = 2.0
    seed: int = 7
    ratio: float = 1.0
    subsample_seed: int = 0
    mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list = field(default_factory=lambda: [0.25, 0.25, 0.25])
    # "train" = crop/flip/jitter/resize/normalize, "eval" = resize/normalize
    stage1_augment: str = "train"
    stage2_augment: str = "eval"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    losses: LossSection = field(default_factory=LossSection)
    encoders: EncodersSection = field(default_factory=EncodersSection)
    data: DataSection = field(default_factory=DataSection)
    # dotted overrides applied to the auto-trained stage-1 run only
    stage1_overrides: dict = field(default_factory=dict)

    def schedule_params(self) -> ScheduleParams:
        s = self.schedule
        k = 1.0 / self.run.epochs if s.k is None else s.k
        return ScheduleParams(k=k, b=s.b, clamp_lo=s.clamp_lo, clamp_hi=s.clamp_hi)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)

    @property
    def out_path(self) -> Path:
        return Path(self.run.out_dir)


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _coerce(value, tp, path):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # YAML 1.1 loads "1e-4" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
    elif tp is str:
        if isinstance(value, str):
            return value
    elif tp is list or typing.get_origin(tp) is list:
        if isinstance(value, (list, tuple)):
            return list(value)
    elif tp is dict:
        if isinstance(value, dict):
            return dict(value)
    else:
        raise ConfigError(f"{path}: unsupported field type {tp}")
    raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__} ({value!r})")


def _merge(obj, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, path)
        else:
            setattr(obj, key, _coerce(value, hints[key], path))


def _nest(dotted: str, value) -> dict:
    parts = dotted.split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {dotted!r}")
    out: dict = {}
    cur = out
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``"a.b=value"``; the value is parsed as YAML scalar/list."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {raw!r}") from exc
    return key.strip(), value


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Return a copy of ``cfg`` with dotted overrides applied.

    ``overrides`` is a mapping ``{"schedule.k": 0}`` or an iterable of
    ``"key=value"`` strings.
    """
    cfg = cfg.copy()
    items = overrides.items() if isinstance(overrides, dict) else map(parse_override, overrides)
    for key, value in items:
        if key.startswith("stage1_overrides."):
            cfg.stage1_overrides[key.split(".", 1)[1]] = value
        else:
            _merge(cfg, _nest(key, value), "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    r = cfg.run
    if r.stage not in STAGES:
        raise ConfigError(f"run.stage must be one of {STAGES}, got {r.stage!r}")
    if r.mode not in MODES:
        raise ConfigError(f"run.mode must be one of {MODES}, got {r.mode!r}")
    if r.determinism not in ("strict", "fast"):
        raise ConfigError(f"run.determinism must be strict or fast, got {r.determinism!r}")
    if r.checkpoint_select not in ("best", "last"):
        raise ConfigError(f"run.checkpoint_select must be best or last, got {r.checkpoint_select!r}")
    if r.epochs < 1:
        raise ConfigError("run.epochs must be >= 1")
    if r.batch_size < 1:
        raise ConfigError("run.batch_size must be >= 1")
    if cfg.losses.temperature <= 0:
        raise ConfigError("losses.temperature must be positive")
    if cfg.losses.kl_order not in ("as_printed", "teacher_first"):
        raise ConfigError(f"losses.kl_order must be as_printed or teacher_first, got {cfg.losses.kl_order!r}")
    if cfg.optimizer.name not in ("adamw", "adam", "sgd"):
        raise ConfigError(f"optimizer.name must be adamw, adam or sgd, got {cfg.optimizer.name!r}")
    if cfg.data.source not in ("synthetic", "folder"):
        raise ConfigError(f"data.source must be synthetic or folder, got {cfg.data.source!r}")
    if cfg.data.source == "folder" and not cfg.data.root:
        raise ConfigError("data.root is required when data.source is folder")
    if not 0 < cfg.data.ratio <= 1:
        raise ConfigError(f"data.ratio must lie in (0, 1], got {cfg.data.ratio}")
    for key in ("stage1_augment", "stage2_augment"):
        if getattr(cfg.data, key) not in ("train", "eval"):
            raise ConfigError(f"data.{key} must be train or eval")
    for role in ("vlm_image", "vlm_text", "intermediate", "student"):
        kind = getattr(cfg.encoders, role).kind
        if kind not in ("toy", "external_adapter"):
            raise ConfigError(f"encoders.{role}.kind must be toy or external_adapter, got {kind!r}")
    s = cfg.schedule
    if s.clamp_lo > s.clamp_hi:
        raise ConfigError("schedule.clamp_lo must be <= schedule.clamp_hi")
    if s.clamp_lo < 0 or s.clamp_hi > 1:
        raise ConfigError("schedule clamp bounds must lie within [0, 1]")
    for key, value in cfg.stage1_overrides.items():
        _merge(RunConfig(), _nest(key, value), "stage1_overrides")


def parse_config(path=None, overrides=(), echo_to: str | Path | None = None) -> RunConfig:
    """Load a YAML config, apply overrides, validate, and optionally echo it.

    Args:
        path: YAML file of nested sections; ``None`` means all defaults.
        overrides: ``"key=value"`` strings or a ``{dotted_key: value}`` mapping,
            applied after the file.
        echo_to: Directory that receives ``resolved_config.yaml``.

    Raises:
        ConfigError: unknown key, type mismatch, invalid value, or missing
            checkpoint/data path. The message names the offending key.
    """
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        _merge(cfg, data, "")
    cfg = apply_overrides(cfg, overrides)
    check_paths(cfg)
    if echo_to is not None:
        write_config(cfg, Path(echo_to) / "resolved_config.yaml")
    return cfg


def check_paths(cfg: RunConfig):
    ckpt = cfg.run.stage1_checkpoint
    if cfg.run.stage == "stage2":
        if ckpt is None:
            raise ConfigError("run.stage1_checkpoint is required for stage2")
        if ckpt != "auto" and not Path(ckpt).is_file():
            raise ConfigError(f"run.stage1_checkpoint: file not found: {ckpt}")
    if cfg.data.source == "folder" and not Path(cfg.data.root).is_dir():
        raise ConfigError(f"data.root: directory not found: {cfg.data.root}")


def write_config(cfg: RunConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, data, "")
    validate(cfg)
    return cfg
