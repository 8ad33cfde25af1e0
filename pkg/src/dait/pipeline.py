"""Training orchestration: both distillation stages, baselines, evaluation, sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import time
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn as nn

from dait import losses
from dait.checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from dait.config import RunConfig, apply_overrides, check_paths, write_config
from dait.data import AugmentPolicy, Dataset, batch_augment, generate_synthetic, load_image_folder, subsample
from dait.encoders import (
    DirectStudentHead,
    EncoderSpec,
    IntermediateTeacher,
    ParameterGroups,
    ProjectionMLP,
    StudentNet,
    VisionLanguageTeacher,
    build_vlm_encoders,
    fit_projection_head,
    format_prompts,
    harmonize_spatial,
)
from dait.errors import ConfigError, ContractError, DaitError, TrainingError
from dait.schedule import lambda_at

logger = logging.getLogger(__name__)

FIT_VIEW_EPOCH = 1_000_000

METHOD_NAMES = {
    ("stage1", "feature"): "intermediate",
    ("stage1", "logit"): "intermediate",
    ("stage2", "feature"): "DAIT-F",
    ("stage2", "logit"): "DAIT-L",
    ("baseline_nokd", "feature"): "w/o KD",
    ("baseline_nokd", "logit"): "w/o KD",
    ("baseline_direct", "feature"): "KD (T: VLM)",
    ("baseline_direct", "logit"): "KD (T: VLM)",
}


@dataclass
class RunRecord:
    """Per-epoch trace and outcome of one training run."""

    method: str
    stage: str
    dataset: str
    ratio: float
    seed: int
    config: dict
    epochs: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Optional[str] = None
    top1: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None
    out_dir: Optional[str] = None

    def series(self, key: str) -> list:
        return [row.get(key) for row in self.epochs]

    def save(self, out_dir=None) -> Path:
        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys: list[str] = []
        for row in self.epochs:
            keys.extend(k for k in row if k not in keys)
        with open(out / "epochs.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.epochs)
        summary = asdict(self)
        summary.pop("epochs")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, out_dir) -> "RunRecord":
        out = Path(out_dir)
        summary = json.loads((out / "summary.json").read_text())
        rows = []
        csv_path = out / "epochs.csv"
        if csv_path.is_file():
            with open(csv_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    rows.append({k: _parse_cell(v) for k, v in row.items() if v != ""})
        return cls(epochs=rows, **summary)


def _parse_cell(v: str):
    try:
        return int(v)
    except ValueError:
        return float(v)


# --------------------------------------------------------------------------
# setup helpers


def configure_determinism(cfg: RunConfig):
    torch.manual_seed(cfg.run.seed)
    strict = cfg.run.determinism == "strict"
    torch.use_deterministic_algorithms(strict)
    if strict:
        torch.set_num_threads(1)


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Full train/test datasets described by ``cfg.data`` (before subsampling)."""
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(
            d.num_classes, d.per_class, d.image_side, d.separation, d.seed,
            noise=d.noise, nuisance=d.nuisance, channels=len(d.mean),
        )
    return load_image_folder(d.root)


def training_subset(cfg: RunConfig, train: Dataset) -> Dataset:
    return subsample(train, cfg.data.ratio, seed=cfg.data.subsample_seed + cfg.run.seed)


def make_policy(cfg: RunConfig, which: str) -> AugmentPolicy:
    d = cfg.data
    factory = AugmentPolicy.train_default if which == "train" else AugmentPolicy.eval_default
    return factory(d.image_side, mean=d.mean, std=d.std, seed=cfg.run.seed)


def _role_spec(cfg: RunConfig, role: str) -> EncoderSpec:
    sec = getattr(cfg.encoders, role)
    return EncoderSpec(role=role, kind=sec.kind, raw_dim=sec.raw_dim, seed=sec.seed, adapter=sec.adapter)


def _in_shape(cfg: RunConfig):
    return (len(cfg.data.mean), cfg.data.image_side, cfg.data.image_side)


def build_vlm(cfg: RunConfig, projection: ProjectionMLP | None = None) -> VisionLanguageTeacher:
    image, text = build_vlm_encoders(
        _role_spec(cfg, "vlm_image"), _role_spec(cfg, "vlm_text"), _in_shape(cfg),
        anchor_cosine=cfg.encoders.anchor_cosine,
    )
    if projection is None:
        projection = ProjectionMLP(image.raw_dim, cfg.encoders.dim, seed=cfg.encoders.vlm_image.seed)
    return VisionLanguageTeacher(image, text, projection)


def fit_vlm(cfg: RunConfig, train: Dataset) -> tuple[VisionLanguageTeacher, list[float]]:
    """Build the frozen VLM and fit ``f_vlm`` on the training images.

    The fit sees each image once unaugmented plus ``encoders.fit_views``
    views under the stage-1 augmentation policy, so the projected targets
    stay stable on augmented inputs.
    """
    vlm = build_vlm(cfg)
    indices = range(len(train))
    views = [batch_augment(train, indices, make_policy(cfg, "eval"))]
    policy = make_policy(cfg, cfg.data.stage1_augment)
    if policy.is_random:
        # epochs far past any training run keep these draws disjoint from training
        views += [batch_augment(train, indices, policy, epoch=FIT_VIEW_EPOCH + v)
                  for v in range(cfg.encoders.fit_views)]
    prompts = format_prompts(train.class_names, cfg.encoders.template)
    head, history = fit_projection_head(
        torch.cat([vlm.raw_image_features(x) for x in views]),
        vlm.raw_text_features(prompts),
        train.label_tensor().repeat(len(views)),
        epochs=cfg.encoders.fit_epochs,
        lr=cfg.encoders.fit_lr,
        logit_scale=cfg.encoders.logit_scale,
        head=vlm.projection,
    )
    return vlm, history


def build_intermediate(cfg: RunConfig, num_classes: int) -> IntermediateTeacher:
    sec = cfg.encoders.intermediate
    if sec.kind != "toy":
        raise ConfigError("encoders.intermediate.kind: only toy intermediate encoders are built in")
    return IntermediateTeacher(
        num_classes, dim=cfg.encoders.dim, channels=sec.channels or (32, 64, 64),
        in_channels=len(cfg.data.mean), seed=cfg.run.seed * 1000 + sec.seed,
    )


def build_student(cfg: RunConfig, num_classes: int, teacher_channels: int) -> StudentNet:
    sec = cfg.encoders.student
    if sec.kind != "toy":
        raise ConfigError("encoders.student.kind: only toy student encoders are built in")
    return StudentNet(
        num_classes, teacher_channels, channels=sec.channels or (8, 16),
        in_channels=len(cfg.data.mean), seed=cfg.run.seed * 1000 + sec.seed,
    )


def make_optimizer(cfg: RunConfig, params):
    o = cfg.optimizer
    if o.name == "adamw":
        return torch.optim.AdamW(params, lr=o.lr, weight_decay=o.weight_decay)
    if o.name == "adam":
        return torch.optim.Adam(params, lr=o.lr, weight_decay=o.weight_decay)
    return torch.optim.SGD(params, lr=o.lr, momentum=0.9, weight_decay=o.weight_decay)


def top1_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Fraction of rows whose argmax equals the label."""
    if logits.shape[0] != labels.shape[0]:
        raise ContractError("logits and labels must have the same length")
    if logits.shape[0] == 0:
        raise ContractError("cannot score an empty set")
    return float((logits.argmax(dim=1) == labels).float().mean())


@torch.no_grad()
def predict_logits(classify: Callable, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([classify(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def _batches(perm: torch.Tensor, batch_size: int) -> list[torch.Tensor]:
    chunks = list(perm.split(batch_size))
    # a size-1 tail batch breaks batch norm in train mode
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = torch.cat([chunks[-2], chunks.pop()])
    return chunks


# --------------------------------------------------------------------------
# the generic epoch loop

StepFn = Callable[[torch.Tensor, torch.Tensor, Optional[float]], tuple[dict, torch.Tensor]]


def _train(
    cfg: RunConfig,
    record: RunRecord,
    train: Dataset,
    policy: AugmentPolicy,
    groups: ParameterGroups,
    step: StepFn,
    classify: Callable,
    test_x: torch.Tensor,
    test_y: torch.Tensor,
    save: Callable[[int, dict], Path],
    use_lambda: bool = True,
):
    params = groups.trainable_parameters()
    opt = make_optimizer(cfg, params)
    sched = torch.optim.lr_scheduler.StepLR(
        opt, step_size=cfg.optimizer.decay_every, gamma=cfg.optimizer.decay_factor
    )
    schedule = cfg.schedule_params()
    labels = train.label_tensor()
    cached = None if policy.is_random else batch_augment(train, range(len(train)), policy)
    n = len(train)
    best = -math.inf
    last_good = None
    for epoch in range(cfg.run.epochs):
        lam = lambda_at(schedule, epoch) if use_lambda else None
        lr = opt.param_groups[0]["lr"]
        groups.train_mode()
        order = torch.randperm(n, generator=torch.Generator().manual_seed(cfg.run.seed * 100_003 + epoch))
        sums: dict[str, float] = defaultdict(float)
        correct = 0
        for idx in _batches(order, cfg.run.batch_size):
            if cached is not None:
                x = cached[idx]
            else:
                x = batch_augment(train, idx.tolist(), policy, epoch=epoch)
            y = labels[idx]
            terms, logits = step(x, y, lam)
            total = terms["total"]
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}",
                    last_checkpoint=last_good,
                    diagnostics={k: v.item() for k, v in terms.items()},
                )
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            for k, v in terms.items():
                sums[k] += v.item() * len(idx)
            correct += int((logits.detach().argmax(dim=1) == y).sum())
        sched.step()
        groups.verify()
        groups.eval_mode()
        test_top1 = top1_accuracy(predict_logits(classify, test_x), test_y)
        row = {"epoch": epoch}
        if lam is not None:
            row["lam"] = lam
        row.update({k: v / n for k, v in sums.items()})
        row.update({"train_top1": correct / n, "test_top1": test_top1, "lr": lr})
        record.epochs.append(row)
        logger.info("%s epoch %d %s", record.method, epoch, row)
        if cfg.run.checkpoint_select == "last" or test_top1 > best:
            best = test_top1
            last_good = save(epoch, row)
            record.top1 = test_top1
            record.checkpoint = str(last_good)
    groups.verify()


def _new_record(cfg: RunConfig, train: Dataset) -> RunRecord:
    return RunRecord(
        method=cfg.run.name or METHOD_NAMES[(cfg.run.stage, cfg.run.mode)],
        stage=cfg.run.stage,
        dataset=train.tag,
        ratio=cfg.data.ratio,
        seed=cfg.run.seed,
        config=cfg.to_dict(),
        out_dir=str(cfg.out_path),
    )


def _prepare(cfg: RunConfig):
    configure_determinism(cfg)
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "resolved_config.yaml")
    train_full, test = load_datasets(cfg)
    train = training_subset(cfg, train_full)
    test_x = batch_augment(test, range(len(test)), make_policy(cfg, "eval"))
    return out, train, test, test_x, test.label_tensor()


def _finish(record: RunRecord, start: float) -> RunRecord:
    record.wall_time = time.perf_counter() - start
    record.save()
    return record


# --------------------------------------------------------------------------
# stage 1


def run_stage1(cfg: RunConfig) -> RunRecord:
    """Distil the frozen VLM into the intermediate teacher.

    ``f_vlm`` is fitted first on the training images (plain and augmented
    views) and then frozen, so the teacher targets are stationary for the
    whole stage.
    """
    start = time.perf_counter()
    out, train, test, test_x, test_y = _prepare(cfg)
    record = _new_record(cfg, train)
    vlm, fit_history = fit_vlm(cfg, train)
    anchors = vlm.encode_text(train.class_names, cfg.encoders.template).values
    inter = build_intermediate(cfg, train.num_classes)
    groups = ParameterGroups({
        "vlm_image": vlm.image_encoder,
        "vlm_text": vlm.text_encoder,
        "f_vlm": vlm.projection,
        "intermediate": inter,
    })
    groups.set_trainability({"vlm_image": False, "vlm_text": False, "f_vlm": False, "intermediate": True})
    T = cfg.losses.temperature
    kl_order = cfg.losses.kl_order

    def step(x, y, lam):
        z_v = vlm.encode_image(x)
        pooled, _, logits = inter(x)
        sia = losses.sia_loss(
            losses.cosine_matrix(pooled, anchors), losses.cosine_matrix(z_v, anchors), T, kl_order
        )
        ira = losses.ira_loss(pooled, z_v)
        cls = losses.cls_loss(logits, y)
        return {"sia": sia, "ira": ira, "cls": cls, "total": losses.stage1_total(sia, ira, cls, lam)}, logits

    def save(epoch, row):
        return save_checkpoint(
            out / "stage1.pt",
            {"vlm_image": vlm.image_encoder, "vlm_text": vlm.text_encoder, "f_vlm": vlm.projection,
             "intermediate": inter},
            kind="stage1", config=cfg, epoch=epoch, metrics=row,
            tensors={"anchors": anchors, "fit_history": torch.tensor(fit_history)},
        )

    _train(cfg, record, train, make_policy(cfg, cfg.data.stage1_augment), groups, step,
           lambda x: inter(x)[2], test_x, test_y, save)
    return _finish(record, start)


# --------------------------------------------------------------------------
# restoring models from checkpoints


@dataclass
class Restored:
    checkpoint: LoadedCheckpoint
    vlm: VisionLanguageTeacher
    anchors: torch.Tensor
    intermediate: Optional[IntermediateTeacher] = None
    student: Optional[StudentNet] = None
    direct_head: Optional[DirectStudentHead] = None

    def classifier(self):
        """The model whose logits define the checkpoint's predictions."""
        if self.student is not None:
            return lambda x: self.student(x)[1]
        if self.intermediate is not None:
            return lambda x: self.intermediate(x)[2]
        raise ContractError("checkpoint holds no classifier")

    def parameter_groups(self) -> ParameterGroups:
        groups = {"vlm_image": self.vlm.image_encoder, "vlm_text": self.vlm.text_encoder,
                  "f_vlm": self.vlm.projection}
        if self.intermediate is not None:
            groups["intermediate"] = self.intermediate
        if self.student is not None:
            groups["student"] = self.student
        if self.direct_head is not None:
            groups["direct_head"] = self.direct_head
        return ParameterGroups(groups)


def restore(path) -> Restored:
    """Rebuild every module stored in a checkpoint, in eval mode."""
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    state = ckpt.state
    anchors = ckpt.tensors["anchors"]
    num_classes = anchors.shape[0]
    vlm = build_vlm(cfg)
    vlm.image_encoder.load_state_dict(state["vlm_image"])
    vlm.text_encoder.load_state_dict(state["vlm_text"])
    vlm.projection.load_state_dict(state["f_vlm"])
    restored = Restored(checkpoint=ckpt, vlm=vlm, anchors=anchors)
    if "intermediate" in state:
        restored.intermediate = build_intermediate(cfg, num_classes)
        restored.intermediate.load_state_dict(state["intermediate"])
    if "student" in state:
        teacher_channels = state["student"]["align.weight"].shape[0]
        restored.student = build_student(cfg, num_classes, teacher_channels)
        restored.student.load_state_dict(state["student"])
    if "direct_head" in state:
        restored.direct_head = DirectStudentHead(restored.student.map_channels, cfg.encoders.dim)
        restored.direct_head.load_state_dict(state["direct_head"])
    for module in (vlm, restored.intermediate, restored.student, restored.direct_head):
        if module is not None:
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
    return restored


# --------------------------------------------------------------------------
# stage 2


def _stage1_for(cfg: RunConfig) -> str:
    ref = cfg.run.stage1_checkpoint
    if ref is None:
        raise ConfigError("run.stage1_checkpoint is required for stage2")
    if ref != "auto":
        if not Path(ref).is_file():
            raise ConfigError(f"run.stage1_checkpoint: file not found: {ref}")
        return ref
    s1 = apply_overrides(cfg, {"run.stage": "stage1", "run.stage1_checkpoint": None,
                               "run.out_dir": str(cfg.out_path / "stage1"), "run.name": None})
    s1 = apply_overrides(s1, cfg.stage1_overrides)
    return run_stage1(s1).checkpoint


def run_stage2(cfg: RunConfig) -> RunRecord:
    """Distil the frozen intermediate teacher into the student.

    ``run.mode == "feature"`` uses the spatial map loss, ``"logit"`` the
    tempered logit KL. ``run.stage1_checkpoint == "auto"`` trains stage 1
    first into ``<out_dir>/stage1``.
    """
    stage1_path = _stage1_for(cfg)
    start = time.perf_counter()
    out, train, test, test_x, test_y = _prepare(cfg)
    record = _new_record(cfg, train)
    s1 = restore(stage1_path)
    if s1.intermediate is None:
        raise ConfigError(f"run.stage1_checkpoint: {stage1_path} holds no intermediate teacher")
    if s1.anchors.shape[0] != train.num_classes:
        raise ContractError("stage-1 checkpoint class count does not match the dataset")
    vlm, inter = s1.vlm, s1.intermediate
    student = build_student(cfg, train.num_classes, inter.map_channels)
    groups = ParameterGroups({
        "vlm_image": vlm.image_encoder, "vlm_text": vlm.text_encoder, "f_vlm": vlm.projection,
        "intermediate": inter, "student": student,
    })
    groups.set_trainability({"vlm_image": False, "vlm_text": False, "f_vlm": False,
                             "intermediate": False, "student": True})
    feature_mode = cfg.run.mode == "feature"
    T = cfg.losses.temperature
    kl_order = cfg.losses.kl_order

    def step(x, y, lam):
        with torch.no_grad():
            _, t_map, t_logits = inter(x)
        s_map, s_logits = student(x)
        if feature_mode:
            distill = losses.sra_loss(*harmonize_spatial(s_map, t_map))
            name = "sra"
        else:
            distill = losses.logit_kd_loss(s_logits, t_logits, T, kl_order)
            name = "logit_kd"
        cls = losses.cls_loss(s_logits, y)
        return {name: distill, "cls": cls, "total": losses.stage2_total(distill, cls, lam)}, s_logits

    def save(epoch, row):
        return save_checkpoint(
            out / "stage2.pt",
            {"vlm_image": vlm.image_encoder, "vlm_text": vlm.text_encoder, "f_vlm": vlm.projection,
             "intermediate": inter, "student": student},
            kind="stage2", config=cfg, epoch=epoch, metrics={**row, "stage1_checkpoint": str(stage1_path)},
            tensors={"anchors": s1.anchors},
        )

    _train(cfg, record, train, make_policy(cfg, cfg.data.stage2_augment), groups, step,
           lambda x: student(x)[1], test_x, test_y, save)
    return _finish(record, start)


# --------------------------------------------------------------------------
# baselines


def run_baseline(cfg: RunConfig) -> RunRecord:
    """Train the student without the intermediate teacher.

    ``baseline_nokd`` uses only the classification loss. ``baseline_direct``
    applies the stage-1 objective (semantic + representation alignment
    against the projected VLM) directly to the student, through a linear
    head on its pooled features.
    """
    stage = cfg.run.stage
    if stage not in ("baseline_nokd", "baseline_direct"):
        raise ConfigError(f"run_baseline needs a baseline stage, got {stage!r}")
    start = time.perf_counter()
    out, train, test, test_x, test_y = _prepare(cfg)
    record = _new_record(cfg, train)
    direct = stage == "baseline_direct"
    teacher_channels = cfg.encoders.intermediate.channels[-1] if cfg.encoders.intermediate.channels else 64
    student = build_student(cfg, train.num_classes, teacher_channels)
    modules = {"student": student}
    mask = {"student": True}
    anchors = torch.zeros(train.num_classes, cfg.encoders.dim)
    if direct:
        vlm, _ = fit_vlm(cfg, train)
        anchors = vlm.encode_text(train.class_names, cfg.encoders.template).values
        head = DirectStudentHead(student.map_channels, cfg.encoders.dim, seed=cfg.run.seed)
        modules.update({"vlm_image": vlm.image_encoder, "vlm_text": vlm.text_encoder,
                        "f_vlm": vlm.projection, "direct_head": head})
        mask.update({"vlm_image": False, "vlm_text": False, "f_vlm": False, "direct_head": True})
    else:
        vlm = build_vlm(cfg)
    groups = ParameterGroups(modules)
    groups.set_trainability(mask)
    T = cfg.losses.temperature
    kl_order = cfg.losses.kl_order

    def step(x, y, lam):
        if not direct:
            _, logits = student(x)
            cls = losses.cls_loss(logits, y)
            return {"cls": cls, "total": cls}, logits
        fmap = student.features(x)
        logits = student.classifier(fmap.mean(dim=(2, 3)))
        pooled = head(fmap)
        z_v = vlm.encode_image(x)
        sia = losses.sia_loss(
            losses.cosine_matrix(pooled, anchors), losses.cosine_matrix(z_v, anchors), T, kl_order
        )
        ira = losses.ira_loss(pooled, z_v)
        cls = losses.cls_loss(logits, y)
        return {"sia": sia, "ira": ira, "cls": cls, "total": losses.stage1_total(sia, ira, cls, lam)}, logits

    def save(epoch, row):
        saved = {"vlm_image": vlm.image_encoder, "vlm_text": vlm.text_encoder, "f_vlm": vlm.projection,
                 **modules}
        return save_checkpoint(out / f"{stage}.pt", saved, kind=stage, config=cfg, epoch=epoch,
                               metrics=row, tensors={"anchors": anchors})

    _train(cfg, record, train, make_policy(cfg, cfg.data.stage2_augment), groups, step,
           lambda x: student(x)[1], test_x, test_y, save, use_lambda=direct)
    return _finish(record, start)


# --------------------------------------------------------------------------
# evaluation, dispatch, sweeps


def evaluate(checkpoint, dataset: Dataset) -> float:
    """Top-1 accuracy of a checkpoint's classifier on ``dataset``."""
    restored = restore(checkpoint)
    if restored.anchors.shape[0] != dataset.num_classes:
        raise ContractError(
            f"checkpoint has {restored.anchors.shape[0]} classes, dataset has {dataset.num_classes}"
        )
    cfg = restored.checkpoint.config
    x = batch_augment(dataset, range(len(dataset)), make_policy(cfg, "eval"))
    return top1_accuracy(predict_logits(restored.classifier(), x), dataset.label_tensor())


RUNNERS = {
    "stage1": run_stage1,
    "stage2": run_stage2,
    "baseline_nokd": run_baseline,
    "baseline_direct": run_baseline,
}


def run_config(cfg: RunConfig) -> RunRecord:
    check_paths(cfg)
    return RUNNERS[cfg.run.stage](cfg)


def expand_grid(axes: dict) -> list[dict]:
    """Cartesian product of ``{dotted_key: [values]}`` as a list of deltas."""
    if not axes:
        return []
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in product(*(axes[k] for k in keys))]


def _slug(delta: dict) -> str:
    text = "_".join(f"{k.split('.')[-1]}={v}" for k, v in delta.items())
    return re.sub(r"[^A-Za-z0-9_.=-]+", "-", text)[:80] or "base"


def _run_variant(args) -> RunRecord:
    base, delta, out_dir = args
    try:
        cfg = apply_overrides(base, {**delta, "run.out_dir": str(out_dir)})
        return run_config(cfg)
    except Exception as exc:  # a failed variant must not stop the sweep
        if not isinstance(exc, DaitError):
            logger.error("variant %s crashed:\n%s", delta, traceback.format_exc())
        record = RunRecord(
            method=base.run.name or METHOD_NAMES.get((base.run.stage, base.run.mode), base.run.stage),
            stage=str(delta.get("run.stage", base.run.stage)), dataset="", ratio=float(delta.get("data.ratio", base.data.ratio)),
            seed=int(delta.get("run.seed", base.run.seed)), config={"delta": delta},
            status="failed", error=f"{type(exc).__name__}: {exc}", out_dir=str(out_dir),
        )
        record.save()
        return record


def sweep(base: RunConfig, grid: list[dict], out_dir=None, jobs: int = 1) -> list[RunRecord]:
    """Run every delta of ``grid`` on top of ``base`` in its own directory.

    Writes ``sweep_summary.csv`` with one row per variant. Failed variants are
    recorded with ``status="failed"`` and the sweep carries on.
    """
    root = Path(out_dir or base.out_path)
    if not grid:
        return []
    tasks = [(base, delta, root / f"{i:03d}_{_slug(delta)}") for i, delta in enumerate(grid)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_variant, tasks))
    else:
        records = [_run_variant(t) for t in tasks]
    root.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for d in grid for k in d})
    with open(root / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *keys, "method", "status", "top1", "out_dir"])
        for i, (delta, rec) in enumerate(zip(grid, records)):
            writer.writerow([i, *(delta.get(k, "") for k in keys), rec.method, rec.status,
                             "" if rec.top1 is None else rec.top1, rec.out_dir])
    return records
