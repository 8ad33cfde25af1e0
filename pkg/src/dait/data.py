"""Datasets: synthetic fixture, image-folder ingestion, augmentation, subsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as nnf
from PIL import Image, UnidentifiedImageError
from torchvision.transforms.v2 import functional as TF

from dait.errors import ConfigError, IngestionError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".ppm"}


@dataclass(frozen=True)
class Dataset:
    """Immutable, ordered collection of labelled images.

    Images are float tensors ``(C, H, W)`` with values in ``[0, 1]``.
    ``item_ids`` identify items across subsampling and train/test splits.
    """

    images: tuple
    labels: tuple
    class_names: tuple
    split: str
    item_ids: tuple
    tag: str = "dataset"

    def __post_init__(self):
        if not len(self.images) == len(self.labels) == len(self.item_ids):
            raise ValueError("images, labels and item_ids must have equal length")
        n = len(self.class_names)
        bad = [y for y in self.labels if not 0 <= y < n]
        if bad:
            raise ValueError(f"label indices {bad[:5]} out of range for {n} classes")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], self.labels[i]

    @property
    def items(self):
        return list(zip(self.images, self.labels))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices_by_class(self) -> list[list[int]]:
        groups = [[] for _ in self.class_names]
        for i, y in enumerate(self.labels):
            groups[y].append(i)
        return groups

    def select(self, indices: Sequence[int]) -> "Dataset":
        indices = list(indices)
        return replace(
            self,
            images=tuple(self.images[i] for i in indices),
            labels=tuple(self.labels[i] for i in indices),
            item_ids=tuple(self.item_ids[i] for i in indices),
        )

    def label_tensor(self) -> torch.Tensor:
        return torch.tensor(self.labels, dtype=torch.long)


# --------------------------------------------------------------------------
# synthetic fixture


def _gratings(num_classes, channels, side, rng, per_class=2, freq=(1.0, 3.0)):
    """Coloured fixed-phase sinusoidal gratings per class, mirror-symmetric, unit RMS.

    Symmetrising about the vertical axis makes every class pattern invariant
    to horizontal flips.
    """
    coords = (torch.arange(side, dtype=torch.float64) + 0.5) / side
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    out = torch.zeros(num_classes, channels, side, side, dtype=torch.float64)
    for c in range(num_classes):
        for _ in range(per_class):
            f = rng.uniform(*freq)
            theta = rng.uniform(0, math.pi)
            phase = rng.uniform(0, 2 * math.pi)
            colour = torch.from_numpy(rng.standard_normal(channels))
            wave = torch.cos(2 * math.pi * f * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            out[c] += colour[:, None, None] * wave
    out = out + out.flip(-1)
    rms = out.pow(2).mean(dim=(1, 2, 3), keepdim=True).sqrt()
    return out / rms


def _smooth_patterns(num_classes, channels, side, rng):
    coarse = max(2, side // 4)
    raw = torch.from_numpy(rng.standard_normal((num_classes, channels, coarse, coarse)))
    smooth = nnf.interpolate(raw, size=(side, side), mode="bilinear", align_corners=False)
    # unit RMS per class
    rms = smooth.pow(2).mean(dim=(1, 2, 3), keepdim=True).sqrt()
    return smooth / rms


def generate_synthetic(
    num_classes: int = 4,
    per_class: int = 100,
    image_side: int = 32,
    separation: float = 1.0,
    seed: int = 0,
    noise: float = 3.0,
    nuisance: float = 2.0,
    contrast: float = 0.12,
    channels: int = 3,
) -> tuple[Dataset, Dataset]:
    """Build a class-structured image fixture and split it 80/20 per class.

    Each class owns a prototype made of two coloured low-frequency gratings,
    symmetric under horizontal flips. An image is
    ``0.5 + contrast * (separation * prototype + nuisance * smooth_nuisance + noise * white)``
    clipped to ``[0, 1]``, where ``smooth_nuisance`` is a fresh class-independent
    smooth pattern per image and ``white`` is per-pixel Gaussian noise.

    Args:
        num_classes: Number of classes, at least 2.
        per_class: Images generated per class, at least 2.
        image_side: Height and width in pixels.
        separation: Prototype amplitude; 0 makes all classes identically distributed.
        seed: Controls every random draw; equal seeds give identical datasets.
        noise: Amplitude of per-pixel white noise.
        nuisance: Amplitude of the per-image smooth distractor pattern.
        contrast: Global scale mapping the pattern into pixel intensities.
        channels: Image channels.

    Returns:
        ``(train, test)`` datasets.
    """
    if num_classes < 2 or per_class < 2:
        raise ConfigError("generate_synthetic needs num_classes >= 2 and per_class >= 2")
    rng = np.random.default_rng(seed)
    protos = _gratings(num_classes, channels, image_side, rng)
    n_train = min(per_class - 1, max(1, round(0.8 * per_class)))
    class_names = tuple(f"class_{c:02d}" for c in range(num_classes))
    splits = {"train": ([], [], []), "test": ([], [], [])}
    for c in range(num_classes):
        nuis = _smooth_patterns(per_class, channels, image_side, rng)
        white = torch.from_numpy(
            rng.standard_normal((per_class, channels, image_side, image_side))
        )
        imgs = 0.5 + contrast * (separation * protos[c] + nuisance * nuis + noise * white)
        imgs = imgs.clamp(0.0, 1.0).float()
        for i in range(per_class):
            split = "train" if i < n_train else "test"
            images, labels, ids = splits[split]
            images.append(imgs[i])
            labels.append(c)
            ids.append(f"{class_names[c]}/{i:05d}")
    tag = f"synthetic-N{num_classes}-s{image_side}-sep{separation:g}-seed{seed}"
    train, test = (
        Dataset(
            images=tuple(images),
            labels=tuple(labels),
            class_names=class_names,
            split=split,
            item_ids=tuple(ids),
            tag=tag,
        )
        for split, (images, labels, ids) in splits.items()
    )
    return train, test


# --------------------------------------------------------------------------
# image folders


def _read_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def _scan_split(root: Path, split: str) -> dict[str, list[Path]]:
    split_dir = root / split
    if not split_dir.is_dir():
        raise IngestionError(f"missing split directory {split_dir}")
    classes = {}
    for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        files = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise IngestionError(f"class {class_dir.name!r} in {split_dir} has no images")
        classes[class_dir.name] = files
    if not classes:
        raise IngestionError(f"no class directories under {split_dir}")
    return classes


def load_image_folder(root) -> tuple[Dataset, Dataset]:
    """Load ``root/{train,test}/<class_name>/*`` into a train and a test dataset.

    Class indices follow the lexicographic order of class directory names.
    """
    root = Path(root)
    scanned = {split: _scan_split(root, split) for split in ("train", "test")}
    train_classes, test_classes = set(scanned["train"]), set(scanned["test"])
    if train_classes != test_classes:
        missing = sorted(train_classes ^ test_classes)
        raise IngestionError(f"classes not present in both train and test: {missing}")
    class_names = tuple(sorted(train_classes))
    out = []
    for split in ("train", "test"):
        images, labels, ids = [], [], []
        for idx, name in enumerate(class_names):
            for path in scanned[split][name]:
                images.append(_read_image(path))
                labels.append(idx)
                ids.append(f"{split}/{name}/{path.name}")
        out.append(
            Dataset(tuple(images), tuple(labels), class_names, split, tuple(ids), tag=root.name)
        )
    return out[0], out[1]


def write_image_folder(root, train: Dataset, test: Dataset) -> Path:
    """Write datasets as 8-bit PNGs in the layout read by :func:`load_image_folder`."""
    root = Path(root)
    for ds in (train, test):
        for img, label, item_id in zip(ds.images, ds.labels, ds.item_ids):
            name = ds.class_names[label]
            stem = item_id.rsplit("/", 1)[-1].rsplit(".", 1)[0]
            path = root / ds.split / name / f"{stem}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            arr = (img.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
            if arr.shape[2] == 1:
                arr = arr[:, :, 0]
            Image.fromarray(arr).save(path)
    return root


# --------------------------------------------------------------------------
# augmentation

_OP_NAMES = {"random_resized_crop", "horizontal_flip", "color_jitter", "resize", "normalize"}


@dataclass(frozen=True)
class AugmentPolicy:
    """Ordered list of image ops plus a seed.

    ``ops`` entries are ``(name, params)`` pairs, applied in order. Supported
    names: ``random_resized_crop`` (``scale``, ``ratio``), ``horizontal_flip``
    (``p``), ``color_jitter`` (``brightness``, ``contrast``, ``saturation``),
    ``resize`` and ``normalize`` (``mean``, ``std``). ``random_resized_crop``
    and ``resize`` both output ``side`` x ``side``.
    """

    side: int
    ops: tuple = ()
    seed: int = 0

    def __post_init__(self):
        names = [name for name, _ in self.ops]
        unknown = set(names) - _OP_NAMES
        if unknown:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}")
        if "resize" not in names and "random_resized_crop" not in names:
            raise ConfigError("augment policy needs a resize or random_resized_crop op")
        if self.side < 1:
            raise ConfigError(f"augment side must be positive, got {self.side}")

    @property
    def is_random(self) -> bool:
        return any(
            name in ("random_resized_crop", "horizontal_flip", "color_jitter")
            for name, _ in self.ops
        )

    @classmethod
    def train_default(cls, side, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), seed=0):
        return cls(
            side=side,
            ops=(
                ("random_resized_crop", {"scale": (0.7, 1.0), "ratio": (3 / 4, 4 / 3)}),
                ("horizontal_flip", {"p": 0.5}),
                ("color_jitter", {"brightness": 0.1, "contrast": 0.1, "saturation": 0.1}),
                ("resize", {}),
                ("normalize", {"mean": tuple(mean), "std": tuple(std)}),
            ),
            seed=seed,
        )

    @classmethod
    def eval_default(cls, side, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), seed=0):
        return cls(
            side=side,
            ops=(("resize", {}), ("normalize", {"mean": tuple(mean), "std": tuple(std)})),
            seed=seed,
        )


def _crop_box(h, w, scale, ratio, rng):
    # same sampling scheme as the usual RandomResizedCrop
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _resize(image, side):
    if tuple(image.shape[-2:]) == (side, side):
        return image
    return TF.resize(image, [side, side], antialias=True)


def augment(image: torch.Tensor, policy: AugmentPolicy, sample_seed: int) -> torch.Tensor:
    """Apply ``policy`` to one ``(C, H, W)`` image in ``[0, 1]``.

    Randomness is drawn from a generator seeded by ``(policy.seed, sample_seed)``
    only, so the result is reproducible per sample.
    """
    rng = np.random.default_rng([policy.seed, sample_seed])
    out = image
    for name, params in policy.ops:
        if name == "random_resized_crop":
            top, left, h, w = _crop_box(
                out.shape[-2], out.shape[-1],
                params.get("scale", (0.08, 1.0)), params.get("ratio", (3 / 4, 4 / 3)), rng,
            )
            out = TF.resized_crop(out, top, left, h, w, [policy.side, policy.side], antialias=True)
        elif name == "horizontal_flip":
            if rng.random() < params.get("p", 0.5):
                out = TF.horizontal_flip(out)
        elif name == "color_jitter":
            b = params.get("brightness", 0.0)
            c = params.get("contrast", 0.0)
            s = params.get("saturation", 0.0)
            if b:
                out = TF.adjust_brightness(out, rng.uniform(1 - b, 1 + b))
            if c:
                out = TF.adjust_contrast(out, rng.uniform(1 - c, 1 + c))
            if s and out.shape[0] == 3:
                out = TF.adjust_saturation(out, rng.uniform(1 - s, 1 + s))
        elif name == "resize":
            out = _resize(out, policy.side)
        elif name == "normalize":
            c = out.shape[0]
            mean = list(params.get("mean", (0.5,) * c))[:c]
            std = list(params.get("std", (0.25,) * c))[:c]
            out = TF.normalize(out, mean, std)
    return out


def batch_augment(
    dataset: Dataset, indices: Sequence[int], policy: AugmentPolicy, epoch: int = 0
) -> torch.Tensor:
    """Augment ``dataset[indices]`` into one stacked batch.

    Deterministic policies ignore ``epoch``; random ones derive each sample
    seed from ``(epoch, index)``.
    """
    out = []
    for i in indices:
        sample_seed = int(i) if not policy.is_random else epoch * 1_000_003 + int(i)
        out.append(augment(dataset.images[i], policy, sample_seed))
    return torch.stack(out)


# --------------------------------------------------------------------------
# subsampling


def subsample(dataset: Dataset, ratio: float, seed: int = 0) -> Dataset:
    """Stratified per-class subsample keeping ``ceil(ratio * count_c)`` items per class.

    Item order within the result follows the original dataset order.
    ``ratio == 1`` returns ``dataset`` itself.
    """
    if not 0 < ratio <= 1:
        raise ConfigError(f"subsample ratio must lie in (0, 1], got {ratio}")
    if ratio == 1:
        return dataset
    rng = np.random.default_rng(seed)
    keep = []
    for members in dataset.indices_by_class():
        # guard against 0.3 * 10 = 3.0000000000000004
        k = math.ceil(ratio * len(members) - 1e-9)
        chosen = rng.permutation(len(members))[:k]
        keep.extend(members[j] for j in chosen)
    return dataset.select(sorted(keep))
