"""Datasets as in-memory tensor splits.

Every loader funnels into the same representation: an :class:`ArraySplit`
holding float images (N, 3, H, W) and integer labels.  Loading applies a
fixed pipeline: stratified validation carve-out, optional stratified
subsampling, bicubic resize to the requested square size, then per-channel
normalization with statistics of the training split actually used.  No
augmentation of any kind is applied.

Sources: a few torchvision datasets (downloaded or read from a local data
root), class-per-directory image folders, and two synthetic generators used
for fast, fully offline experiments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")


@dataclass
class ArraySplit:
    """One dataset split fully materialized as tensors."""

    images: torch.Tensor  # float32, (N, C, H, W)
    targets: torch.Tensor  # int64, (N,)
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if self.targets.ndim != 1 or len(self.targets) != len(self.images):
            raise ValueError("targets must be a vector aligned with images")
        if self.targets.dtype != torch.int64:
            raise ValueError(f"targets must be int64, got {self.targets.dtype}")
        if not self.images.dtype.is_floating_point:
            raise ValueError(f"images must be floating point, got {self.images.dtype}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.targets) and (self.targets.min() < 0 or self.targets.max() >= self.num_classes):
            raise ValueError("targets out of range for num_classes")

    def __len__(self) -> int:
        return len(self.targets)


def iter_batches(split: ArraySplit, batch_size: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    for start in range(0, len(split), batch_size):
        stop = start + batch_size
        yield split.images[start:stop], split.targets[start:stop]


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class DatasetSpec:
    """Declared identity and split sizes of a dataset.

    ``desk_subsample`` is the suggested stratified train fraction for quick
    desk-scale runs; loaders only subsample when explicitly asked.
    """

    name: str
    source: str  # torchvision | local-directory | synthetic
    num_classes: int
    train_size: int
    val_size: int
    test_size: int
    balanced: bool = True
    grayscale: bool = False
    synthetic_kind: str | None = None
    desk_subsample: float | None = None


DATASETS: dict[str, DatasetSpec] = {
    spec.name: spec
    for spec in (
        DatasetSpec("cifar10", "torchvision", 10, 45000, 5000, 10000, desk_subsample=1 / 9),
        DatasetSpec("cifar100", "torchvision", 100, 45000, 5000, 10000, desk_subsample=1 / 9),
        DatasetSpec("fmnist", "torchvision", 10, 51000, 9000, 10000, grayscale=True,
                    desk_subsample=0.1),
        DatasetSpec("eurosat", "local-directory", 10, 17500, 4000, 5500, balanced=False,
                    desk_subsample=0.25),
        DatasetSpec("gtsrb", "local-directory", 43, 33209, 6000, 12630, balanced=False,
                    desk_subsample=0.15),
        DatasetSpec("tiny-imagenet", "local-directory", 200, 85000, 15000, 10000,
                    desk_subsample=0.06),
        DatasetSpec("blobs", "synthetic", 2, 200, 50, 50, synthetic_kind="blobs"),
        DatasetSpec("patterns", "synthetic", 10, 5000, 1000, 1000, synthetic_kind="patterns"),
    )
}


def dataset_spec(name: str) -> DatasetSpec:
    if name not in DATASETS:
        raise KeyError(f"unknown dataset {name!r}; registered: {sorted(DATASETS)}")
    return DATASETS[name]


def default_data_root() -> Path:
    return Path(os.environ.get("MULTIEXIT_DATA_ROOT", "data"))


# ---------------------------------------------------------------------------
# stratified index helpers


def stratified_take(targets: np.ndarray, per_class: dict[int, int],
                    rng: np.random.Generator) -> np.ndarray:
    """Pick `per_class[c]` random indices of each class c, returned sorted."""
    chosen = []
    for cls, count in per_class.items():
        pool = np.flatnonzero(targets == cls)
        if count > len(pool):
            raise ValueError(f"class {cls} has {len(pool)} samples, need {count}")
        picked = rng.choice(pool, size=count, replace=False)
        chosen.append(picked)
    return np.sort(np.concatenate(chosen))


def stratified_carve(targets: np.ndarray, carve_size: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (kept, carved) with the carve stratified by class.

    Per-class carve counts are proportional to class frequency (largest
    remainder rounding), so unbalanced datasets stay unbalanced in the same
    proportions.
    """
    n = len(targets)
    if not (0 < carve_size < n):
        raise ValueError(f"cannot carve {carve_size} of {n} samples")
    classes, counts = np.unique(targets, return_counts=True)
    exact = counts * (carve_size / n)
    take = np.floor(exact).astype(int)
    remainder = carve_size - take.sum()
    if remainder > 0:
        order = np.argsort(-(exact - take), kind="stable")
        take[order[:remainder]] += 1
    per_class = {int(c): int(t) for c, t in zip(classes, take) if t > 0}
    carved = stratified_take(targets, per_class, rng)
    kept_mask = np.ones(n, dtype=bool)
    kept_mask[carved] = False
    return np.flatnonzero(kept_mask), carved


def stratified_subsample(split: ArraySplit, fraction: float, seed: int) -> ArraySplit:
    """Keep a stratified fraction of the split, at least one sample per class."""
    if not (0 < fraction <= 1):
        raise ValueError(f"subsample fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split
    targets = split.targets.numpy()
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(targets, return_counts=True)
    per_class = {int(c): max(1, round(fraction * int(n))) for c, n in zip(classes, counts)}
    idx = stratified_take(targets, per_class, rng)
    keep = torch.from_numpy(idx)
    return ArraySplit(split.images[keep].clone(), split.targets[keep].clone(), split.num_classes)


# ---------------------------------------------------------------------------
# pixel pipeline


def resize_images(images: torch.Tensor, size: int, chunk: int = 1024) -> torch.Tensor:
    """Bicubic resize to (size, size); identity when already that size."""
    if size < 1:
        raise ValueError(f"image size must be positive, got {size}")
    if images.shape[-2:] == (size, size):
        return images
    parts = []
    for start in range(0, len(images), chunk):
        batch = images[start:start + chunk]
        parts.append(F.interpolate(batch, size=(size, size), mode="bicubic", align_corners=False))
    return torch.cat(parts) if parts else images.new_zeros((0, images.shape[1], size, size))


def replicate_to_rgb(images: torch.Tensor) -> torch.Tensor:
    """Replicate a single channel into three; RGB input passes through."""
    if images.shape[1] == 3:
        return images
    if images.shape[1] != 1:
        raise ValueError(f"expected 1 or 3 channels, got {images.shape[1]}")
    return images.repeat(1, 3, 1, 1)


def channel_stats(images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and (population) std over all pixels of the split."""
    if len(images) == 0:
        raise ValueError("cannot take statistics of an empty split")
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3), unbiased=False).clamp_min(1e-6)
    return mean, std


def normalize_with(images: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    return (images - mean.view(1, -1, 1, 1)) / std.view(1, -1, 1, 1)


# ---------------------------------------------------------------------------
# synthetic generators


def _make_blobs(spec: DatasetSpec, image_size: int, seed: int) -> dict[str, ArraySplit]:
    """Class-colored noise images.

    Each class has its own per-channel mean vector; pixels are that constant
    plus iid gaussian noise.  After global average pooling the classes sit in
    tight, linearly separable clusters, which makes this the canonical sanity
    dataset for the training loop.
    """
    rng = np.random.default_rng(seed)
    c = spec.num_classes
    angles = 2 * np.pi * np.arange(c) / c
    means = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles), np.cos(2 * angles)], axis=1)
    out = {}
    for split_name, n in (("train", spec.train_size), ("val", spec.val_size),
                          ("test", spec.test_size)):
        targets = np.arange(n) % c
        rng.shuffle(targets)
        base = means[targets][:, :, None, None]
        noise = rng.normal(0.0, 0.15, size=(n, 3, image_size, image_size))
        images = np.clip(base + noise, 0.0, 1.0).astype(np.float32)
        out[split_name] = ArraySplit(torch.from_numpy(images),
                                     torch.from_numpy(targets.astype(np.int64)), c)
    return out


def _make_patterns(spec: DatasetSpec, image_size: int, seed: int) -> dict[str, ArraySplit]:
    """Oriented sinusoidal gratings, one (frequency, orientation) pair per class.

    Phase, amplitude, frequency and orientation all jitter per sample, and
    the jitter ranges overlap between neighboring classes, so the task has an
    irreducible error floor: validation loss bottoms out instead of falling
    forever.  A small conv net learns the structure quickly while a linear
    probe on raw pixels does poorly.  Serves as the offline stand-in for
    natural-image benchmarks.
    """
    rng = np.random.default_rng(seed)
    c = spec.num_classes
    freqs = 2.0 + 1.5 * (np.arange(c) % 4)
    thetas = np.pi * (np.arange(c) / c)
    yy, xx = np.meshgrid(np.linspace(0, 1, image_size), np.linspace(0, 1, image_size),
                         indexing="ij")
    out = {}
    for split_name, n in (("train", spec.train_size), ("val", spec.val_size),
                          ("test", spec.test_size)):
        targets = np.arange(n) % c
        rng.shuffle(targets)
        images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
        phase = rng.uniform(0, 2 * np.pi, size=n)
        amp = rng.uniform(0.25, 0.45, size=n)
        freq_jit = rng.uniform(-1.0, 1.0, size=n)
        theta_jit = rng.uniform(-np.pi / 14, np.pi / 14, size=n)
        for i, t in enumerate(targets):
            k = 2 * np.pi * (freqs[t] + freq_jit[i])
            theta = thetas[t] + theta_jit[i]
            grid = k * (xx * np.cos(theta) + yy * np.sin(theta)) + phase[i]
            for ch, shift in enumerate((0.0, 0.7, 1.4)):
                images[i, ch] = 0.5 + amp[i] * np.sin(grid + shift)
        images += rng.normal(0.0, 0.28, size=images.shape).astype(np.float32)
        images = np.clip(images, 0.0, 1.0).astype(np.float32)
        out[split_name] = ArraySplit(torch.from_numpy(images),
                                     torch.from_numpy(targets.astype(np.int64)), c)
    return out


_SYNTHETIC_MAKERS = {"blobs": _make_blobs, "patterns": _make_patterns}


# ---------------------------------------------------------------------------
# torchvision-backed sources


def _load_torchvision(spec: DatasetSpec, data_root: Path, seed: int,
                      download: bool) -> dict[str, ArraySplit]:
    import torchvision

    root = str(data_root)
    makers = {
        "cifar10": lambda train: torchvision.datasets.CIFAR10(root, train=train, download=download),
        "cifar100": lambda train: torchvision.datasets.CIFAR100(root, train=train, download=download),
        "fmnist": lambda train: torchvision.datasets.FashionMNIST(root, train=train, download=download),
    }
    if spec.name not in makers:
        raise KeyError(f"no torchvision loader wired for {spec.name!r}")
    try:
        train_ds = makers[spec.name](True)
        test_ds = makers[spec.name](False)
    except RuntimeError as exc:
        raise FileNotFoundError(f"dataset {spec.name!r} not found under {root}: {exc}") from exc

    def to_tensors(ds) -> tuple[torch.Tensor, np.ndarray]:
        data = ds.data
        if isinstance(data, torch.Tensor):
            arr = data.numpy()
        else:
            arr = np.asarray(data)
        if arr.ndim == 3:  # (N, H, W) grayscale
            arr = arr[:, None, :, :]
        else:  # (N, H, W, C)
            arr = arr.transpose(0, 3, 1, 2)
        images = torch.from_numpy(np.ascontiguousarray(arr)).float().div_(255.0)
        targets = np.asarray(ds.targets, dtype=np.int64)
        return images, targets

    train_images, train_targets = to_tensors(train_ds)
    test_images, test_targets = to_tensors(test_ds)
    rng = np.random.default_rng(seed)
    kept, carved = stratified_carve(train_targets, spec.val_size, rng)
    c = spec.num_classes
    return {
        "train": ArraySplit(train_images[kept], torch.from_numpy(train_targets[kept]), c),
        "val": ArraySplit(train_images[carved], torch.from_numpy(train_targets[carved]), c),
        "test": ArraySplit(test_images, torch.from_numpy(test_targets), c),
    }


# ---------------------------------------------------------------------------
# class-per-directory source


def _load_image_dir(split_dir: Path, class_names: list[str]) -> tuple[torch.Tensor, np.ndarray]:
    from PIL import Image

    images, targets = [], []
    for label, cls in enumerate(class_names):
        cls_dir = split_dir / cls
        if not cls_dir.is_dir():
            continue
        for path in sorted(cls_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
            except Exception as exc:
                raise ValueError(f"unreadable image file {path}: {exc}") from exc
            images.append(arr)
            targets.append(label)
    if not images:
        raise FileNotFoundError(f"no images found under {split_dir}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        # mixed sizes: decode one by one at native size, resize later per-image
        tensors = [
            F.interpolate(
                torch.from_numpy(im.transpose(2, 0, 1)).float().div_(255.0)[None],
                size=max(s[0] for s in shapes),
                mode="bicubic",
                align_corners=False,
            )[0]
            for im in images
        ]
        stacked = torch.stack(tensors)
    else:
        stacked = torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2)).float().div_(255.0)
    return stacked, np.asarray(targets, dtype=np.int64)


def _load_local_directory(spec: DatasetSpec, data_root: Path, seed: int) -> dict[str, ArraySplit]:
    base = data_root / spec.name
    train_dir = base / "train"
    if not train_dir.is_dir():
        raise FileNotFoundError(
            f"dataset {spec.name!r} expects class directories under {train_dir}"
        )
    class_names = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    if len(class_names) != spec.num_classes:
        raise ValueError(
            f"{spec.name!r} declares {spec.num_classes} classes, found {len(class_names)} "
            f"directories under {train_dir}"
        )
    train_images, train_targets = _load_image_dir(train_dir, class_names)
    test_images, test_targets = _load_image_dir(base / "test", class_names)
    c = spec.num_classes
    val_dir = base / "val"
    if val_dir.is_dir():
        val_images, val_targets = _load_image_dir(val_dir, class_names)
        train_split = ArraySplit(train_images, torch.from_numpy(train_targets), c)
        val_split = ArraySplit(val_images, torch.from_numpy(val_targets), c)
    else:
        rng = np.random.default_rng(seed)
        kept, carved = stratified_carve(train_targets, spec.val_size, rng)
        train_split = ArraySplit(train_images[kept], torch.from_numpy(train_targets[kept]), c)
        val_split = ArraySplit(train_images[carved], torch.from_numpy(train_targets[carved]), c)
    test_split = ArraySplit(test_images, torch.from_numpy(test_targets), c)
    return {"train": train_split, "val": val_split, "test": test_split}


# ---------------------------------------------------------------------------
# the one entry point


def load_dataset(
    dataset: str | DatasetSpec,
    image_size: int,
    seed: int = 0,
    subsample: float | None = None,
    data_root: str | Path | None = None,
    download: bool = True,
) -> tuple[ArraySplit, ArraySplit, ArraySplit]:
    """Load (train, val, test) splits ready for training.

    The returned tensors are resized to ``image_size`` and normalized with
    per-channel statistics of the training split (computed after the optional
    stratified subsample, so the statistics describe the data actually
    trained on).
    """
    spec = dataset if isinstance(dataset, DatasetSpec) else dataset_spec(dataset)
    if image_size < 1:
        raise ValueError(f"image size must be positive, got {image_size}")
    root = Path(data_root) if data_root is not None else default_data_root()

    if spec.source == "synthetic":
        maker = _SYNTHETIC_MAKERS.get(spec.synthetic_kind or "")
        if maker is None:
            raise KeyError(f"unknown synthetic kind {spec.synthetic_kind!r}")
        splits = maker(spec, image_size, seed)
    elif spec.source == "torchvision":
        splits = _load_torchvision(spec, root, seed, download)
    elif spec.source == "local-directory":
        splits = _load_local_directory(spec, root, seed)
    else:
        raise ValueError(f"unknown dataset source {spec.source!r}")

    if subsample is not None:
        splits = {
            name: stratified_subsample(split, subsample, seed + i)
            for i, (name, split) in enumerate(splits.items())
        }

    for name in splits:
        images = replicate_to_rgb(splits[name].images)
        images = resize_images(images, image_size)
        splits[name] = replace(splits[name], images=images)

    mean, std = channel_stats(splits["train"].images)
    for name in splits:
        splits[name] = replace(splits[name],
                               images=normalize_with(splits[name].images, mean, std))
    return splits["train"], splits["val"], splits["test"]
