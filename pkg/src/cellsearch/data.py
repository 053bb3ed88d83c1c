"""Dataset ingestion, deterministic synthetic imagery, preprocessing, splits,
and batch streaming.

Images are float arrays of shape (3, h, w) with raw values in [0, 1].  All
randomness flows through explicit integer seeds so the complete pipeline
(load, split, batch order, augmentation) replays exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from PIL import Image


class DatasetError(ValueError):
    """Problem with a dataset directory, file, or split request."""


SyntheticSource = tuple[str, int, int]  # ("synthetic", class index, item index)
Source = Union[str, SyntheticSource]

PATTERN_NAMES = (
    "filled_square",
    "circle",
    "diag_stripes",
    "h_stripes",
    "checkerboard",
    "cross",
    "ring",
    "gradient",
)

SYNTHETIC_NOISE_STD = 0.05


@dataclass
class Dataset:
    """Ordered image collection with integer class labels."""

    items: list[tuple[Source, int]]
    class_names: list[str]
    image_size: int
    _images: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.items)

    def image(self, index: int) -> np.ndarray:
        return self._images[index]

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = list(indices)
        return Dataset(
            items=[self.items[i] for i in indices],
            class_names=list(self.class_names),
            image_size=self.image_size,
            _images=[self._images[i] for i in indices],
        )


@dataclass
class SplitSpec:
    """How to partition a dataset, stratified per class.

    ``search_half`` makes two equal halves; ``train_ratio`` keeps
    ``floor(ratio * n)`` training items per class.
    """

    kind: str = "search_half"
    ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("search_half", "train_ratio"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind == "train_ratio" and self.ratio not in (0.5, 0.8):
            raise ValueError(f"train_ratio supports ratios 0.5 and 0.8, got {self.ratio}")


# -- loading ----------------------------------------------------------------


def decode_png(path, image_size: Optional[int] = None) -> np.ndarray:
    """Decode an 8-bit RGB PNG into a (3, h, w) float32 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise DatasetError(f"{path}: only PNG files are supported, "
                                   f"got {img.format or 'unknown format'}")
            img.load()
            rgb = img.convert("RGB")
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"cannot decode image file {path}: {exc}") from None
    arr = np.asarray(rgb, dtype=np.float32) / 255.0  # (h, w, 3)
    arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    if image_size is not None and arr.shape[1:] != (image_size, image_size):
        arr = resize_bilinear(arr, image_size)
    return arr


def load_image_dir(root, image_size: int = 32) -> Dataset:
    """Read a directory-per-class tree of PNG files.

    Class index is the lexicographic rank of the subdirectory name; item
    order is lexicographic by path.
    """
    from pathlib import Path

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} contains no class directories")
    items: list[tuple[Source, int]] = []
    images: list[np.ndarray] = []
    class_names = []
    for label, cdir in enumerate(class_dirs):
        class_names.append(cdir.name)
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise DatasetError(f"class directory {cdir} is empty")
        for f in files:
            images.append(decode_png(f, image_size))
            items.append((str(f), label))
    return Dataset(items=items, class_names=class_names, image_size=image_size,
                   _images=images)


# -- synthetic imagery --------------------------------------------------------


def _render_pattern(pattern: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One grayscale pattern in [0, 1] with jittered position and scale."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    scale = rng.uniform(0.8, 1.2)
    canvas = np.zeros((size, size))
    if pattern == "filled_square":
        half = 0.25 * size * scale
        canvas[(np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)] = 1.0
    elif pattern == "circle":
        r = 0.3 * size * scale
        canvas[(ys - cy) ** 2 + (xs - cx) ** 2 <= r * r] = 1.0
    elif pattern == "diag_stripes":
        period = max(2, int(round(3 * scale)))
        phase = rng.integers(0, period)
        canvas[((ys + xs + phase) // period) % 2 == 0] = 1.0
    elif pattern == "h_stripes":
        period = max(2, int(round(3 * scale)))
        phase = rng.integers(0, period)
        canvas[((ys + phase) // period) % 2 == 0] = 1.0
    elif pattern == "checkerboard":
        period = max(2, int(round(4 * scale)))
        phase_y = rng.integers(0, period)
        phase_x = rng.integers(0, period)
        canvas[(((ys + phase_y) // period) + ((xs + phase_x) // period)) % 2 == 0] = 1.0
    elif pattern == "cross":
        half = max(1.0, 0.08 * size * scale)
        canvas[(np.abs(ys - cy) <= half) | (np.abs(xs - cx) <= half)] = 1.0
    elif pattern == "ring":
        # thin annulus: markedly fewer lit pixels than the filled shapes
        r_out = 0.27 * size * scale
        r_in = 0.75 * r_out
        d2 = (ys - cy) ** 2 + (xs - cx) ** 2
        canvas[(d2 <= r_out * r_out) & (d2 >= r_in * r_in)] = 1.0
    elif pattern == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (xs * np.cos(angle) + ys * np.sin(angle))
        ramp -= ramp.min()
        canvas = ramp / max(ramp.max(), 1e-9)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return canvas


def render_synthetic(class_index: int, item_index: int, size: int, seed: int) -> np.ndarray:
    """Deterministic (3, size, size) image for one synthetic item."""
    rng = np.random.default_rng([seed, class_index, item_index])
    pattern = _render_pattern(PATTERN_NAMES[class_index], size, rng)
    background = rng.uniform(0.0, 0.15)
    foreground = rng.uniform(0.7, 1.0)
    base = background + (foreground - background) * pattern
    gains = rng.uniform(0.6, 1.0, size=3)
    img = base[None, :, :] * gains[:, None, None]
    img = img + rng.normal(0.0, SYNTHETIC_NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_shapes(num_classes: int, per_class: int, size: int, seed: int) -> Dataset:
    """Procedural stand-in dataset: one distinct pattern per class."""
    if not 1 <= num_classes <= len(PATTERN_NAMES):
        raise ValueError(f"num_classes must lie in [1, {len(PATTERN_NAMES)}]")
    if size < 8:
        raise ValueError("size must be at least 8")
    items: list[tuple[Source, int]] = []
    images = []
    for c in range(num_classes):
        for i in range(per_class):
            items.append((("synthetic", c, i), c))
            images.append(render_synthetic(c, i, size, seed))
    return Dataset(items=items, class_names=list(PATTERN_NAMES[:num_classes]),
                   image_size=size, _images=images)


# -- preprocessing -------------------------------------------------------------


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of a (c, h, w) image using half-pixel sample centers."""
    if target < 1:
        raise ValueError("target size must be positive")
    c, h, w = image.shape
    if (h, w) == (target, target):
        return image
    out_dtype = image.dtype

    def axis_coords(n_in: int, n_out: int):
        coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    ylo, yhi, yfrac = axis_coords(h, target)
    xlo, xhi, xfrac = axis_coords(w, target)
    img = image.astype(np.float64)
    top = img[:, ylo][:, :, xlo] * (1 - xfrac) + img[:, ylo][:, :, xhi] * xfrac
    bottom = img[:, yhi][:, :, xlo] * (1 - xfrac) + img[:, yhi][:, :, xhi] * xfrac
    out = top * (1 - yfrac[None, :, None]) + bottom * yfrac[None, :, None]
    return np.ascontiguousarray(out.astype(out_dtype))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


def random_hflip(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return hflip(image)
    return image


def normalize(image: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    mean = np.asarray(mean, dtype=image.dtype).reshape(3, 1, 1)
    std = np.asarray(std, dtype=image.dtype).reshape(3, 1, 1)
    return (image - mean) / std


def channel_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over a whole dataset."""
    if len(dataset) == 0:
        raise DatasetError("cannot compute channel statistics of an empty dataset")
    stacked = np.stack([dataset.image(i) for i in range(len(dataset))]).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-8)


def write_stats(path, mean: np.ndarray, std: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"mean": [float(v) for v in mean],
                             "std": [float(v) for v in std]}, indent=2) + "\n")


def read_stats(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        payload = json.load(fh)
    mean = np.asarray(payload["mean"], dtype=np.float64)
    std = np.asarray(payload["std"], dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,):
        raise DatasetError(f"stats file {path} must hold mean/std arrays of length 3")
    return mean, std


# -- splits and batches ---------------------------------------------------------


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Stratified exact partition into (training part, held-out part)."""
    labels = dataset.labels()
    first: list[int] = []
    second: list[int] = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise DatasetError(
                f"class {dataset.class_names[c]!r} has {len(idx)} items; need at least 2 to split"
            )
        rng = np.random.default_rng([spec.seed, c])
        perm = rng.permutation(len(idx))
        if spec.kind == "search_half":
            n_first = math.ceil(len(idx) / 2)
        else:
            n_first = int(spec.ratio * len(idx))
        chosen = idx[perm[:n_first]]
        rest = idx[perm[n_first:]]
        first.extend(int(i) for i in chosen)
        second.extend(int(i) for i in rest)
    return dataset.subset(sorted(first)), dataset.subset(sorted(second))


def batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int], epoch: int,
            augment: bool = False, augment_seed: int = 0,
            stats: Optional[tuple[np.ndarray, np.ndarray]] = None,
            dtype=np.float32) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stream (images, labels) batches.

    Order is a pure function of (shuffle_seed, epoch); ``None`` keeps dataset
    order.  The final partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    flip_rng = np.random.default_rng([augment_seed, epoch]) if augment else None
    labels = dataset.labels()
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        imgs = []
        for i in chunk:
            img = dataset.image(int(i))
            if flip_rng is not None:
                img = random_hflip(img, flip_rng)
            if stats is not None:
                img = normalize(img, stats[0], stats[1])
            imgs.append(img)
        yield np.stack(imgs).astype(dtype), labels[chunk]
