"""Image datasets, augmentation hooks and the subnet input-resolution transform."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .errors import ConfigError, FormatError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 3073


@dataclass(frozen=True)
class ResolutionRange:
    l_min: int
    l_max: int

    def __post_init__(self):
        if not 1 <= self.l_min <= self.l_max:
            raise ConfigError("input.resolution", f"need 1 <= l_min <= l_max, got [{self.l_min}, {self.l_max}]")

    @classmethod
    def default_for(cls, size: int) -> "ResolutionRange":
        """``[round(size / 3.5), size]``, the desk-scale analogue of [64, 224]."""
        return cls(max(1, int(math.floor(size / 3.5 + 0.5))), size)


def sample_resolution(rng_range: ResolutionRange, rng: np.random.Generator) -> int:
    return int(rng.integers(rng_range.l_min, rng_range.l_max + 1))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resized_shape(h: int, w: int, l_s: int) -> tuple[int, int]:
    if h <= w:
        return l_s, max(1, _round_half_up(w * l_s / h))
    return max(1, _round_half_up(h * l_s / w)), l_s


def _interp_matrix(n_in: int, n_out: int, dtype: torch.dtype) -> torch.Tensor:
    """Row-stochastic n_out x n_in matrix of half-pixel bilinear weights."""
    scale = n_in / n_out
    src = (torch.arange(n_out, dtype=torch.float64) + 0.5) * scale - 0.5
    src = src.clamp(0, n_in - 1)
    i0 = src.floor().long()
    i1 = (i0 + 1).clamp(max=n_in - 1)
    frac = src - i0
    m = torch.zeros(n_out, n_in, dtype=torch.float64)
    rows = torch.arange(n_out)
    m[rows, i0] += 1 - frac
    m[rows, i1] += frac
    return m.to(dtype)


def resize_shorter_side(batch: torch.Tensor, l_s: int) -> torch.Tensor:
    """Bilinear resize of a B x C x H x W batch so that min(H, W) == ``l_s``.

    Half-pixel centers (``src = (dst + 0.5) * scale - 0.5``) with edge
    clamping; the longer side follows the aspect ratio, rounded half up.
    Returns the input object itself when no resize is needed.
    """
    if l_s < 1:
        raise ConfigError("l_s", f"target shorter side must be >= 1, got {l_s}")
    h, w = batch.shape[-2:]
    oh, ow = resized_shape(h, w, l_s)
    if (oh, ow) == (h, w):
        return batch
    dtype = batch.dtype if batch.is_floating_point() else torch.float32
    my = _interp_matrix(h, oh, dtype)
    mx = _interp_matrix(w, ow, dtype)
    return my @ batch.to(dtype) @ mx.T


def center_crop(batch: torch.Tensor, size: int) -> torch.Tensor:
    h, w = batch.shape[-2:]
    top, left = (h - size) // 2, (w - size) // 2
    return batch[..., top : top + size, left : left + size]


def normalize(batch: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=batch.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=batch.dtype).view(1, -1, 1, 1)
    return (batch - m) / s


# augmentation ---------------------------------------------------------------

Augment = Callable[[torch.Tensor, np.random.Generator], torch.Tensor]


def random_crop(pad: int = 4) -> Augment:
    def apply(batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        b, _, h, w = batch.shape
        padded = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
        oy = rng.integers(0, 2 * pad + 1, size=b)
        ox = rng.integers(0, 2 * pad + 1, size=b)
        return torch.stack([padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w] for i in range(b)])

    return apply


def horizontal_flip(p: float = 0.5) -> Augment:
    def apply(batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        flip = torch.from_numpy(rng.random(batch.shape[0]) < p)
        return torch.where(flip.view(-1, 1, 1, 1), batch.flip(-1), batch)

    return apply


AUGMENTATIONS: dict[str, Callable[[], Augment]] = {
    "crop": random_crop,
    "flip": horizontal_flip,
}


def register_augmentation(name: str, factory: Callable[[], Augment]) -> None:
    """Extension point for extra per-batch transforms (e.g. color jitter)."""
    AUGMENTATIONS[name] = factory


def build_augment(names: Sequence[str]) -> Augment:
    try:
        steps = [AUGMENTATIONS[n]() for n in names]
    except KeyError as exc:
        raise ConfigError("data.augment", f"unknown augmentation {exc.args[0]!r}; known: {sorted(AUGMENTATIONS)}")

    def apply(batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        for step in steps:
            batch = step(batch, rng)
        return batch

    return apply


# datasets ---------------------------------------------------------------------


@dataclass
class ImageDataset:
    """Images in [0, 1] (N x C x H x W float32) with integer labels."""

    images: torch.Tensor
    labels: torch.Tensor
    mean: tuple[float, ...]
    std: tuple[float, ...]
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ImageDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ImageDataset(self.images[idx], self.labels[idx], self.mean, self.std, self.num_classes)

    def batches(
        self, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        n = len(self)
        order = np.arange(n) if rng is None else rng.permutation(n)
        stop = n - n % batch_size if drop_last else n
        for start in range(0, stop, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            yield self.images[idx], self.labels[idx]


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}-byte records", whole
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} > 9", int(bad[0]) * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(
    path: str | Path,
    split: str = "train",
    mean: Sequence[float] = CIFAR10_MEAN,
    std: Sequence[float] = CIFAR10_STD,
) -> ImageDataset:
    """Read CIFAR-10 binary batches.

    ``path`` is either a single ``.bin`` file or the ``cifar-10-batches-bin``
    directory, in which case ``split`` picks ``data_batch_{1..5}.bin`` or
    ``test_batch.bin``.
    """
    path = Path(path)
    if path.is_dir():
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"CIFAR-10 files not found: {missing}")
    else:
        files = [path]
    parts = [_read_cifar_file(f) for f in files]
    pixels = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    images = torch.from_numpy(pixels.astype(np.float32) / 255.0)
    return ImageDataset(images, torch.from_numpy(labels.astype(np.int64)), tuple(mean), tuple(std), 10)


def synth_dataset(
    seed: int = 0,
    num_classes: int = 10,
    samples_per_class: int = 100,
    size: int = 16,
    channels: int = 3,
    noise: float = 0.15,
) -> ImageDataset:
    """Procedural class-conditional textures.

    Each class owns an oriented sinusoidal grating with a class-specific
    frequency and color mix. Every sample draws its own phase, a few seeded
    Gaussian blobs, and pixel noise on top.
    """
    if size < 8:
        raise ConfigError("data.synth.size", f"size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    angles = rng.permutation(num_classes) * np.pi / num_classes
    freqs = 2 * np.pi * rng.uniform(1.5, 4.0, num_classes) / size
    colors = rng.uniform(0.2, 1.0, (num_classes, channels))
    images = np.empty((num_classes * samples_per_class, channels, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    for i, c in enumerate(labels):
        phase = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(angles[c]) + yy * np.sin(angles[c])
        grating = 0.5 + 0.5 * np.sin(freqs[c] * proj + phase)
        blobs = np.zeros((size, size))
        for _ in range(3):
            cy, cx = rng.uniform(0, size, 2)
            sigma = rng.uniform(1.0, size / 4)
            blobs += rng.uniform(-0.5, 0.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img = colors[c][:, None, None] * grating[None] + blobs[None]
        img += noise * rng.standard_normal((channels, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(len(labels))
    mean = tuple(float(m) for m in images.mean(axis=(0, 2, 3)))
    std = tuple(float(s) for s in images.std(axis=(0, 2, 3)))
    return ImageDataset(
        torch.from_numpy(images[order]),
        torch.from_numpy(labels[order].astype(np.int64)),
        mean,
        std,
        num_classes,
    )


def split_per_class(ds: ImageDataset, test_per_class: int) -> tuple[ImageDataset, ImageDataset]:
    """Hold out the first ``test_per_class`` samples of every class."""
    labels = ds.labels.numpy()
    test_idx = np.concatenate([np.nonzero(labels == c)[0][:test_per_class] for c in range(ds.num_classes)])
    mask = np.ones(len(labels), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.nonzero(mask)[0]), ds.subset(np.sort(test_idx))
