"""CIFAR binary loading, synthetic datasets and deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, DataFormatError

CIFAR_SHAPE = (3, 32, 32)
CIFAR_FILES = {
    "cifar10": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}
LABEL_BYTES = {"cifar10": 1, "cifar100": 2}


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32, normalized per channel
    labels: np.ndarray  # [N] int64
    ids: np.ndarray  # [N] stable sample identifiers
    mean: np.ndarray  # per-channel constants used for normalization
    std: np.ndarray
    num_classes: int
    noise: np.ndarray | None = field(default=None, repr=False)  # synthetic only: per-sample noise level

    def __post_init__(self):
        if len(self.labels) != len(self.images) or len(self.ids) != len(self.images):
            raise ContractError("images, labels and ids must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        noise = None if self.noise is None else self.noise[index]
        return Dataset(self.images[index], self.labels[index], self.ids[index], self.mean, self.std,
                       self.num_classes, noise)

    def raw_pixels(self) -> np.ndarray:
        """Undo normalization: values in [0, 1]."""
        m = self.mean.reshape(1, -1, 1, 1)
        s = self.std.reshape(1, -1, 1, 1)
        return self.images * s + m


def normalize(raw: np.ndarray, mean=None, std=None):
    """Per-channel standardization; returns ``(images, mean, std)``."""
    raw = raw.astype(np.float64)
    if mean is None:
        mean = raw.mean(axis=(0, 2, 3))
    if std is None:
        std = raw.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
    images = (raw - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return images.astype(np.float32), mean, std


def parse_records(buf: bytes, label_bytes: int, image_shape=CIFAR_SHAPE, label_index: int | None = None):
    """Split a CIFAR-layout byte string into ``(labels, uint8 pixels)``."""
    pixels = int(np.prod(image_shape))
    record = label_bytes + pixels
    if len(buf) % record:
        good = len(buf) - len(buf) % record
        raise DataFormatError(
            f"file length {len(buf)} is not a multiple of the {record}-byte record; "
            f"trailing partial record at byte offset {good}",
            offset=good,
        )
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    label_index = label_bytes - 1 if label_index is None else label_index
    labels = arr[:, label_index].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, *image_shape)
    return labels, images


def load_cifar_binary(path, variant: str = "cifar10", split: str = "train", normalization=None) -> Dataset:
    """Load CIFAR-10/100 from the binary distribution.

    ``path`` is either one ``.bin`` file or the extracted directory.  For
    CIFAR-100 the fine label (second byte) is used.  ``normalization`` is an
    optional ``(mean, std)`` pair, e.g. taken from the training split.
    """
    if variant not in LABEL_BYTES:
        raise ContractError(f"variant must be one of {sorted(LABEL_BYTES)}")
    path = Path(path)
    if path.is_dir():
        files = [path / name for name in CIFAR_FILES[variant][split]]
    else:
        files = [path]
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"missing dataset file: {f}")

    labels, pixels = [], []
    for f in files:
        lab, img = parse_records(f.read_bytes(), LABEL_BYTES[variant])
        labels.append(lab)
        pixels.append(img)
    labels = np.concatenate(labels)
    raw = np.concatenate(pixels).astype(np.float32) / 255.0
    mean, std = normalization if normalization is not None else (None, None)
    images, mean, std = normalize(raw, mean, std)
    return Dataset(images, labels, np.arange(len(labels)), mean, std, 10 if variant == "cifar10" else 100)


def export_binary(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the CIFAR-10 record layout (1 label byte, uint8 planes)."""
    pixels = np.clip(np.rint(dataset.raw_pixels() * 255.0), 0, 255).astype(np.uint8)
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pixels.reshape(len(dataset), -1)], axis=1
    )
    Path(path).write_bytes(records.tobytes())


@dataclass
class SyntheticSpec:
    num_classes: int = 5
    image_size: int = 16
    samples_per_class: int = 100
    # scalar, one value per class, or one value per sample (class-major order)
    noise_level: float | Sequence[float] = 0.0
    seed: int = 0
    channels: int = 3


def class_pattern(k: int, num_classes: int, size: int, channels: int = 3) -> np.ndarray:
    """Noise-free prototype of class ``k``: an oriented grating.

    Every class has the same mean intensity and colour, so classes can only be
    told apart by spatial structure (orientation and frequency).
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    angle = np.pi * k / num_classes
    freq = 2.0 + (k % 3)
    wave = 0.5 + 0.35 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    return np.repeat(wave[None], channels, axis=0)


def _per_sample_noise(spec: SyntheticSpec) -> np.ndarray:
    n = spec.num_classes * spec.samples_per_class
    level = np.asarray(spec.noise_level, dtype=np.float64)
    if level.ndim == 0:
        out = np.full(n, float(level))
    elif level.shape == (spec.num_classes,):
        out = np.repeat(level, spec.samples_per_class)
    elif level.shape == (n,):
        out = level.copy()
    else:
        raise ContractError(f"noise_level must be scalar, per class or per sample; got shape {level.shape}")
    if (out < 0).any() or (out > 1).any():
        raise ContractError("noise levels must lie in [0, 1]")
    return out


def gen_synthetic(spec: SyntheticSpec, normalization=None) -> Dataset:
    """Class-conditional gratings plus uniform noise in ``[-level, level]``, clipped to [0, 1].

    Samples are stored class-major; ``ids`` are 0..N-1 in that order and the
    per-sample noise level is kept on the returned dataset.  Pass the
    ``(mean, std)`` of a training set as ``normalization`` for held-out data.
    """
    noise = _per_sample_noise(spec)
    rng = np.random.default_rng(spec.seed)
    K, S, size = spec.num_classes, spec.samples_per_class, spec.image_size
    protos = np.stack([class_pattern(k, K, size, spec.channels) for k in range(K)])
    labels = np.repeat(np.arange(K), S)
    jitter = rng.uniform(-1.0, 1.0, size=(K * S, spec.channels, size, size))
    raw = np.clip(protos[labels] + noise[:, None, None, None] * jitter, 0.0, 1.0)
    mean, std = normalization if normalization is not None else (None, None)
    images, mean, std = normalize(raw, mean, std)
    return Dataset(images, labels.astype(np.int64), np.arange(K * S), mean, std, K, noise)


def half_noisy(num_classes=5, image_size=16, samples_per_class=100, level=0.6, seed=0) -> SyntheticSpec:
    """Spec where every other sample of each class carries noise ``level``."""
    n = num_classes * samples_per_class
    noise = np.where(np.arange(n) % 2 == 1, level, 0.0)
    return SyntheticSpec(num_classes, image_size, samples_per_class, noise, seed)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0
            ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, ids)`` covering ``dataset`` once.

    With a seed the order is a permutation drawn from ``(seed, epoch)``; the
    final partial batch is emitted.
    """
    n = len(dataset)
    if not 1 <= batch_size:
        raise ContractError("batch_size must be >= 1")
    if batch_size > n:
        raise ContractError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx], dataset.ids[idx]


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and pad-and-crop."""
    B, C, H, W = images.shape
    out = images.copy()
    flip = rng.random(B) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy, dx = rng.integers(0, 2 * pad + 1, size=(2, B))
    for i in range(B):
        out[i] = padded[i, :, dy[i] : dy[i] + H, dx[i] : dx[i] + W]
    return out
