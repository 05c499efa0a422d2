"""Desk-scale classification data: seeded synthetic templates and IDX files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX file problems."""


class IdxBadMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    def __init__(self, path, expected: int, actual: int):
        self.byte_offset = actual
        super().__init__(
            f"{path}: truncated at byte {actual}, expected {expected} bytes"
        )


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Batch:
    """One minibatch: images (B, C, S, S) in [0, 1], integer labels (B,)."""

    images: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, S, S) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self) -> Batch:
        return Batch(self.images, self.labels)


@dataclass
class SynthConfig:
    classes: int = 10
    samples_train: int = 8192
    samples_eval: int = 2048
    noise_sigma: float = 0.25
    image_side: int = 16
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.samples_train < 1 or self.samples_eval < 1:
            raise ValueError("counts must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


def synth_templates(cfg: SynthConfig) -> np.ndarray:
    """Per-class template images, a pure function of the seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    return rng.uniform(
        0.0, 1.0, size=(cfg.classes, cfg.channels, cfg.image_side, cfg.image_side)
    )


def _noisy_split(templates: np.ndarray, cfg: SynthConfig, n: int, stream: int) -> Dataset:
    rng = np.random.default_rng([cfg.seed, stream])
    labels = np.arange(n, dtype=np.int64) % cfg.classes
    noise = rng.normal(0.0, cfg.noise_sigma, size=(n,) + templates.shape[1:])
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return Dataset(images=images, labels=labels)


def synth_generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Template-plus-noise datasets; train and eval use disjoint noise streams."""
    templates = synth_templates(cfg)
    train = _noisy_split(templates, cfg, cfg.samples_train, stream=1)
    eval_ = _noisy_split(templates, cfg, cfg.samples_eval, stream=2)
    return train, eval_


def load_idx(images_path, labels_path) -> Dataset:
    """Read a big-endian IDX image/label file pair into a Dataset.

    Pixel bytes are scaled to [0, 1]. Raises IdxBadMagicError,
    IdxTruncatedError, or IdxCountMismatchError on malformed input.
    """
    raw = open(images_path, "rb").read()
    if len(raw) < 16:
        raise IdxTruncatedError(images_path, 16, len(raw))
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxBadMagicError(
            f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise IdxTruncatedError(images_path, expected, len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0

    raw_l = open(labels_path, "rb").read()
    if len(raw_l) < 8:
        raise IdxTruncatedError(labels_path, 8, len(raw_l))
    magic_l, count_l = struct.unpack(">II", raw_l[:8])
    if magic_l != IDX_LABELS_MAGIC:
        raise IdxBadMagicError(
            f"{labels_path}: bad magic 0x{magic_l:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    if len(raw_l) < 8 + count_l:
        raise IdxTruncatedError(labels_path, 8 + count_l, len(raw_l))
    if count_l != count:
        raise IdxCountMismatchError(
            f"{count} images but {count_l} labels ({images_path}, {labels_path})"
        )
    labels = np.frombuffer(raw_l, dtype=np.uint8, count=count_l, offset=8).astype(np.int64)
    return Dataset(images=images, labels=labels)


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write a Dataset's arrays as an IDX pair (inverse of load_idx)."""
    n, _, rows, cols = images.shape
    pixels = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def save_dataset(directory, dataset: Dataset) -> None:
    """Persist a dataset in the checkpoint tensor format for exact reruns."""
    from .checkpoint import save_tensors

    save_tensors(
        directory,
        {"images": dataset.images, "labels": dataset.labels.astype(np.float64)},
        meta={"kind": "dataset", "count": len(dataset)},
    )


def load_dataset(directory) -> Dataset:
    from .checkpoint import load_tensors

    tensors, _ = load_tensors(directory)
    return Dataset(images=tensors["images"], labels=tensors["labels"].astype(np.int64))


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled minibatches; the permutation depends only on
    (seed, epoch). The final partial batch is retained."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        yield Batch(images=dataset.images[idx], labels=dataset.labels[idx])
