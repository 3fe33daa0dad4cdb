"""Dataset ingestion: CIFAR-10 binary records, synthetic images, splits.

The CIFAR-10 binary format is fully specified at the byte level: each
record is 3073 bytes, one label byte (0..9) followed by 3072 bytes of
pixel data as three 32x32 planes (R, G, B) in row-major order. Decoding
scales pixels by 1/255; encoding inverts it exactly, so decode/encode
round-trips are byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .rng import Rng

RECORD_BYTES = 3073
IMAGE_SIDE = 32
NUM_CIFAR_CLASSES = 10

# Channel statistics of the CIFAR-10 training split, used for input
# normalization of real-image runs.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


class FormatError(ValueError):
    """Malformed dataset bytes; the message names the offending offset."""


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    id: int


@dataclass(frozen=True)
class DatasetSpec:
    """Source description plus split and normalization choices."""

    source: dict
    split_fractions: tuple[float, float] = (0.9, 0.1)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions {self.split_fractions} must sum to 1")

    def manifest(self) -> str:
        return json.dumps(self.source, sort_keys=True, separators=(",", ":"))


def synthetic_manifest(seed: int, n: int, classes: int, size: int) -> str:
    """Canonical JSON manifest for a synthetic dataset."""
    return json.dumps(
        {"seed": seed, "n": n, "classes": classes, "size": size},
        sort_keys=True,
        separators=(",", ":"),
    )


# -- CIFAR-10 binary -----------------------------------------------------------


def read_cifar10(path: str, id_offset: int = 0) -> list[LabeledImage]:
    """Decode one CIFAR-10 binary file into images with stable ids."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES}"
        )
    images = []
    for k in range(len(raw) // RECORD_BYTES):
        off = k * RECORD_BYTES
        label = raw[off]
        if label >= NUM_CIFAR_CLASSES:
            raise FormatError(f"{path}: label {label} > 9 at byte offset {off}")
        planes = np.frombuffer(raw, dtype=np.uint8, count=3072, offset=off + 1)
        pixels = planes.reshape(3, IMAGE_SIDE, IMAGE_SIDE).transpose(1, 2, 0)
        images.append(
            LabeledImage(
                pixels=pixels.astype(np.float32) / 255.0,
                label=int(label),
                id=id_offset + k,
            )
        )
    return images


def encode_cifar10(images: list[LabeledImage]) -> bytes:
    """Inverse of read_cifar10 for 32x32 images on the 1/255 grid."""
    out = bytearray()
    for img in images:
        if img.pixels.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
            raise FormatError(f"image id {img.id}: shape {img.pixels.shape} is not 32x32x3")
        out.append(img.label)
        quantized = np.round(img.pixels * 255.0).astype(np.uint8)
        out.extend(quantized.transpose(2, 0, 1).tobytes())
    return bytes(out)


def read_cifar10_any(path: str) -> list[LabeledImage]:
    """Read a single .bin file or every *.bin in a directory (sorted)."""
    if os.path.isdir(path):
        images = []
        for name in sorted(os.listdir(path)):
            if name.endswith(".bin"):
                images.extend(read_cifar10(os.path.join(path, name), id_offset=len(images)))
        if not images:
            raise FormatError(f"{path}: no .bin files found")
        return images
    return read_cifar10(path)


# -- synthetic images ------------------------------------------------------------


def _class_color(k: int, classes: int) -> np.ndarray:
    # Evenly spaced hues at alternating brightness; distinct channel means.
    hue = (k / max(1, classes)) * 6.0
    i = int(hue) % 6
    f = hue - int(hue)
    v, p, q, t = 1.0, 0.15, 1.0 - 0.85 * f, 0.15 + 0.85 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    scale = 0.75 if k % 2 == 0 else 0.45
    return np.array(rgb, dtype=np.float64) * scale


def synthesize(seed: int, n: int, classes: int = 10, size: int = 32) -> list[LabeledImage]:
    """Class-conditional images: base color + positioned blob + seeded noise.

    Classes are separable by channel means by construction, which is what
    the learning-oriented acceptance checks rely on.
    """
    if size % 32 != 0:
        raise ValueError(f"size {size} must be divisible by 32")
    rng = Rng(seed).split("synthetic")
    images = []
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        k = i % classes
        base = _class_color(k, classes)
        r = rng.split(i)
        # Blob center depends on the class; radius on the image size.
        angle = 2.0 * np.pi * k / max(1, classes)
        cy = size / 2 + 0.28 * size * np.sin(angle)
        cx = size / 2 + 0.28 * size * np.cos(angle)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * (size / 6.0) ** 2)))
        img = np.empty((size, size, 3), dtype=np.float64)
        blob_color = _class_color((k + classes // 2) % classes, classes)
        for c in range(3):
            img[:, :, c] = base[c] + (blob_color[c] - base[c]) * blob
        img += r.normal((size, size, 3), std=0.06)
        images.append(
            LabeledImage(
                pixels=np.clip(img, 0.0, 1.0).astype(np.float32), label=k, id=i
            )
        )
    return images


# -- splits, arrays, normalization -------------------------------------------------


def split_shuffle(
    data: list[LabeledImage], fractions: tuple[float, float], seed: int
) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Deterministic disjoint/exhaustive split keyed by stable sample ids."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} must sum to 1")
    by_id = sorted(data, key=lambda im: im.id)
    perm = Rng(seed).split("split").permutation(len(by_id))
    n_train = round(fractions[0] * len(by_id))
    train = [by_id[i] for i in perm[:n_train]]
    evalset = [by_id[i] for i in perm[n_train:]]
    return train, evalset


def as_arrays(images: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    if not images:
        side = IMAGE_SIDE
        return np.zeros((0, side, side, 3), np.float32), np.zeros((0,), np.int64)
    x = np.stack([im.pixels for im in images]).astype(np.float32)
    y = np.array([im.label for im in images], dtype=np.int64)
    return x, y


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=x.dtype)
    std = np.asarray(std, dtype=x.dtype)
    return (x - mean) / std


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=x.dtype)
    std = np.asarray(std, dtype=x.dtype)
    return x * std + mean


def augment_batch(x: np.ndarray, rng: Rng, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and random crop after zero padding."""
    b, h, w, _ = x.shape
    out = x.copy()
    flips = rng.split("flip").uniform((b,)) < 0.5
    out[flips] = out[flips, :, ::-1, :]
    offs = rng.split("crop").integers(0, 2 * pad + 1, (b, 2))
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    crops = np.empty_like(out)
    for i in range(b):
        oy, ox = offs[i]
        crops[i] = padded[i, oy : oy + h, ox : ox + w, :]
    return crops


def nearest_class_mean_accuracy(images: list[LabeledImage]) -> float:
    """Accuracy of a channel-mean nearest-centroid classifier (leave-in).

    A cheap separability oracle for synthetic data: if this is high, any
    reasonable learner can fit the set.
    """
    x = np.stack([im.pixels.mean(axis=(0, 1)) for im in images])
    y = np.array([im.label for im in images])
    classes = sorted(set(y.tolist()))
    centroids = np.stack([x[y == k].mean(axis=0) for k in classes])
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = np.array(classes)[np.argmin(d, axis=1)]
    return float((pred == y).mean())
