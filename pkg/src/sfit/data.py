"""Digit datasets: IDX ingestion, synthetic domain pairs and seeded batching.

Images are stored as float32 arrays of shape (N, C, H, W) scaled to [-1, 1]
(byte / 255 mapped through mean 0.5, scale 0.5).
"""
from __future__ import annotations

import gzip
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import (
    BadMagic,
    BatchTooLarge,
    CountMismatch,
    EmptySplit,
    IncompatibleChannels,
    SfitError,
    TruncatedFile,
)

IMAGES_MAGIC = 0x00000803
IMAGES4D_MAGIC = 0x00000804  # (N, C, H, W) payload, used for colour sets
LABELS_MAGIC = 0x00000801

BUNDLED_IMAGES = "mnist10k-images-idx3-ubyte.gz"
BUNDLED_LABELS = "mnist10k-labels-idx1-ubyte.gz"


@dataclass(frozen=True)
class ImageSet:
    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        if images.ndim != 4:
            raise SfitError(f"images must be rank 4 (N, C, H, W), got shape {images.shape}")
        if images.shape[1] not in (1, 3):
            raise IncompatibleChannels(f"channel count must be 1 or 3, got {images.shape[1]}")
        if images.shape[2] < 16 or images.shape[3] < 16:
            raise SfitError(f"images must be at least 16x16, got {images.shape[2:]}")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if labels.shape != (len(images),):
                raise CountMismatch(f"{len(images)} images but {labels.shape[0]} labels")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, idx) -> "ImageSet":
        labels = None if self.labels is None else self.labels[idx]
        return ImageSet(self.images[idx], labels)

    def unlabeled(self) -> "ImageSet":
        """Label-stripped view handed to adaptation and translation stages."""
        return ImageSet(self.images, None)


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 255.0 - 0.5) / 0.5


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- IDX files

def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, allowed: tuple[int, ...], path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in allowed:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected " + " or ".join(f"0x{m:08x}" for m in allowed))
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise TruncatedFile(f"{path}: header declares {ndim} dims but file ends early")
    dims = tuple(int(d) for d in np.frombuffer(raw[4:end], dtype=">u4"))
    count = int(np.prod(dims))
    if len(raw) < end + count:
        raise TruncatedFile(f"{path}: expected {count} payload bytes, found {len(raw) - end}")
    return np.frombuffer(raw[end:end + count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None) -> ImageSet:
    """Read an IDX image file (and optional label file) into an :class:`ImageSet`.

    Plain and ``.gz`` files are both accepted.
    """
    pixels = _parse_idx(_read_bytes(images_path), (IMAGES_MAGIC, IMAGES4D_MAGIC), images_path)
    if pixels.ndim == 3:
        pixels = pixels[:, None]
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), (LABELS_MAGIC,), labels_path)
        if len(labels) != len(pixels):
            raise CountMismatch(f"{images_path} has {len(pixels)} images, {labels_path} has {len(labels)} labels")
    return ImageSet(to_unit(pixels), labels)


def encode_idx_images(images: np.ndarray) -> bytes:
    pixels = to_bytes(images)
    if pixels.shape[1] == 1:
        pixels = pixels[:, 0]
        magic = IMAGES_MAGIC
    else:
        magic = IMAGES4D_MAGIC
    header = np.array([magic, *pixels.shape], dtype=">u4").tobytes()
    return header + pixels.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    header = np.array([LABELS_MAGIC, len(labels)], dtype=">u4").tobytes()
    return header + np.asarray(labels, dtype=np.uint8).tobytes()


def save_idx(data: ImageSet, images_path, labels_path=None) -> None:
    Path(images_path).write_bytes(encode_idx_images(data.images))
    if labels_path is not None:
        if data.labels is None:
            raise SfitError("cannot write labels for an unlabeled set")
        Path(labels_path).write_bytes(encode_idx_labels(data.labels))


def load_bundled_mnist() -> ImageSet:
    """The 10,000-digit MNIST subset shipped with the package."""
    root = resources.files("sfit") / "_data"
    with resources.as_file(root / BUNDLED_IMAGES) as img, resources.as_file(root / BUNDLED_LABELS) as lbl:
        return load_idx(img, lbl)


def resize(data: ImageSet, size: int = 28) -> ImageSet:
    """Bilinear resize, e.g. USPS 16x16 -> 28x28."""
    import torch
    import torch.nn.functional as F

    x = torch.from_numpy(np.array(data.images))
    y = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return ImageSet(y.clamp(-1, 1).numpy(), data.labels)


# ---------------------------------------------------------- domain transforms

TRANSFORM_KINDS = ("identity", "invert", "channel-permute", "colorize", "saturation-scale", "background-shift")


@dataclass(frozen=True)
class DomainTransform:
    """A deterministic per-image mapping used to synthesize a domain gap.

    ``params`` per kind: channel-permute ``order`` (e.g. "2,0,1"); colorize
    ``seed``; saturation-scale ``factor``; background-shift ``shift``.
    """

    kind: str = "identity"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise SfitError(f"unknown transform kind {self.kind!r}; choose from {', '.join(TRANSFORM_KINDS)}")

    def __str__(self) -> str:
        args = " ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind} {args}".strip()

    @classmethod
    def parse(cls, text: str) -> "DomainTransform":
        """Inverse of ``str()``: ``"colorize seed=7"`` -> DomainTransform."""
        kind, *args = text.split()
        params = {}
        for arg in args:
            key, _, value = arg.partition("=")
            params[key] = value if key == "order" else _number(value)
        return cls(kind, params)


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _image_seed(seed: int, image: np.ndarray) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(image.tobytes())])


def apply_transform(data: ImageSet, t: DomainTransform) -> ImageSet:
    x = data.images
    c = data.channels
    kind, p = t.kind, t.params
    if kind == "identity":
        out = x
    elif kind == "invert":
        out = -x
    elif kind == "channel-permute":
        if c != 3:
            raise IncompatibleChannels("channel-permute needs 3-channel images")
        order = p.get("order", "2,0,1")
        order = [int(i) for i in str(order).split(",")] if not isinstance(order, (list, tuple)) else list(order)
        if sorted(order) != [0, 1, 2]:
            raise SfitError(f"channel order must permute 0,1,2, got {order}")
        out = x[:, order]
    elif kind == "colorize":
        if c != 1:
            raise IncompatibleChannels("colorize maps 1-channel images to 3 channels")
        seed = int(p.get("seed", 0))
        out = np.empty((len(x), 3) + x.shape[2:], dtype=np.float32)
        for i, img in enumerate(x):
            rng = _image_seed(seed, img)
            fg, bg = rng.uniform(-1, 1, size=(2, 3, 1, 1)).astype(np.float32)
            ink = (img + 1.0) / 2.0
            out[i] = bg + ink * (fg - bg)
    elif kind == "saturation-scale":
        if c != 3:
            raise IncompatibleChannels("saturation-scale needs 3-channel images")
        factor = np.float32(p.get("factor", 0.5))
        grey = x.mean(axis=1, keepdims=True)
        out = np.clip(grey + factor * (x - grey), -1, 1)
    else:  # background-shift
        shift = np.float32(p.get("shift", 0.5))
        # moves dark pixels by `shift`, leaves full-intensity strokes fixed
        out = np.clip(x + shift * (1.0 - x) / 2.0, -1, 1)
    return ImageSet(np.asarray(out, dtype=np.float32), data.labels)


def split(data: ImageSet, fraction: float, seed: int) -> tuple[ImageSet, ImageSet]:
    """Seeded disjoint split; the first part receives ``round(fraction * N)`` samples."""
    n = len(data)
    k = int(round(fraction * n))
    if n < 2 or k == 0 or k == n:
        raise EmptySplit(f"cannot split {n} samples with fraction {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[:k])), data.subset(np.sort(perm[k:]))


def make_domain_pair(
    base: ImageSet,
    source_t: DomainTransform,
    target_t: DomainTransform,
    split_seed: int,
    fraction: float = 0.5,
) -> tuple[ImageSet, ImageSet]:
    if base.labels is None:
        raise SfitError("make_domain_pair needs a labeled base set")
    src, tgt = split(base, fraction, split_seed)
    return apply_transform(src, source_t), apply_transform(tgt, target_t)


def write_manifest(path, **entries) -> None:
    lines = [f"{key} = {value}" for key, value in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


# ------------------------------------------------------------------ batching

@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 16
    seed: int = 0
    shuffle: bool = True
    drop_last: bool = False


class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray | None


def batch_indices(n: int, plan: BatchPlan) -> list[np.ndarray]:
    if plan.batch_size <= 0:
        raise SfitError("batch_size must be positive")
    if plan.batch_size > n:
        raise BatchTooLarge(f"batch_size {plan.batch_size} exceeds {n} samples")
    order = np.random.default_rng(plan.seed).permutation(n) if plan.shuffle else np.arange(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [order[i:i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


def batches(data: ImageSet, plan: BatchPlan) -> Iterator[Batch]:
    for idx in batch_indices(len(data), plan):
        labels = None if data.labels is None else data.labels[idx]
        yield Batch(idx, data.images[idx], labels)


def epoch_plan(batch_size: int, seed: int, epoch: int, shuffle: bool = True, drop_last: bool = False) -> BatchPlan:
    """Per-epoch plan whose seed is derived from the run seed and epoch index."""
    state = np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1, dtype=np.uint64)[0]
    return BatchPlan(batch_size, int(state), shuffle, drop_last)
