"""LeNet-style digit classifier, residual translation generator and checkpoints.

The classifier is split into a feature extractor ``f`` (two conv blocks plus
a 500-unit fully connected layer) and a classifier head ``p`` (one linear
layer). Source and target models share ``p``; only ``f`` is ever adapted.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadMagic, MissingTensor, ShapeMismatch, TruncatedFile, UnknownTensor, VersionUnsupported

CKPT_MAGIC = b"SFITCKPT"
CKPT_VERSION = 1


class ClassifierOutput(NamedTuple):
    feature_map: torch.Tensor  # (B, 50, H/4, W/4), last conv block
    pooled: torch.Tensor  # (B, 500)
    logits: torch.Tensor
    probs: torch.Tensor


class FeatureExtractor(nn.Module):
    def __init__(self, in_channels: int = 1, image_size: int = 28, feature_dim: int = 500):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 20, 5, padding=2)
        self.bn1 = nn.BatchNorm2d(20)
        self.conv2 = nn.Conv2d(20, 50, 5, padding=2)
        self.bn2 = nn.BatchNorm2d(50)
        side = image_size // 4
        self.fc = nn.Linear(50 * side * side, feature_dim)

    def forward(self, x):
        h = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)
        fmap = F.max_pool2d(F.relu(self.bn2(self.conv2(h))), 2)
        pooled = F.relu(self.fc(fmap.flatten(1)))
        return fmap, pooled


class Classifier(nn.Module):
    def __init__(self, in_channels: int = 1, num_classes: int = 10, image_size: int = 28):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.image_size = image_size
        self.features = FeatureExtractor(in_channels, image_size)
        self.head = nn.Linear(500, num_classes)

    def forward(self, x) -> ClassifierOutput:
        _check_input(x, self.in_channels, self.image_size)
        fmap, pooled = self.features(x)
        logits = self.head(pooled)
        return ClassifierOutput(fmap, pooled, logits, F.softmax(logits, dim=1))


class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


def _down(cin, cout):
    return [nn.ReflectionPad2d(1), nn.Conv2d(cin, cout, 3, stride=2), nn.InstanceNorm2d(cout), nn.ReLU(inplace=True)]


def _up(cin, cout):
    return [
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.ReflectionPad2d(1),
        nn.Conv2d(cin, cout, 3),
        nn.InstanceNorm2d(cout),
        nn.ReLU(inplace=True),
    ]


class Generator(nn.Module):
    """Encoder / 3 residual blocks / decoder with a tanh output.

    Spatial size must be divisible by 4; output shape equals input shape.
    """

    def __init__(self, channels: int = 1, n_blocks: int = 3, width: int = 32):
        super().__init__()
        self.channels = channels
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(channels, width, 7), nn.InstanceNorm2d(width), nn.ReLU(inplace=True)]
        layers += _down(width, width * 2) + _down(width * 2, width * 4)
        layers += [ResidualBlock(width * 4) for _ in range(n_blocks)]
        layers += _up(width * 4, width * 2) + _up(width * 2, width)
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(width, channels, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels or x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeMismatch(
                f"generator expects (B, {self.channels}, H, W) with H, W divisible by 4, got {tuple(x.shape)}"
            )
        return self.net(x)


def _check_input(x, channels, size):
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2] != size or x.shape[3] != size:
        raise ShapeMismatch(f"classifier expects (B, {channels}, {size}, {size}), got {tuple(x.shape)}")


def classifier_forward(model: Classifier, batch, mode: str = "eval") -> ClassifierOutput:
    """Run the classifier in ``train`` or ``eval`` mode (eval freezes BN statistics)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.array(batch))
    return model(batch)


def generator_forward(model: Generator, batch):
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.array(batch))
    return model(batch)


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Kaiming-uniform conv/linear weights, zero biases, BN gamma=1 beta=0."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=gen)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
                m.reset_running_stats()
    return model


def build_classifier(in_channels: int = 1, num_classes: int = 10, image_size: int = 28, seed: int = 0) -> Classifier:
    return init_weights(Classifier(in_channels, num_classes, image_size), seed)


def build_generator(channels: int = 1, seed: int = 0) -> Generator:
    return init_weights(Generator(channels), seed)


# -------------------------------------------------------------- checkpoints

def _stored_state(module_or_state) -> "OrderedDict[str, torch.Tensor]":
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    # BN momentum is fixed, so the batch counter carries no information
    return OrderedDict((k, v) for k, v in state.items() if not k.endswith("num_batches_tracked"))


def encode_checkpoint(module_or_state) -> bytes:
    state = _stored_state(module_or_state)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, source="checkpoint") -> "OrderedDict[str, torch.Tensor]":
    def need(pos, n, what):
        if pos + n > len(raw):
            raise TruncatedFile(f"{source}: truncated while reading {what}")

    need(0, 16, "header")
    if raw[:8] != CKPT_MAGIC:
        raise BadMagic(f"{source}: magic {raw[:8]!r}, expected {CKPT_MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"{source}: version {version}, only {CKPT_VERSION} is supported")
    pos = 16
    state = OrderedDict()
    for i in range(count):
        need(pos, 2, f"tensor {i} name length")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(pos, nlen + 1, f"tensor {i} name")
        name = raw[pos:pos + nlen].decode("utf-8")
        ndim = raw[pos + nlen]
        pos += nlen + 1
        need(pos, 4 * ndim, f"dims of {name}")
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(pos, nbytes, f"payload of {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos += nbytes
    if pos != len(raw):
        raise TruncatedFile(f"{source}: {len(raw) - pos} trailing bytes after the last tensor")
    return state


def save_checkpoint(module_or_state, path) -> None:
    """Write atomically (temp file + rename) in the SFITCKPT v1 layout."""
    path = Path(path)
    data = encode_checkpoint(module_or_state)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def load_state(module: nn.Module, state, source="checkpoint") -> nn.Module:
    """Strictly copy ``state`` into ``module``: every tensor present, nothing extra."""
    expected = _stored_state(module)
    missing = [k for k in expected if k not in state]
    unknown = [k for k in state if k not in expected]
    if missing:
        raise MissingTensor(f"{source}: missing tensors {missing}")
    if unknown:
        raise UnknownTensor(f"{source}: unknown tensors {unknown}")
    with torch.no_grad():
        for name, target in expected.items():
            value = state[name]
            if tuple(value.shape) != tuple(target.shape):
                raise ShapeMismatch(f"{source}: {name} has shape {tuple(value.shape)}, expected {tuple(target.shape)}")
            target.copy_(value)
    return module


def load_classifier(path) -> Classifier:
    state = load_checkpoint(path)
    try:
        conv1 = state["features.conv1.weight"]
        head = state["head.weight"]
        fc = state["features.fc.weight"]
    except KeyError as exc:
        raise MissingTensor(f"{path}: not a classifier checkpoint, missing {exc}") from None
    side = int(round((fc.shape[1] / 50) ** 0.5))
    model = Classifier(conv1.shape[1], head.shape[0], side * 4)
    return load_state(model, state, str(path))


def load_generator(path) -> Generator:
    state = load_checkpoint(path)
    try:
        channels = state["net.1.weight"].shape[1]
    except KeyError:
        raise MissingTensor(f"{path}: not a generator checkpoint") from None
    return load_state(Generator(channels), state, str(path))


def state_hash(module_or_state) -> str:
    """SHA-256 over the serialized parameters and BN statistics."""
    return hashlib.sha256(encode_checkpoint(module_or_state)).hexdigest()


def head_hash(model: Classifier) -> str:
    return state_hash(model.head)
