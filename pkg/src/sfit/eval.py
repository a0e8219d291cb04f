"""Branch accuracies, gap closure, image grids and Gram-difference heatmaps."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .data import ImageSet, to_bytes
from .errors import ShapeMismatch, SizeMismatch, UnlabeledData
from .losses import gram, normalize_rows
from .models import Classifier, Generator
from .pipelines import predict


@dataclass
class BranchReport:
    acc_source_on_target: float
    acc_target_on_target: float
    acc_source_on_generated: float
    gap: float
    gap_closure: float | None
    per_class: dict  # branch name -> list of per-class accuracies (None for absent classes)
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, prefix: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}.json").write_text(self.to_json())
        for branch, accs in self.per_class.items():
            with open(out / f"{prefix}.{branch}.per_class.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["class", "acc"])
                writer.writerows((k, "" if a is None else repr(a)) for k, a in enumerate(accs))


def gap_closure(acc_source: float, acc_target: float, acc_generated: float) -> float | None:
    """Fraction of the target-vs-source accuracy gap recovered by translated images.

    Undefined (None) unless the gap exceeds one accuracy point.
    """
    gap = acc_target - acc_source
    if gap <= 0.01:
        return None
    if acc_generated == acc_target:
        return 1.0
    return (acc_generated - acc_source) / gap


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list:
    hits = np.bincount(labels[pred == labels], minlength=num_classes)
    counts = np.bincount(labels, minlength=num_classes)
    return [float(h / c) if c else None for h, c in zip(hits, counts)]


def evaluate_branches(source_model: Classifier, target_model: Classifier, generator: Generator | None,
                      test: ImageSet) -> BranchReport:
    """Accuracy of the three branches on a labeled target test set.

    ``generator=None`` stands for the identity translation. Predictions use
    argmax, which breaks ties toward the lowest class index.
    """
    if test.labels is None:
        raise UnlabeledData("evaluate_branches needs a labeled test set")
    labels = test.labels
    k = source_model.num_classes
    preds = {
        "source_on_target": predict(source_model, test).argmax(1),
        "target_on_target": predict(target_model, test).argmax(1),
        "source_on_generated": (
            predict(source_model, test, generator) if generator is not None else predict(source_model, test)
        ).argmax(1),
    }
    acc = {name: float((p == labels).mean()) for name, p in preds.items()}
    return BranchReport(
        acc_source_on_target=acc["source_on_target"],
        acc_target_on_target=acc["target_on_target"],
        acc_source_on_generated=acc["source_on_generated"],
        gap=acc["target_on_target"] - acc["source_on_target"],
        gap_closure=gap_closure(acc["source_on_target"], acc["target_on_target"], acc["source_on_generated"]),
        per_class={name: per_class_accuracy(p, labels, k) for name, p in preds.items()},
        n_samples=len(test),
    )


@torch.no_grad()
def translate(generator: Generator, data: ImageSet, batch_size: int = 256) -> ImageSet:
    generator.eval()
    out = [generator(torch.from_numpy(np.array(data.images[i:i + batch_size]))) for i in range(0, len(data), batch_size)]
    return ImageSet(torch.cat(out).numpy(), data.labels)


# ------------------------------------------------------------------ rasters

def _rows_as_arrays(rows):
    arrays = [np.asarray(r.images if isinstance(r, ImageSet) else r, dtype=np.float32) for r in rows]
    if not arrays:
        raise SizeMismatch("export_grid needs at least one row")
    first = arrays[0].shape
    for a in arrays:
        if a.ndim != 4 or a.shape[0] != first[0] or a.shape[2:] != first[2:]:
            raise SizeMismatch(f"grid rows must hold equally many same-sized images, got {a.shape} vs {first}")
    return arrays


def export_grid(rows: Sequence, path, sep: int = 2) -> np.ndarray:
    """Tile rows of images into an 8-bit RGB PNG with ``sep``-pixel white separators.

    Each row is an ImageSet or (N, C, H, W) array in [-1, 1]; single-channel
    images are replicated to RGB. Returns the written (height, width, 3) raster.
    """
    arrays = _rows_as_arrays(rows)
    n, _, h, w = arrays[0].shape
    canvas = np.full((len(arrays) * h + (len(arrays) + 1) * sep, n * w + (n + 1) * sep, 3), 255, dtype=np.uint8)
    for r, imgs in enumerate(arrays):
        tiles = to_bytes(imgs)
        if tiles.shape[1] == 1:
            tiles = np.repeat(tiles, 3, axis=1)
        for c, tile in enumerate(tiles):
            y, x = sep + r * (h + sep), sep + c * (w + sep)
            canvas[y:y + h, x:x + w] = tile.transpose(1, 2, 0)
    Image.fromarray(canvas, "RGB").save(path)
    return canvas


def colormap(values: np.ndarray, vmax: float) -> np.ndarray:
    """White-to-dark-red ramp, monotone in value: 0 -> (255,255,255), vmax -> (128,0,0)."""
    t = np.zeros_like(values, dtype=np.float64) if vmax <= 0 else np.clip(values / vmax, 0, 1)
    rgb = np.stack([255 - 127 * t, 255 * (1 - t), 255 * (1 - t)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def gram_difference(f_target, f_source, normalized: bool) -> np.ndarray:
    """|G~_S - G~_T| (normalized) or |G_S - G_T| (raw) for one (D, H, W) map pair."""
    f_t = torch.as_tensor(np.asarray(f_target, dtype=np.float64))
    f_s = torch.as_tensor(np.asarray(f_source, dtype=np.float64))
    if f_t.shape != f_s.shape or f_t.ndim != 3:
        raise ShapeMismatch(f"heatmap needs equal (D, H, W) maps, got {tuple(f_t.shape)} and {tuple(f_s.shape)}")
    g_t, g_s = gram(f_t), gram(f_s)
    if normalized:
        g_t, g_s = normalize_rows(g_t), normalize_rows(g_s)
    return (g_s - g_t).abs().numpy()


def export_gram_heatmap(f_target, f_source, normalized: bool, path, zoom: int = 4) -> np.ndarray:
    """Render the Gram difference as a PNG; min/max go to ``<path>.txt``."""
    diff = gram_difference(f_target, f_source, normalized)
    raster = colormap(diff, float(diff.max()))
    raster = np.repeat(np.repeat(raster, zoom, axis=0), zoom, axis=1)
    Image.fromarray(raster, "RGB").save(path)
    Path(str(path) + ".txt").write_text(
        f"kind = {'normalized' if normalized else 'raw'}\n"
        f"channels = {diff.shape[0]}\n"
        f"min = {float(diff.min())!r}\n"
        f"max = {float(diff.max())!r}\n"
        f"zoom = {zoom}\n"
        "colormap = white (0) to dark red (max), linear\n"
    )
    return diff
