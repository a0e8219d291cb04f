"""Rebuild the bundled 10k MNIST subset as gzipped IDX files.

Source: the MIT-licensed ``mnist`` npm package (github.com/cazala/mnist),
which stores 10,000 MNIST digits as per-class JSON arrays of byte/255 values
rounded to three decimals. ``round(v * 255)`` recovers the original byte
exactly because the rounding error (< 5e-4) is below half a grey level.

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/convert_npm_mnist.py package/src/digits src/sfit/_data
"""
import gzip
import json
import sys
from pathlib import Path

import numpy as np


def main(digits_dir: str, out_dir: str) -> None:
    images, labels = [], []
    for d in range(10):
        raw = np.asarray(json.loads(Path(digits_dir, f"{d}.json").read_text())["data"])
        px = np.rint(raw * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), d, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(images))
    images, labels = images[order], labels[order]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = np.array([0x803, len(images), 28, 28], dtype=">u4").tobytes()
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(header + images.tobytes())
    header = np.array([0x801, len(labels)], dtype=">u4").tobytes()
    with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(header + labels.tobytes())
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
