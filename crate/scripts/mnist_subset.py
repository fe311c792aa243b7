"""Build the 10-class, 5000-image MNIST subset in IDX format.

Source: the `mnist` npm package (MIT), which ships the 10k test digits as
JSON with pixels in [0, 1]. Fetch it with `npm pack mnist@1.1.0` and unpack,
then run

    python3 scripts/mnist_subset.py path/to/package data/mnist-5k

The first 500 digits of each class are taken and shuffled with a fixed seed.
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np

PER_CLASS = 500
SEED = 0


def main(src: Path, out: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
        pixels = np.asarray(flat, dtype=np.float64).reshape(-1, 784)[:PER_CLASS]
        images.append(np.rint(pixels * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(pixels), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(SEED).permutation(len(labels))
    images, labels = images[order], labels[order]

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.write(images.tobytes())
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.tobytes())
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
