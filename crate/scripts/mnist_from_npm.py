#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package into IDX files.

Each digits/<d>.json holds ~1000 flattened 28x28 images with values in [0, 1].
The first TRAIN_PER_CLASS images of every digit go to the train split, the rest
to the test split. Pixels are stored as round(v * 255).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 800
SIDE = 28


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            px = [min(255, max(0, round(v * 255))) for v in raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]]
            split = "train" if i < TRAIN_PER_CLASS else "t10k"
            splits[split][0].append(px)
            splits[split][1].append(digit)
    for name, (images, labels) in splits.items():
        write_images(dst / f"{name}-images-idx3-ubyte", images)
        write_labels(dst / f"{name}-labels-idx1-ubyte", labels)
        print(f"{name}: {len(labels)} images")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(*sys.argv[1:])
