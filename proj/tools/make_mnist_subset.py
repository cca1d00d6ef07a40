#!/usr/bin/env python3
"""Write a shuffled 4000/1000 train/test split of the 5000-image MNIST subset
shipped with mlxtend (BSD-3) as standard IDX files.

    pip download --no-deps mlxtend -d /tmp/mlx
    python3 tools/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""
import gzip
import random
import struct
import sys
import zipfile
from pathlib import Path


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = gzip.decompress(zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz"))
    rows = []
    for line in raw.decode().splitlines():
        values = [int(v) for v in line.split(",")]
        rows.append((values[:-1], values[-1]))
    random.Random(2022).shuffle(rows)
    train, test = rows[:4000], rows[4000:]
    write_images(out / "train-images-idx3-ubyte", train)
    write_labels(out / "train-labels-idx1-ubyte", train)
    write_images(out / "t10k-images-idx3-ubyte", test)
    write_labels(out / "t10k-labels-idx1-ubyte", test)


if __name__ == "__main__":
    main()
