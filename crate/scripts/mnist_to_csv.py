#!/usr/bin/env python3
"""Convert the MNIST IDX files to CSV: 784 pixel columns scaled to [0, 1] and a `label` column.

Usage: mnist_to_csv.py <idx_dir> [<out_dir>]
Writes mnist_train.csv and mnist_test.csv.
"""
import sys
from pathlib import Path

import numpy as np


def read_idx(path):
    data = path.read_bytes()
    ndim = data[3]
    shape = tuple(int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(shape)


def write(images, labels, out):
    x = images.reshape(len(images), -1) / 255.0
    header = ",".join([f"p{i}" for i in range(x.shape[1])] + ["label"])
    table = np.column_stack([x, labels])
    fmt = ["%.6g"] * x.shape[1] + ["%d"]
    np.savetxt(out, table, fmt=fmt, delimiter=",", header=header, comments="")


def main():
    if len(sys.argv) not in (2, 3):
        sys.exit(__doc__)
    src = Path(sys.argv[1])
    dst = Path(sys.argv[2]) if len(sys.argv) == 3 else src
    dst.mkdir(parents=True, exist_ok=True)
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = read_idx(src / f"{prefix}-images-idx3-ubyte")
        labels = read_idx(src / f"{prefix}-labels-idx1-ubyte")
        write(images, labels, dst / f"mnist_{split}.csv")
        print(dst / f"mnist_{split}.csv", len(labels))


if __name__ == "__main__":
    main()
