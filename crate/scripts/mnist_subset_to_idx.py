#!/usr/bin/env python3
"""Convert the 10,000 MNIST digits bundled with the npm `mnist` package into
standard gzip'd IDX files (8,000 train / 2,000 test).

usage: mnist_subset_to_idx.py <path/to/package/src/digits> <out_dir>
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    src, out = sys.argv[1], sys.argv[2]
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            raw = np.asarray(json.load(f)["data"], dtype=np.float64)
        imgs = np.rint(raw.reshape(-1, 784) * 255.0).clip(0, 255).astype(np.uint8)
        cut = int(round(len(imgs) * 0.8))
        train_x.append(imgs[:cut]); train_y += [digit] * cut
        test_x.append(imgs[cut:]); test_y += [digit] * (len(imgs) - cut)
    rng = np.random.default_rng(20231015)
    os.makedirs(out, exist_ok=True)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x = np.concatenate(xs)
        y = np.asarray(ys, dtype=np.uint8)
        perm = rng.permutation(len(y))
        x, y = x[perm], y[perm]
        write_idx(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), 0x803, (len(y), 28, 28), x.tobytes())
        write_idx(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), 0x801, (len(y),), y.tobytes())
        print(name, len(y))


if __name__ == "__main__":
    main()
