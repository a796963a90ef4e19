#!/usr/bin/env python3
"""Build the desk-scale MNIST IDX files under data/mnist-desk/.

Source: the official MNIST IDX files bundled in the npm package
`mnist-data@1.2.6`. The training file is a seeded 10,000-image subsample of
the 60,000 training digits; the test file is the full official test split.
"""
import argparse
import os
import random
import struct
import subprocess
import tarfile
import tempfile

PACKAGE = "mnist-data@1.2.6"


def read_idx(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, n = struct.unpack(">II", data[:8])
    if magic == 0x00000803:
        rows, cols = struct.unpack(">II", data[8:16])
        size = rows * cols
        return [data[16 + i * size:16 + (i + 1) * size] for i in range(n)]
    if magic == 0x00000801:
        return list(data[8:8 + n])
    raise ValueError(f"{path}: unexpected magic {magic:#x}")


def write_idx_images(path, images, rows, cols):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist-desk"))
    ap.add_argument("--train-count", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=20)
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as work:
        subprocess.run(["npm", "pack", PACKAGE], cwd=work, check=True, stdout=subprocess.DEVNULL)
        tgz = next(f for f in os.listdir(work) if f.endswith(".tgz"))
        with tarfile.open(os.path.join(work, tgz)) as tar:
            tar.extractall(work)
        d = os.path.join(work, "package", "data")
        train_x = read_idx(os.path.join(d, "train-images-idx3-ubyte"))
        train_y = read_idx(os.path.join(d, "train-labels-idx1-ubyte"))
        test_x = read_idx(os.path.join(d, "t10k-images-idx3-ubyte"))
        test_y = read_idx(os.path.join(d, "t10k-labels-idx1-ubyte"))
    picked = random.Random(args.seed).sample(range(len(train_x)), args.train_count)
    train_x = [train_x[i] for i in picked]
    train_y = [train_y[i] for i in picked]
    overlap = set(train_x) & set(test_x)
    if overlap:
        raise SystemExit(f"{len(overlap)} test images also appear in the training subsample")
    write_idx_images(os.path.join(args.out_dir, "train-images.idx"), train_x, 28, 28)
    write_idx_labels(os.path.join(args.out_dir, "train-labels.idx"), train_y)
    write_idx_images(os.path.join(args.out_dir, "test-images.idx"), test_x, 28, 28)
    write_idx_labels(os.path.join(args.out_dir, "test-labels.idx"), test_y)
    print(f"train {len(train_x)}  test {len(test_x)} -> {args.out_dir}")


if __name__ == "__main__":
    main()
