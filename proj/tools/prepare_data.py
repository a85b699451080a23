#!/usr/bin/env python3
"""Rebuild the bundled datasets under data/ from locally installable packages.

MNIST: the npm package `mnist` ships 10000 original MNIST digits as [0,1]
floats with 256 distinct levels; they are converted back to bytes and written
as gzipped IDX files (8000 train / 2000 test, shuffled with a fixed seed).

Auto MPG: the `vega_datasets` wheel ships the 406-row cars table; the 398 rows
with a known mpg are written in the UCI whitespace format with '?' for missing
horsepower.

Usage: prepare_data.py <npm-mnist-package-dir> <vega_datasets-wheel> <out-dir>
"""
import gzip
import json
import os
import random
import struct
import sys
import zipfile


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">iiii", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">ii", 2049, len(labels)))
        f.write(bytes(labels))


def build_mnist(pkg_dir, out_dir):
    samples = []
    for digit in range(10):
        with open(os.path.join(pkg_dir, "src", "digits", f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        for k in range(len(raw) // 784):
            pixels = [int(round(v * 255.0)) for v in raw[k * 784:(k + 1) * 784]]
            samples.append((pixels, digit))
    random.Random(20240917).shuffle(samples)
    train, test = samples[:8000], samples[8000:]
    os.makedirs(os.path.join(out_dir, "mnist"), exist_ok=True)
    for name, part in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(out_dir, "mnist", f"{name}-images-idx3-ubyte.gz"),
                         [p for p, _ in part])
        write_idx_labels(os.path.join(out_dir, "mnist", f"{name}-labels-idx1-ubyte.gz"),
                         [l for _, l in part])


def build_auto_mpg(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        rows = json.loads(z.read("vega_datasets/_data/cars.json"))
    origin = {"USA": 1, "Europe": 2, "Japan": 3}
    lines = []
    for r in rows:
        if r["Miles_per_Gallon"] is None:
            continue
        hp = "?" if r["Horsepower"] is None else f"{float(r['Horsepower']):.1f}"
        year = int(r["Year"][:4]) - 1900
        lines.append(f"{float(r['Miles_per_Gallon']):<7.1f}{r['Cylinders']:<4d}"
                     f"{float(r['Displacement']):<11.1f}{hp:<11}{float(r['Weight_in_lbs']):<11.1f}"
                     f"{float(r['Acceleration']):<7.1f}{year:<3d}{origin[r['Origin']]}\t\"{r['Name']}\"")
    with open(os.path.join(out_dir, "auto-mpg.data"), "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    build_mnist(sys.argv[1], sys.argv[3])
    build_auto_mpg(sys.argv[2], sys.argv[3])
