#!/usr/bin/env python3
"""Build MNIST IDX files from the 10k-digit subset bundled in the `mnist` npm package.

Usage: make_mnist_subset.py <unpacked npm package dir> <output tar.gz>

The npm package stores each digit class as a flat JSON array of 28x28 images with
intensities already divided by 255 (three decimals). Bytes are recovered with
round(v * 255). The first 80% of every class goes to the training split, the rest
to the test split; samples are interleaved class by class so both files stay
balanced without shuffling.
"""
import io
import json
import struct
import sys
import tarfile
from pathlib import Path

SIDE = 28


def load_digits(root):
    per_class = []
    for d in range(10):
        flat = json.loads((Path(root) / "src" / "digits" / f"{d}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        imgs = [bytes(min(255, max(0, round(v * 255))) for v in flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE])
                for i in range(n)]
        per_class.append(imgs)
    return per_class


def interleave(groups):
    out = []
    longest = max(len(g) for g in groups)
    for i in range(longest):
        for label, g in enumerate(groups):
            if i < len(g):
                out.append((g[i], label))
    return out


def idx_images(samples):
    head = struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE)
    return head + b"".join(img for img, _ in samples)


def idx_labels(samples):
    return struct.pack(">II", 0x00000801, len(samples)) + bytes(label for _, label in samples)


def main():
    src, dst = sys.argv[1], sys.argv[2]
    per_class = load_digits(src)
    train = interleave([imgs[: len(imgs) * 4 // 5] for imgs in per_class])
    test = interleave([imgs[len(imgs) * 4 // 5:] for imgs in per_class])
    files = {
        "train-images-idx3-ubyte": idx_images(train),
        "train-labels-idx1-ubyte": idx_labels(train),
        "t10k-images-idx3-ubyte": idx_images(test),
        "t10k-labels-idx1-ubyte": idx_labels(test),
    }
    with tarfile.open(dst, "w:gz") as tar:
        for name, blob in files.items():
            info = tarfile.TarInfo(f"mnist/{name}")
            info.size = len(blob)
            info.mtime = 0
            tar.addfile(info, io.BytesIO(blob))
    print(f"train={len(train)} test={len(test)} -> {dst}")


if __name__ == "__main__":
    main()
