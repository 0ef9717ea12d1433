#!/usr/bin/env python3
"""Builds a reduced MNIST set (5,000 train / 5,000 test) as gzipped IDX files.

The digits come from the `mnist` npm package (MIT licence), which ships
10,000 MNIST images as JSON with intensities rounded to three decimals.
Images are shuffled with a fixed seed, then split in half.

    python3 scripts/fetch_reduced_mnist.py --out data/mnist-reduced
    python3 scripts/fetch_reduced_mnist.py --package mnist-1.1.0.tgz --out DIR
"""

import argparse
import gzip
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"
SIDE = 28
TRAIN = 5000
TEST = 5000
SEED = 20170831


def fetch_package(workdir: Path) -> Path:
    out = subprocess.run(
        ["npm", "pack", PACKAGE, "--silent"],
        cwd=workdir,
        check=True,
        capture_output=True,
        text=True,
    )
    return workdir / out.stdout.strip().splitlines()[-1]


def read_digits(tgz: Path):
    images = []
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = json.load(member)["data"]
            plane = SIDE * SIDE
            for i in range(len(flat) // plane):
                pixels = bytes(
                    round(min(max(v, 0.0), 1.0) * 255) for v in flat[i * plane : (i + 1) * plane]
                )
                images.append((digit, pixels))
    return images


def write_split(out: Path, stem: str, items) -> None:
    with gzip.GzipFile(out / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(items), SIDE, SIDE))
        for _, pixels in items:
            f.write(pixels)
    with gzip.GzipFile(out / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(items)))
        f.write(bytes(label for label, _ in items))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--package", type=Path, help="local mnist npm tarball")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.package or fetch_package(Path(tmp))
        images = read_digits(tgz)
    if len(images) < TRAIN + TEST:
        raise SystemExit(f"package holds {len(images)} images, need {TRAIN + TEST}")
    random.Random(SEED).shuffle(images)
    args.out.mkdir(parents=True, exist_ok=True)
    write_split(args.out, "train", images[:TRAIN])
    write_split(args.out, "t10k", images[TRAIN : TRAIN + TEST])
    print(f"wrote {TRAIN} train and {TEST} test images to {args.out}")


if __name__ == "__main__":
    main()
