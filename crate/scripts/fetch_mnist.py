#!/usr/bin/env python3
"""Build the desk-scale MNIST subset (6000 train / 1000 test) as gzip IDX files.

Source: the `mnist` npm package, which bundles 10,000 MNIST digits as
grayscale values in [0, 1] (rounded to 3 decimals). Values are mapped back to
bytes with round(v * 255). The split is a fixed-seed shuffle, so reruns
produce identical files.

Usage: scripts/fetch_mnist.py [OUT_DIR]   (default: data/mnist)
"""
import gzip
import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

SIDE = 28
TRAIN = 6000
TEST = 1000


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(Path(tmp) / "mnist-1.1.0.tgz") as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            raw = json.loads((Path(tmp) / "package/src/digits" / f"{digit}.json").read_text())["data"]
            n = len(raw) // (SIDE * SIDE)
            for k in range(n):
                px = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
                samples.append((digit, bytes(min(255, max(0, round(v * 255))) for v in px)))
    random.Random(20230101).shuffle(samples)
    for name, chunk in (("train", samples[:TRAIN]), ("t10k", samples[TRAIN:TRAIN + TEST])):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(chunk), SIDE, SIDE),
                  b"".join(p for _, p in chunk))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(chunk),),
                  bytes(d for d, _ in chunk))
        print(f"{name}: {len(chunk)} samples -> {out}")


if __name__ == "__main__":
    main()
