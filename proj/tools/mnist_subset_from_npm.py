#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into gzipped IDX files.

Usage: mnist_subset_from_npm.py <npm-package-dir> <out-dir> [--test-fraction 0.2]

The package stores 28x28 digits as JSON arrays of pixel/255 values rounded to
three decimals; pixels are mapped back to bytes with round(v * 255).
"""
import argparse
import gzip
import json
import random
import struct
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=20230501)
    args = ap.parse_args()

    train, test = [], []
    for digit in range(10):
        raw = json.load(open(Path(args.package_dir) / "src" / "digits" / f"{digit}.json"))["data"]
        n = len(raw) // 784
        samples = [bytes(min(255, round(v * 255)) for v in raw[i * 784:(i + 1) * 784]) for i in range(n)]
        cut = n - int(round(n * args.test_fraction))
        train += [(s, digit) for s in samples[:cut]]
        test += [(s, digit) for s in samples[cut:]]

    rng = random.Random(args.seed)
    rng.shuffle(train)
    rng.shuffle(test)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(rows), 28, 28),
                  b"".join(s for s, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(rows),),
                  bytes(l for _, l in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
