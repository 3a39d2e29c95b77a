#!/usr/bin/env python3
"""Fetch a 10k-digit MNIST sample and write it as IDX files.

The digits come from the `mnist` npm package (10000 real MNIST samples
stored as JSON intensities rounded to three decimals). Rounding x*255
recovers the original bytes exactly, so the IDX output is lossless.

Usage: scripts/fetch_mnist_subset.py [out_dir]   (default: data/mnist)
"""

import json
import pathlib
import struct
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"
SIDE = 28


def main() -> int:
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        tgz = next(pathlib.Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tgz) as tf:
            tf.extractall(tmp)
        digits = pathlib.Path(tmp) / "package" / "src" / "digits"
        pixels = bytearray()
        labels = bytearray()
        for d in range(10):
            raw = json.loads((digits / f"{d}.json").read_text())["data"]
            count = len(raw) // (SIDE * SIDE)
            pixels.extend(min(255, max(0, round(v * 255))) for v in raw)
            labels.extend([d] * count)

    n = len(labels)
    (out / "images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, n, SIDE, SIDE) + bytes(pixels))
    (out / "labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} digits to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
