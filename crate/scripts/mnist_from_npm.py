#!/usr/bin/env python3
"""Rebuild data/mnist/*.gz from the digits bundled in the npm `mnist` package.

The package ships 10 000 MNIST digits as JSON float arrays (pixel/255 with
three decimals); this writes them back out as standard gzip IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images = bytearray()
    labels = bytearray()
    count = 0
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        n = len(data) // 784
        images.extend(min(255, max(0, round(v * 255))) for v in data)
        labels.extend([digit] * n)
        count += n
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, count, 28, 28))
        f.write(images)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, count))
        f.write(labels)
    print(f"wrote {count} images to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
