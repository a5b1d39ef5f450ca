#!/usr/bin/env python3
"""Convert the digit sample shipped in the npm `mnist` package to IDX files.

The package stores each digit as 784 floats in [0, 1] rounded to three
decimals, grouped per class in src/digits/<d>.json. Bytes are rebuilt as
round(v * 255). Examples are interleaved by class in their stored order.

usage: mnist_sample_to_idx.py <package dir or .tgz> <output dir>
"""

import io
import json
import struct
import sys
import tarfile
from pathlib import Path


def load_digits(src: Path) -> list[list[list[float]]]:
    if src.is_file():
        with tarfile.open(src) as tar:
            return [
                _images(json.load(tar.extractfile(f"package/src/digits/{d}.json")))
                for d in range(10)
            ]
    return [_images(json.loads((src / "src" / "digits" / f"{d}.json").read_text())) for d in range(10)]


def _images(obj: dict) -> list[list[float]]:
    flat = obj["data"]
    assert len(flat) % 784 == 0, "digit file is not a multiple of 784 values"
    return [flat[i : i + 784] for i in range(0, len(flat), 784)]


def main() -> None:
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    digits = load_digits(Path(sys.argv[1]))
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)

    images = io.BytesIO()
    labels = bytearray()
    longest = max(len(d) for d in digits)
    for i in range(longest):
        for label, group in enumerate(digits):
            if i < len(group):
                images.write(bytes(min(255, max(0, round(v * 255))) for v in group[i]))
                labels.append(label)

    k = len(labels)
    (out / "mnist-sample-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, k, 28, 28) + images.getvalue()
    )
    (out / "mnist-sample-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, k) + bytes(labels))
    print(f"wrote {k} examples to {out}")


if __name__ == "__main__":
    main()
