#!/usr/bin/env python3
"""Download the four MNIST IDX files into a data directory.

Tries a list of well-known mirrors in order and verifies the IDX magic
number of everything it writes. Usage:

    python3 scripts/fetch_mnist.py [--dest data/mnist]

The destination is what `fedsim run specs/mnist_*.json` and the end-to-end
acceptance tests expect (override with FEDSIM_DATA_DIR for the tests).
"""

from __future__ import annotations

import argparse
import gzip
import os
import struct
import sys
import urllib.error
import urllib.request

FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)

MAGICS = {"idx3": 0x803, "idx1": 0x801}


def fetch(url: str, timeout: float = 30.0) -> bytes:
    req = urllib.request.Request(url, headers={"User-Agent": "fedsim-fetch/1"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read()


def check_magic(name: str, payload: bytes) -> None:
    kind = "idx3" if "idx3" in name else "idx1"
    (magic,) = struct.unpack(">I", payload[:4])
    if magic != MAGICS[kind]:
        raise ValueError(f"{name}: bad IDX magic 0x{magic:x}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dest", default="data/mnist", help="output directory")
    args = parser.parse_args(argv)
    os.makedirs(args.dest, exist_ok=True)

    for name in FILES:
        target = os.path.join(args.dest, name)
        if os.path.exists(target):
            print(f"{name}: already present")
            continue
        last_err: Exception | None = None
        for mirror in MIRRORS:
            url = mirror + name + ".gz"
            try:
                raw = gzip.decompress(fetch(url))
                check_magic(name, raw)
            except (urllib.error.URLError, OSError, ValueError) as e:
                last_err = e
                print(f"{name}: {mirror} failed ({e})", file=sys.stderr)
                continue
            with open(target, "wb") as f:
                f.write(raw)
            print(f"{name}: fetched from {mirror} ({len(raw)} bytes)")
            break
        else:
            print(f"error: could not fetch {name}: {last_err}", file=sys.stderr)
            return 1
    print(f"done: files in {args.dest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
