#!/usr/bin/env python3
"""Write an SNRW weights file from a JSON shape table.

Usage: write_weights.py SHAPES.json OUT.w

SHAPES.json is a list of {"name": str, "shape": [int, ...]}. Tensor k gets
values sin(0.37 * (i + 1) + k) for flat index i, stored as little-endian
float32. Standard library only.
"""

import json
import math
import struct
import sys
import zlib


def build(table):
    out = bytearray(b"SNRW")
    out += struct.pack("<II", 1, len(table))
    for k, entry in enumerate(table):
        name = entry["name"].encode("utf-8")
        shape = entry["shape"]
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<I", len(shape))
        out += struct.pack("<%dI" % len(shape), *shape)
        n = math.prod(shape)
        out += struct.pack("<%df" % n, *(math.sin(0.37 * (i + 1) + k) for i in range(n)))
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def main(argv):
    if len(argv) != 3:
        sys.stderr.write(__doc__)
        return 2
    with open(argv[1], encoding="utf-8") as f:
        table = json.load(f)
    with open(argv[2], "wb") as f:
        f.write(build(table))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
