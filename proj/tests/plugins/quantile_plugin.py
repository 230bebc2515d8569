#!/usr/bin/env python3
"""Quantile-bin segmenter plugin written against the manifest protocol only.

Reads the float32 tile, labels every voxel floor(L * #{v' < v} / N) and
writes a uint8 NIfTI-1 label file next to the manifest.
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np


def read_nifti(path):
    raw = Path(path).read_bytes()
    if struct.unpack_from("<i", raw, 0)[0] != 348:
        raise ValueError("not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype = struct.unpack_from("<h", raw, 70)[0]
    offset = int(struct.unpack_from("<f", raw, 108)[0])
    shape = dim[1:4]
    dtype = {2: np.uint8, 4: np.int16, 16: np.float32}[datatype]
    count = shape[0] * shape[1] * shape[2]
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return raw[:348], shape, data


def write_labels(path, header, shape, labels, label_count):
    h = bytearray(header)
    struct.pack_into("<8h", h, 40, 3, shape[0], shape[1], shape[2], 1, 1, 1, 1)
    struct.pack_into("<h", h, 70, 2)      # uint8
    struct.pack_into("<h", h, 72, 8)      # bitpix
    struct.pack_into("<f", h, 108, 352.0)
    struct.pack_into("<ff", h, 112, 0.0, 0.0)  # no scaling
    struct.pack_into("<f", h, 56, float(label_count))  # intent_p1
    struct.pack_into("<h", h, 68, 1002)   # NIFTI_INTENT_LABEL
    with open(path, "wb") as f:
        f.write(bytes(h))
        f.write(b"\0\0\0\0")
        f.write(labels.astype(np.uint8).tobytes())


def main():
    if len(sys.argv) != 2:
        print("usage: quantile_plugin.py MANIFEST", file=sys.stderr)
        return 2
    manifest_path = Path(sys.argv[1])
    try:
        m = json.loads(manifest_path.read_text())
        if m.get("protocol_version") != 1:
            raise ValueError("protocol_version must be 1")
        label_count = int(m["label_count"])
        src = manifest_path.parent / m["input_volume"]
        dst = manifest_path.parent / m["output_volume"]
    except (ValueError, KeyError) as e:
        print(f"quantile_plugin: malformed manifest: {e}", file=sys.stderr)
        return 2
    if label_count > 256:
        print("quantile_plugin: label_count above 256 is not supported", file=sys.stderr)
        return 2
    try:
        header, shape, data = read_nifti(src)
        v = data.astype(np.float32)
        below = np.searchsorted(np.sort(v, kind="stable"), v, side="left").astype(np.int64)
        labels = np.minimum(label_count * below // v.size, label_count - 1)
        write_labels(dst, header, shape, labels, label_count)
    except (OSError, ValueError) as e:
        print(f"quantile_plugin: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
