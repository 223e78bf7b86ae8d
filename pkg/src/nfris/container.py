"""Binary container: magic, length-prefixed JSON header, little-endian float64 payloads.

Complex arrays are stored as interleaved (re, im) float64 pairs (numpy '<c16').
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NFRIS\x00\x01\x00"


def write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    specs, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = "c16" if np.iscomplexobj(arr) else "f8"
        raw = np.ascontiguousarray(arr, dtype="<" + kind).tobytes()
        specs.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({"header": header, "arrays": specs}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an nfris container")
    (n,) = struct.unpack("<I", data[8:12])
    meta = json.loads(data[12:12 + n])
    base = 12 + n
    arrays = {}
    for spec in meta["arrays"]:
        dt = np.dtype("<" + spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        start = base + spec["offset"]
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(dt.newbyteorder("="))
    return meta["header"], arrays
