"""Flat binary container for float32 arrays.

Each array is written as ``uint32 ndim``, ``uint32`` dims, then the float32
payload, all little-endian. Callers keep the returned byte offsets in their own
JSON metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_F32 = np.dtype("<f4")


class ArrayWriter:
    def __init__(self, path):
        self._fh = open(path, "wb")
        self._pos = 0

    def write(self, arr) -> int:
        a = np.ascontiguousarray(np.asarray(arr), dtype=_F32)
        head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        self._fh.write(head)
        self._fh.write(a.tobytes())
        off = self._pos
        self._pos += len(head) + a.nbytes
        return off

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ArrayReader:
    def __init__(self, path):
        self._buf = Path(path).read_bytes()

    def read(self, offset: int) -> np.ndarray:
        (ndim,) = struct.unpack_from("<I", self._buf, offset)
        shape = struct.unpack_from(f"<{ndim}I", self._buf, offset + 4)
        start = offset + 4 + 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        a = np.frombuffer(self._buf, dtype=_F32, count=n, offset=start)
        return a.reshape(shape).astype(np.float32)


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
