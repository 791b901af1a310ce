"""Deterministic binary checkpoints.

Layout: ``b"LNRCKPT1"``, a little-endian uint32 header length, a sorted-key
JSON header (version, config echo, seed, tensor index), then the raw
little-endian float32/int64 tensor payloads in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LNRCKPT1"
VERSION = "1"
_DTYPES = {"float32": "<f4", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def _flatten(modules: dict[str, torch.nn.Module]):
    items = []
    for prefix in sorted(modules):
        for name, t in modules[prefix].state_dict().items():
            items.append((f"{prefix}.{name}", t.detach().cpu()))
    return items


def save_checkpoint(path, modules: dict[str, torch.nn.Module], config: dict, seed: int, extra: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in _flatten(modules):
        kind = "int64" if not t.is_floating_point() else "float32"
        arr = np.ascontiguousarray(t.numpy().astype(_DTYPES[kind]))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "config": config, "seed": int(seed), "tensors": entries, "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Return ``(header, {name: tensor})``."""
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", buf, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(buf[start : start + n].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')!r} is not supported (expected {VERSION!r})")
    base = start + n
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"])), offset=base + e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return header, tensors


def load_into(modules: dict[str, torch.nn.Module], tensors: dict[str, torch.Tensor]) -> None:
    for prefix, mod in modules.items():
        sd = mod.state_dict()
        new = {}
        for name, ref in sd.items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key}")
            new[name] = tensors[key].to(ref.dtype).reshape(ref.shape)
        mod.load_state_dict(new)


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
