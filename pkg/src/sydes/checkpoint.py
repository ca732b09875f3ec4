"""Checkpoint container.

Layout: magic line, an 8-byte little-endian header length, a JSON header,
then the concatenated parameter payloads as little-endian float64.  The
header records, per parameter, its name, shape, and byte offset, plus the
rng state and arbitrary stage metadata.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import DataError
from .nn import Module
from .tensor import RngState

MAGIC = b"SYDESCKPT1\n"


def save_checkpoint(path: str, model: Module, rng: RngState, meta: dict) -> None:
    model.assign_names()
    entries = []
    payloads = []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format": 1,
        "rng": {"seed": rng.seed, "stream": rng.stream},
        "meta": meta,
        "params": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def read_checkpoint(path: str) -> tuple[dict, RngState, dict[str, np.ndarray]]:
    """Return (meta, rng, name -> array)."""
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    rng = RngState(header["rng"]["seed"], header["rng"]["stream"])
    return header["meta"], rng, params


def load_checkpoint(path: str, model: Module) -> tuple[dict, RngState]:
    """Load parameter values into ``model``; names and shapes must match the
    model exactly."""
    meta, rng, params = read_checkpoint(path)
    model.assign_names()
    model_names = {name for name, _ in model.named_parameters()}
    file_names = set(params)
    if model_names != file_names:
        missing = sorted(model_names - file_names)[:3]
        extra = sorted(file_names - model_names)[:3]
        raise DataError(f"{path}: parameter set mismatch "
                        f"(missing {missing}, unexpected {extra})")
    for name, p in model.named_parameters():
        if params[name].shape != p.shape:
            raise DataError(f"{path}: shape of {name} is {params[name].shape}, "
                            f"model expects {p.shape}")
        p.data = params[name]
    return meta, rng
