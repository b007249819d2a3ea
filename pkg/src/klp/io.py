"""File formats: binary PGM rasters and flat float64 model checkpoints."""

from __future__ import annotations

import json
import os
import re
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

CHECKPOINT_MAGIC = b"KLPW"
CHECKPOINT_VERSION = 1


def write_pgm(path, samples: np.ndarray) -> None:
    """Write a binary (P5) PGM. uint8 arrays get maxval 255, anything else is stored as 16-bit."""
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {samples.shape}")
    if samples.dtype == np.uint8:
        maxval, payload = 255, samples.tobytes()
    else:
        if samples.min() < 0 or samples.max() > 65535:
            raise ValueError("16-bit PGM samples must lie in [0, 65535]")
        maxval, payload = 65535, samples.astype(">u2").tobytes()
    h, w = samples.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    body = data[m.end():]
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    if len(body) < n:
        raise ValueError(f"{path}: truncated PGM payload ({len(body)} of {n} bytes)")
    arr = np.frombuffer(body[:n], dtype=dtype).reshape(h, w)
    return arr.astype(np.uint16) if maxval >= 256 else arr.copy()


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    """Store named float64 arrays as ``magic | u32 header length | JSON header | raw data``.

    The header records the format version, ``meta`` (model kind, config,
    layer list) and the name and shape of every array in storage order.
    """
    names = list(arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = 8 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = data[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated data for tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * count
    return arrays, header["meta"]
