"""Binary checkpoint container for model parameters and config.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header
(format version, config snapshot, iteration, seed record, array index),
then all arrays concatenated as little-endian float64. Writes go to a
temporary file and are renamed into place, so a crash never leaves a
partial checkpoint at the target path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"TRJCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    iteration: int = 0
    seed: Optional[int] = None
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.arrays)) != len(self.arrays):
            raise CheckpointError("duplicate parameter names")
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in self.arrays.items()}


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    index = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps(
        {
            "version": ckpt.version,
            "config": ckpt.config,
            "iteration": ckpt.iteration,
            "seed": ckpt.seed,
            "extra": ckpt.extra,
            "dtype": "<f8",
            "index": index,
            "total": offset,
        },
        sort_keys=True,
    ).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for arr in ckpt.arrays.values():
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise CheckpointError("truncated header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header_bytes = f.read(header_len)
        if len(header_bytes) != header_len:
            raise CheckpointError("truncated header")
        header = json.loads(header_bytes.decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"format version mismatch: file {header.get('version')}, expected {FORMAT_VERSION}"
            )
        payload = f.read()
    total = header["total"]
    if len(payload) != total * 8:
        raise CheckpointError(
            f"truncated payload: expected {total * 8} bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for entry in header["index"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = flat[entry["offset"] : entry["offset"] + size].reshape(shape).copy()
    return Checkpoint(
        config=header["config"],
        arrays=arrays,
        iteration=header["iteration"],
        seed=header["seed"],
        version=header["version"],
        extra=header.get("extra", {}),
    )


def check_config_match(expected: dict, found: dict, prefix: str = "") -> None:
    """Raise naming the first differing field between two config snapshots."""
    keys = sorted(set(expected) | set(found))
    for key in keys:
        where = f"{prefix}{key}"
        if key not in expected:
            raise CheckpointError(f"config mismatch: unexpected field {where!r}")
        if key not in found:
            raise CheckpointError(f"config mismatch: missing field {where!r}")
        a, b = expected[key], found[key]
        if isinstance(a, dict) and isinstance(b, dict):
            check_config_match(a, b, prefix=f"{where}.")
        elif isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
            if list(a) != list(b):
                raise CheckpointError(f"config mismatch in field {where!r}: {a!r} != {b!r}")
        elif a != b:
            raise CheckpointError(f"config mismatch in field {where!r}: {a!r} != {b!r}")
