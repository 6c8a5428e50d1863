"""Binary tensor container used for every on-disk artifact.

Layout (little-endian throughout):
    magic   4 bytes  "QDA1"
    version u32
    records, repeated to EOF:
        name_len u32, name (UTF-8), rank u32, dims u32 x rank, payload f32
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, MissingArtifactError

MAGIC = b"QDA1"
FORMAT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], version: int = FORMAT_VERSION):
    """Write a name -> array mapping; insertion order is preserved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", version))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path, expected_version: int = FORMAT_VERSION) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContractError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != expected_version:
            raise ContractError(
                f"{path}: format version {version} does not match expected {expected_version}"
            )
        out: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            payload = f.read(4 * count)
            if len(payload) != 4 * count:
                raise ContractError(f"{path}: truncated payload for tensor '{name}'")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
