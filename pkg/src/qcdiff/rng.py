"""Deterministic named random streams.

All randomness in the pipeline derives from a single root seed through
named sub-streams ("data", "train", "sample:3", ...) backed by the
counter-based Philox generator, so independent streams can be split
without coordination and every run is reproducible from its config.
"""

import hashlib

import numpy as np

__all__ = ["stream", "split"]


def _name_digest(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Return the generator for sub-stream `name` under `root_seed`."""
    seq = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, _name_digest(name)])
    return np.random.Generator(np.random.Philox(seq))


def split(root_seed: int, name: str, n: int) -> list[np.random.Generator]:
    """Split a named stream into `n` independent child generators."""
    return [stream(root_seed, f"{name}:{i}") for i in range(n)]
