"""Hierarchical seed derivation from one root seed per run."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, *path: int | str) -> int:
    """Deterministic 63-bit child seed for ``path`` under ``root``.

    String path components are mapped through CRC-32 so names like ``"scene"``
    can be used alongside integer indices.
    """
    key = tuple(zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in path)
    state = np.random.SeedSequence(int(root), spawn_key=key).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
