"""Counter-based normal streams keyed by (seed, stream, chunk).

Paths are cut into fixed-size chunks. Each chunk draws from its own Philox
generator, so any path's noise depends only on the seed and its index, never
on how many paths or threads a run uses.
"""
from __future__ import annotations

import numpy as np

from .core import ValidationError

CHUNK_PATHS = 512

STREAM_PATHS = 0
STREAM_FABSDE = 1


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValidationError("BAD_SEED", f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def generator(seed: int, stream: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, chunk])))


def chunk_normals(seed: int, stream: int, chunk: int, shape) -> np.ndarray:
    """Standard normals for one chunk; a shorter leading axis gives a prefix."""
    return generator(seed, stream, chunk).standard_normal(shape)


def chunks(n_paths: int, size: int = CHUNK_PATHS):
    """Yield ``(chunk_index, start, stop)`` covering ``range(n_paths)``."""
    for idx, start in enumerate(range(0, n_paths, size)):
        yield idx, start, min(start + size, n_paths)
