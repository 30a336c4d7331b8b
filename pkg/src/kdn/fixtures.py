"""Synthetic caches used by the codec benchmarks and the test suite."""

from __future__ import annotations

import numpy as np

from .model import KvCache


def smooth_cache(
    n_layers: int = 2,
    n_heads: int = 2,
    n_tokens: int = 384,
    d_head: int = 8,
) -> KvCache:
    """Token-smooth synthetic cache: values drift slowly along the token
    axis, so quantized deltas are near zero and grids repeat across channels.
    """
    t = np.arange(n_tokens, dtype=np.float64)
    vals = np.sin(0.01 * (t + 1.0)).astype(np.float32)
    k = np.broadcast_to(vals[None, None, :, None], (n_layers, n_heads, n_tokens, d_head)).copy()
    v = np.broadcast_to(np.cos(0.01 * (t + 1.0)).astype(np.float32)[None, None, :, None], k.shape).copy()
    return KvCache(k, v, start_pos=0)


def random_cache(
    n_layers: int = 2,
    n_heads: int = 2,
    n_tokens: int = 64,
    d_head: int = 8,
    seed: int = 0,
    scale: float = 1.0,
) -> KvCache:
    rng = np.random.default_rng(seed)
    shape = (n_layers, n_heads, n_tokens, d_head)
    return KvCache(
        (rng.standard_normal(shape) * scale).astype(np.float32),
        (rng.standard_normal(shape) * scale).astype(np.float32),
        start_pos=0,
    )
