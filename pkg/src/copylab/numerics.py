"""Dense float64 helpers shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays in row-major order. Random
streams come from numpy's Philox generator, a counter-based bit generator whose
output for a given key is identical on every platform; independent streams are
derived from ``(seed, stream_id)`` through ``SeedSequence``.
"""

from __future__ import annotations

import numpy as np

NEG_INF = float("-inf")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox stream keyed by ``(seed, stream)``."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream id must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def split_seeds(seed: int, count: int) -> list[int]:
    """Child seeds for ``count`` parallel workers, reproducible from ``seed``."""
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(count)]


def softmax_stable(z, axis: int = -1) -> np.ndarray:
    """Softmax with the max subtracted first; ``-inf`` entries map to exactly 0."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    if np.any(m == NEG_INF):
        raise ValueError("empty support: every entry is -inf")
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def argmax_low_tiebreak(z) -> int:
    z = np.asarray(z)
    if z.size == 0:
        raise ValueError("argmax of an empty vector")
    # np.argmax returns the first maximal index
    return int(np.argmax(z))
