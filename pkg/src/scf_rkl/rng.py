"""Counter-based random streams keyed by (seed, name).

Every tensor gets its own Philox key derived from the seed and a string label,
and element ``i`` of the stream depends only on that key and ``i``. Results do
not depend on the order in which tensors are processed or on thread count.
"""

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> np.ndarray:
    """128-bit Philox key from a 64-bit seed and arbitrary labels."""
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=seed < 0))
    for label in labels:
        h.update(b"\x00" + str(label).encode("utf-8"))
    return np.frombuffer(h.digest(), dtype="<u8").astype(np.uint64)


def uniform(seed: int, n: int, *labels) -> np.ndarray:
    """``n`` doubles in [0, 1) built from 53 random bits each (integer arithmetic only)."""
    words = np.random.Philox(key=stream_key(seed, *labels)).random_raw(n)
    return (words >> np.uint64(11)).astype(np.float64) * (1.0 / 2 ** 53)


def normal(seed: int, n: int, *labels) -> np.ndarray:
    """Approximate standard normals by the sum of 12 uniforms minus 6.

    Uses only addition, so outputs are bit-identical on any IEEE-754 platform.
    The tails are truncated at +/-6, which is irrelevant for fixtures.
    """
    u = uniform(seed, 12 * n, *labels).reshape(n, 12)
    acc = u[:, 0].copy()
    for j in range(1, 12):
        acc += u[:, j]
    return acc - 6.0
