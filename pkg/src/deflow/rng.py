"""Deterministic counter-based random streams.

Every stochastic operation in this package takes an explicit
:class:`RandomStream`, so a run is a pure function of its seeds.  The
generator is splitmix64 used in counter mode: draw ``i`` of a stream with
key ``k`` is ``mix64(k + i * GOLDEN)``, which vectorizes over numpy uint64
arrays and never depends on library version or platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

def _wrap():
    # splitmix64 wraps mod 2**64 by design; silence numpy's overflow warnings
    # locally instead of globally.
    return np.errstate(over="ignore")


def _mix64(x: np.ndarray) -> np.ndarray:
    with _wrap():
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


class RandomStream:
    """A named, forkable random stream.

    The stream state is (key, counter).  ``spawn`` derives an independent
    child stream from the key and a label, so substreams can be laid out by
    purpose ("crops", "noise", iteration number) without coordination.
    """

    def __init__(self, seed: int, _counter: int = 0):
        self.key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = int(_counter)

    def spawn(self, *labels) -> "RandomStream":
        """Child stream keyed by this stream's key and the labels."""
        h = hashlib.sha256()
        h.update(int(self.key).to_bytes(8, "little"))
        for label in labels:
            h.update(repr(label).encode())
        child_seed = int.from_bytes(h.digest()[:8], "little")
        return RandomStream(child_seed)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with _wrap():
            return _mix64(self.key + idx * GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """float64 samples in [0, 1), 53-bit resolution."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        bits = self._raw(n) >> np.uint64(11)
        out = bits.astype(np.float64) * (2.0 ** -53)
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0):
        """Gaussian samples via Box-Muller on paired uniforms."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        bits = self._raw(2 * m)
        # u1 in (0, 1] so log() is finite
        u1 = ((bits[:m] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * (2.0 ** -53)
        u2 = (bits[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, shape=()):
        """Uniform integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape if shape else (1,))
        out = (np.floor(u * (high - low)) + low).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        u = self.uniform(shape if shape else (1,))
        out = u < p
        return out.reshape(shape) if shape else bool(out[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
