"""Counter-based deterministic random streams.

Every random draw in this package comes from a keyed counter stream:
``value(key, counter)`` is a pure function, so any draw can be recomputed
from (seed, purpose tag, index) alone. This makes sampling reproducible
across platforms, insensitive to evaluation order, and safe to parallelize.

Keys are derived from an integer seed plus a purpose tag via BLAKE2b;
per-counter values use the splitmix64 finalizer over a Weyl sequence.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)


def derive_key(seed: int, tag: str) -> int:
    """Derive a 64-bit stream key from an integer seed and a purpose tag."""
    h = hashlib.blake2b(
        tag.encode("utf-8"), digest_size=8, key=(seed & _MASK64).to_bytes(8, "little")
    )
    return int.from_bytes(h.digest(), "little")


def _mix(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def unit_value(key: int, counter: int) -> float:
    """The counter-th uniform [0, 1) value of the stream with this key."""
    word = _mix((key + (counter + 1) * _GOLDEN) & _MASK64)
    return (word >> 11) * _INV_2_53


def unit_values(key: int, start: int, count: int) -> np.ndarray:
    """Vectorized ``unit_value`` for counters start .. start+count-1.

    Bit-identical to the scalar path; uint64 arithmetic wraps mod 2**64.
    """
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    x = np.uint64(key & _MASK64) + counters * np.uint64(_GOLDEN)
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MIX1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MIX2)
    x ^= x >> np.uint64(31)
    return (x >> np.uint64(11)).astype(np.float64) * _INV_2_53


class CounterStream:
    """Sequential view over a keyed counter stream.

    Draws advance an internal counter; two streams with the same
    (seed, tag) replay identical sequences.
    """

    def __init__(self, seed: int, tag: str):
        self.key = derive_key(seed, tag)
        self.counter = 0

    def next_unit(self) -> float:
        v = unit_value(self.key, self.counter)
        self.counter += 1
        return v

    def next_units(self, count: int) -> np.ndarray:
        v = unit_values(self.key, self.counter, count)
        self.counter += count
        return v

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.next_unit() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
