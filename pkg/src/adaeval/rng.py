"""Deterministic counter-based PRNG used everywhere randomness is needed.

The generator is SplitMix64, written out here so the stream is reproducible
from this description alone, in any language:

    state transition:  s_{k} = (seed + k * 0x9E3779B97F4A7C15)  mod 2^64
    output function:   z = s_k
                       z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9  mod 2^64
                       z = (z XOR (z >> 27)) * 0x94D049BB133111EB  mod 2^64
                       out_k = z XOR (z >> 31)

The k-th output (k = 1, 2, ...) depends only on (seed, k), so blocks of
outputs vectorize and independent streams never interact. Derived quantities
are pinned as follows:

  * uniform double in [0, 1):  (out_k >> 11) * 2**-53
  * gaussians: Box-Muller on consecutive uniform pairs (u1, u2) taken in
    stream order, with u1 clamped to at least 2**-53;
        r  = sqrt(-2 ln u1)
        z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)
    outputs are z0_0, z1_0, z0_1, z1_1, ... truncated to the request size.
  * bounded integer in [0, n): out_k mod n (n far below 2^64, so the modulo
    bias is negligible; the convention matters only for reproducibility).

The 64-bit integer stream is exact by construction. The float transforms use
IEEE-754 double arithmetic; sqrt/log/cos/sin come from the platform libm, the
one place where a foreign reimplementation could differ in the last ulp.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_INV_2_53 = float(2.0 ** -53)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Stateful view over the SplitMix64 stream for one seed.

    Instances only remember how many outputs have been consumed, so a
    generator can be reconstructed from (seed, counter).
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def next_uint64(self, n: int) -> np.ndarray:
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        states = (np.uint64(self.seed) + ks * _GOLDEN) & _MASK
        return _finalize(states)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def gaussian(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller (see module docstring)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = np.maximum(u[0::2], _INV_2_53)
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound) via modulo reduction."""
        if bound <= 0:
            raise ValueError(f"integers: bound must be positive, got {bound}")
        return (self.next_uint64(n) % np.uint64(bound)).astype(np.int64)

    def shuffle(self, items: np.ndarray) -> np.ndarray:
        """Fisher-Yates shuffle, returning a new array."""
        out = np.array(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            out[i], out[j] = out[j], out[i]
        return out

    def sample_without_replacement(self, k: int, n: int) -> np.ndarray:
        """k distinct integers from [0, n), in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct values from range({n})")
        pool = np.arange(n)
        for i in range(k):
            j = i + int(self.integers(1, n - i)[0])
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
