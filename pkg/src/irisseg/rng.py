"""Portable, fully specified pseudo-random generator for split plans.

Split plans must be reproducible from a 64-bit seed across machines and
reimplementations, so this module pins every constant instead of relying on
a library generator whose stream is an implementation detail.

Generator: xoshiro256** (Blackman & Vigna).  State: four 64-bit words.
    next():
        result = rotl(s1 * 5, 7) * 9
        t  = s1 << 17
        s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3
        s2 ^= t
        s3  = rotl(s3, 45)
    (all arithmetic mod 2**64, rotl = 64-bit left rotation)

Seeding: splitmix64 applied four times to the seed.
    splitmix64(state):
        state = (state + 0x9E3779B97F4A7C15) mod 2**64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
        return state, z ^ (z >> 31)

Bounded draws use the multiply-shift mapping randbelow(n) = (next() * n) >> 64,
and shuffles are the descending Fisher-Yates: for i = len-1 .. 1 swap
seq[i] with seq[randbelow(i + 1)].
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** stream seeded with splitmix64 (see module docstring)."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, word = _splitmix64(state)
            s.append(word)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via the multiply-shift mapping."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        return (self.next_u64() * n) >> 64

    def shuffle(self, seq: list) -> None:
        """In-place descending Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randbelow(i + 1)
            seq[i], seq[j] = seq[j], seq[i]
