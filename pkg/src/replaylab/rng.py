"""Deterministic pseudo-random streams.

Every source of randomness in a trial (buffer updates, data order, weight
generation, batch sampling, model init) gets its own named stream so that
consuming values from one never shifts another.  Streams are SplitMix64
generators whose initial state is ``seed XOR label_hash(label)``, which makes
any stream reproducible from its (seed, label) pair alone.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_PRIME = 0x100000001B3

_INV_2_53 = 1.0 / (1 << 53)


def label_hash(label: str) -> int:
    """FNV-1a-style 64-bit hash of a stream label.

    Accumulation starts from 0 rather than the usual FNV offset basis so the
    empty label is the identity: stream (seed, "") is plain SplitMix64(seed).
    """
    h = 0
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class RngStream:
    """SplitMix64 generator with a label-split seed.

    Single-owner: never share one stream between concurrent actors.
    """

    __slots__ = ("state", "label", "_gauss_cache")

    def __init__(self, seed: int, label: str = ""):
        self.state = (seed ^ label_hash(label)) & _MASK64
        self.label = label
        self._gauss_cache: float | None = None

    def next_u64(self) -> int:
        """One SplitMix64 step: advance the state, return the mixed output."""
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_f64(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def next_below(self, n: int) -> int:
        """Integer in [0, n) via modulo reduction."""
        return self.next_u64() % n

    def next_gaussian(self) -> float:
        """Standard normal via trigonometric Box-Muller.

        Consumes exactly two uniforms per pair of gaussians; the second
        gaussian of a pair is cached and returned by the next call.
        """
        cached = self._gauss_cache
        if cached is not None:
            self._gauss_cache = None
            return cached
        # 1 - u in (0, 1] keeps the log argument away from zero.
        r = math.sqrt(-2.0 * math.log(1.0 - self.next_f64()))
        theta = 2.0 * math.pi * self.next_f64()
        self._gauss_cache = r * math.sin(theta)
        return r * math.cos(theta)


def new_stream(seed: int, label: str = "") -> RngStream:
    return RngStream(seed, label)
