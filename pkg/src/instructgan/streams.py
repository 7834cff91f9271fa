"""Seeded counter-based random streams.

Every stochastic operation in the package draws from an explicit
:class:`Stream`.  A stream is addressed by a key path (seed plus any mix of
ints and strings), built on numpy's Philox counter-based bit generator, so the
same key always yields the same draws regardless of what other streams were
consumed before it.  That is what makes training runs bitwise reproducible and
checkpoint resume exact: the stream for step ``s`` is derived from
``(seed, phase, s)``, never from sequential generator state.
"""
from __future__ import annotations

import zlib

import numpy as np

U_EPS = 1e-10  # uniform draws are clamped to (U_EPS, 1-U_EPS) before double logs


def _key_to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream key parts must be int or str, got {type(part)!r}")


class Stream:
    """One addressable random stream; child streams extend the key path."""

    def __init__(self, *key):
        if not key:
            raise ValueError("a stream needs at least a seed")
        self.key = tuple(_key_to_int(p) for p in key)
        self._gen = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=np.random.SeedSequence(list(self.key))))
        return self._gen

    def child(self, *key) -> "Stream":
        s = Stream.__new__(Stream)
        s.key = self.key + tuple(_key_to_int(p) for p in key)
        s._gen = None
        return s

    # draw helpers -----------------------------------------------------------
    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, p=None) -> int:
        """One index in [0, n), optionally weighted."""
        return int(self.generator.choice(n, p=p))

    def gumbel(self, size=None) -> np.ndarray:
        """Gumbel(0,1) via -ln(-ln u), u clamped away from {0,1}."""
        u = np.clip(self.generator.random(size), U_EPS, 1.0 - U_EPS)
        return -np.log(-np.log(u))
