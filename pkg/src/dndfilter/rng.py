"""Deterministic, splittable random streams.

All randomness in the package flows through `Rng`, a thin wrapper around
numpy's PCG64 generator seeded via `SeedSequence`. PCG64 is a counter-based
LCG-family generator with a fixed cross-platform bit stream; numpy keeps the
stream stable for a given algorithm version.

Substream construction: `substream(*names)` derives a child SeedSequence from
the root entropy and a spawn key built from the SHA-256 digest of the names.
Distinct names give distinct spawn keys, hence independently-seeded PCG64
states; the generator's 2^128 period and seed-derivation guarantees make
overlap within 2^32 draws between two named substreams negligible
(probability < 2^-64). Substreams are derived from the seed material only,
never from generator state, so derivation order does not matter.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def _key_words(name) -> tuple[int, ...]:
    """Stable (non-salted) uint32 words identifying a substream name."""
    if isinstance(name, (int, np.integer)):
        v = int(name) & (2**64 - 1)
        return (v & 0xFFFFFFFF, v >> 32)
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return struct.unpack("<2I", digest[:8])


def mix_seed(*parts) -> int:
    """Fold several integers/strings into one stable 63-bit seed."""
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return struct.unpack("<Q", h.digest()[:8])[0] >> 1


class Rng:
    """A named, reproducible PCG64 stream with derivable substreams."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def substream(self, *names) -> "Rng":
        key = self._seq.spawn_key
        for n in names:
            key = key + _key_words(n)
        return Rng(self.seed, np.random.SeedSequence(self.seed, spawn_key=key))

    # -- draws ------------------------------------------------------------
    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, shape=(), dtype=np.float32) -> np.ndarray:
        return (low + (high - low) * self._gen.random(shape)).astype(dtype, copy=False)

    def integers(self, low, high, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def bernoulli(self, p, shape=()) -> np.ndarray:
        return self._gen.random(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
