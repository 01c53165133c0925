"""Deterministic random number streams.

Every stochastic component (weight init, dropout, shuffling, corpus
synthesis) draws from a named stream derived from a single 64-bit seed.
The generator is numpy's PCG64; the stream name is hashed with SHA-256
into the seed material, so streams are independent of each other and of
the order in which they are created.  Identical seed + identical call
sequence on a stream yields an identical number sequence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    """A seed plus the (fixed) generator algorithm tag."""

    seed: int
    algorithm: str = "pcg64"

    def stream(self, name: str) -> np.random.Generator:
        """Return an independent generator for the named substream."""
        if self.algorithm != "pcg64":
            raise ValueError(f"unknown rng algorithm: {self.algorithm!r}")
        tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
        seq = np.random.SeedSequence([self.seed & _SEED_MASK, tag])
        return np.random.Generator(np.random.PCG64(seq))
