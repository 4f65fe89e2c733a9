"""Counter-based random state shared by every stochastic step."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngState:
    """A (seed, counter) pair naming a reproducible stream of draws.

    The stream is generated by numpy's Philox counter-based generator, whose
    output depends only on the key and counter, so identical states give
    identical draws on every platform.
    """

    seed: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed & (2**64 - 1), counter=self.counter))

    def advance(self, steps: int = 1) -> "RngState":
        return RngState(self.seed, self.counter + steps)

    def child(self, tag: int | str) -> "RngState":
        """Independent stream derived from this one (e.g. one per example or per purpose)."""
        if isinstance(tag, str):
            tag = zlib.crc32(tag.encode()) + 2**32
        mixed = np.random.SeedSequence([self.seed & (2**63 - 1), self.counter, tag]).generate_state(1, np.uint64)[0]
        return RngState(int(mixed), 0)
