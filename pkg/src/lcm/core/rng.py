"""Seeded, stream-labelled random numbers.

The generator is numpy's Philox4x64-10 (counter-based). The 128-bit key is
``seed`` in the high word and the first 8 bytes of SHA-256(stream label) in
the low word, so every (seed, label) pair owns an independent stream that
reproduces draw-for-draw.
"""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"
_MASK64 = (1 << 64) - 1


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


class Rng:
    def __init__(self, seed: int, stream: str = "root"):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.stream = stream
        key = (self.seed << 64) | _label_hash(stream)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{label}")

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self.generator.normal(mean, std, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def state(self) -> dict:
        s = self.generator.bit_generator.state
        return {"seed": self.seed, "stream": self.stream, "algorithm": ALGORITHM,
                "counter": [int(c) for c in s["state"]["counter"]],
                "buffer_pos": int(s["buffer_pos"])}

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"
