"""Seeded random streams.

Parameters draw from a stream keyed by their qualified name, so the initial
value of a weight depends only on (seed, name) and not on construction order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RngState:
    seed: int
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def keyed(self, key: str) -> np.random.Generator:
        """Independent generator for ``key``; does not advance this stream."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(key.encode("utf-8"))])
        return np.random.Generator(np.random.PCG64(ss))

    def uniform(self, low, high, shape) -> np.ndarray:
        self.counter += 1
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        self.counter += 1
        return (self._gen.standard_normal(size=shape) * std).astype(np.float32)

    def get_state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter, "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        rng = cls(int(state["seed"]), int(state.get("counter", 0)))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng
