"""Named random streams derived from one master seed.

Each stream is a counter-based Philox generator keyed by a hash of
``(seed, name)``, so draws on one stream never depend on how many draws
another stream has made.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = self._streams[name] = stream(self.seed, name)
        return gen

    __getitem__ = get
