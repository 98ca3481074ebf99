"""Named random streams derived from one root seed.

Each consumer (mask sampling, initialization, scene generation, densification)
draws from its own PCG64 stream, so adding draws in one never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK = "mask"
INIT = "init"
SCENE = "scene"
DENSIFY = "densify"


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            seq = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))
            self._streams[name] = np.random.Generator(np.random.PCG64(seq))
        return self._streams[name]
