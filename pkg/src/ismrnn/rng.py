"""Named, counter-based random streams.

Every consumer of randomness asks for a stream by name; the stream is a
Philox generator keyed by ``(seed, name)``, so adding a new consumer never
shifts the numbers drawn by an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, stream: str, *counter: int) -> np.random.Generator:
    """Return an independent generator for ``stream`` under ``seed``.

    Extra integers (epoch, step, ...) select a fresh sub-stream, which keeps
    e.g. the epoch-``k`` shuffle a pure function of ``(seed, k)``.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    key.extend(int(c) & 0xFFFFFFFF for c in counter)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
