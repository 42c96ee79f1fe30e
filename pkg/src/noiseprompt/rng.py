"""Seeded, counter-based Gaussian generation.

All randomness in the project flows through :class:`RngStream`, a thin
(seed, counter) pair on top of numpy's Philox 4x64 bit generator.  Each
draw keys Philox with ``(seed, counter)`` and then bumps the counter, so a
stream can be reconstructed from two integers, draws are independent of
call order across streams, and identical (seed, counter) pairs reproduce
identical bytes on every platform numpy supports.

Named streams are derived from a single global seed with
:func:`derive_stream`, which hashes the purpose string through SHA-256.
This keeps collection, training and evaluation reproducible in isolation:
no subcommand has to replay another one's draws to be deterministic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = ["RngStream", "derive_stream", "gaussian", "uniform"]

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    """Restartable random stream identified by (seed, counter).

    seed is the Philox key root; counter advances by one per draw.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64


def derive_stream(global_seed: int, name: str) -> RngStream:
    """Derive an independent named stream from a single global seed.

    The stream seed is the first 8 bytes of SHA-256 over the global seed
    and the purpose name, so distinct names give unrelated Philox keys.
    """
    digest = hashlib.sha256(
        int(global_seed).to_bytes(8, "little", signed=False) + name.encode("utf-8")
    ).digest()
    return RngStream(seed=int.from_bytes(digest[:8], "little"))


def _generator(stream: RngStream) -> np.random.Generator:
    key = np.array([stream.seed, stream.counter], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian(stream: RngStream, shape) -> np.ndarray:
    """Draw i.i.d. standard-normal fp64 entries and advance the stream."""
    gen = _generator(stream)
    stream.counter = (stream.counter + 1) & _MASK64
    return gen.standard_normal(size=shape, dtype=np.float64)


def uniform(stream: RngStream, shape=None) -> np.ndarray:
    """Draw uniform [0, 1) fp64 entries and advance the stream."""
    gen = _generator(stream)
    stream.counter = (stream.counter + 1) & _MASK64
    return gen.random(size=shape, dtype=np.float64)
