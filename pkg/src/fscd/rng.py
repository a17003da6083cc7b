"""Counter-based random streams.

Every stochastic choice in the package (initialisation, shuffling, dropout
masks, depth-dropout draws, synthetic scenes) is drawn from an
:class:`RngStream`.  A stream is an immutable ``(base_seed, stream_id,
counter)`` triple backed by the Philox counter-based generator, so the
draws depend only on the triple and never on thread scheduling.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _label_to_int(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("stream labels must be int or str")
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK64
    if isinstance(label, str):
        # builtin hash() is salted per process; use a stable digest
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported stream label type: {type(label).__name__}")


@dataclass(frozen=True)
class RngStream:
    base_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("base_seed", "stream_id", "counter"):
            value = getattr(self, name)
            if not 0 <= int(value) <= _MASK64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator positioned at this stream's counter."""
        bitgen = np.random.Philox(
            key=np.array([self.base_seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def child(self, *labels) -> "RngStream":
        """Derive an independent stream keyed by ``labels``.

        Children share ``base_seed`` and get a new ``stream_id`` obtained by
        folding the labels into the parent's id with splitmix64.
        """
        sid = self.stream_id
        for label in labels:
            sid = _splitmix64(sid ^ _splitmix64(_label_to_int(label)))
        return RngStream(self.base_seed, sid, 0)

    def advance(self, n: int = 1) -> "RngStream":
        return RngStream(self.base_seed, self.stream_id, (self.counter + n) & _MASK64)


def as_stream(seed) -> RngStream:
    if isinstance(seed, RngStream):
        return seed
    return RngStream(int(seed) & _MASK64)
