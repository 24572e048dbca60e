"""Checkpointable counter-based randomness.

Backed by numpy's Philox bit generator: its whole state is a 128-bit counter
plus a key, so a checkpoint is a few dozen bytes of JSON.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np


class RngStateError(ValueError):
    """Raised when a serialized RNG state fails validation."""


@dataclass(frozen=True)
class RngState:
    kind: str
    payload: bytes
    draws: int
    checksum: int

    def to_bytes(self) -> bytes:
        head = json.dumps({"kind": self.kind, "draws": self.draws, "crc": self.checksum})
        return head.encode() + b"\n" + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RngState":
        try:
            head, payload = blob.split(b"\n", 1)
            meta = json.loads(head)
            return cls(meta["kind"], payload, int(meta["draws"]), int(meta["crc"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise RngStateError(f"cannot parse RNG state: {exc}") from exc


def _encode(state: dict) -> bytes:
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__array__": v.dtype.str, "values": [int(x) for x in v]}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return json.dumps(conv(state), sort_keys=True).encode()


def _decode(payload: bytes) -> dict:
    def conv(v):
        if isinstance(v, dict):
            if "__array__" in v:
                return np.array(v["values"], dtype=np.dtype(v["__array__"]))
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(json.loads(payload))


class Rng:
    """Seeded generator whose position can be saved and restored exactly."""

    kind = "philox"

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._seq = seq
        self._gen = np.random.Generator(np.random.Philox(seq))
        self.draws = 0

    def uniform(self, shape=()) -> np.ndarray:
        out = self._gen.random(shape)
        self.draws += int(np.prod(shape)) if shape != () else 1
        return out

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        out = self._gen.normal(0.0, scale, shape)
        self.draws += int(np.prod(shape)) if shape != () else 1
        return out

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        out = self._gen.integers(low, high, shape)
        self.draws += int(np.prod(shape)) if shape != () else 1
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def split(self, n: int) -> list["Rng"]:
        """Independent child streams; does not advance this generator."""
        return [Rng(child) for child in self._seq.spawn(n)]

    def save(self) -> RngState:
        payload = _encode(self._gen.bit_generator.state)
        return RngState(self.kind, payload, self.draws, zlib.crc32(payload))

    def restore(self, state: RngState) -> None:
        if state.kind != self.kind:
            raise RngStateError(f"state kind {state.kind!r} does not match {self.kind!r}")
        if zlib.crc32(state.payload) != state.checksum:
            raise RngStateError("RNG state checksum mismatch (corrupted bytes)")
        try:
            self._gen.bit_generator.state = _decode(state.payload)
        except (ValueError, KeyError, TypeError) as exc:
            raise RngStateError(f"cannot restore RNG state: {exc}") from exc
        self.draws = state.draws


def rng_save(rng: Rng) -> RngState:
    return rng.save()


def rng_restore(rng: Rng, state: RngState) -> None:
    rng.restore(state)
