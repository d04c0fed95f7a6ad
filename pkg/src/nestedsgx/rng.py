"""Randomness source for key generation.

A seeded :class:`Drbg` makes every key, nonce and signature byte-stable
across runs; with ``seed=None`` it reads the OS entropy pool instead.
"""
from __future__ import annotations

import hashlib
import os


class Drbg:
    def __init__(self, seed: int | bytes | str | None = None, *, _stream: bytes | None = None) -> None:
        if _stream is not None:
            self._seed: bytes | None = _stream
        elif seed is None:
            self._seed = None
        elif isinstance(seed, int):
            self._seed = b"int:" + str(seed).encode()
        elif isinstance(seed, str):
            self._seed = b"str:" + seed.encode()
        else:
            self._seed = b"raw:" + bytes(seed)
        self._counter = 0

    @property
    def deterministic(self) -> bool:
        return self._seed is not None

    def bytes(self, n: int) -> bytes:
        if self._seed is None:
            return os.urandom(n)
        self._counter += 1
        return hashlib.shake_256(self._seed + self._counter.to_bytes(8, "little")).digest(n)

    def child(self, label: str) -> "Drbg":
        """Independent sub-stream; drawing from it never perturbs the parent."""
        if self._seed is None:
            return Drbg(None)
        return Drbg(_stream=hashlib.sha256(self._seed + b"/" + label.encode()).digest())

    def randbelow(self, n: int) -> int:
        nbytes = (n.bit_length() + 7) // 8 + 8
        return int.from_bytes(self.bytes(nbytes), "little") % n
