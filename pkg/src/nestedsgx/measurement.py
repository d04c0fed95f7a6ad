"""Enclave measurement log (the MRENCLAVE analog).

Records follow the SGX convention: every record is 64 bytes and starts with
an 8-byte tag.

    ECREATE  tag | ssa_frame_size u32 | size u64 | 44 zero bytes
    EADD     tag | page offset u64 | SECINFO flags u64 | 40 zero bytes
    EEXTEND  tag | chunk offset u64 | 48 zero bytes, then 4 data records
             carrying the 256 measured bytes

SECINFO flags: bit0 R, bit1 W, bit2 X, bits 8..15 page type.
"""
from __future__ import annotations

import hashlib
import struct

from .errors import StateError

RECORD_SIZE = 64
EEXTEND_CHUNK = 256
TAG_ECREATE = b"ECREATE\0"
TAG_EADD = b"EADD\0\0\0\0"
TAG_EEXTEND = b"EEXTEND\0"

_ECREATE = struct.Struct("<8sIQ44x")
_EADD = struct.Struct("<8sQQ40x")
_EEXTEND = struct.Struct("<8sQ48x")


def secinfo_flags(page_type: int, perm_bits: int) -> int:
    return (perm_bits & 0x7) | ((page_type & 0xFF) << 8)


class MeasurementLog:
    """Append-only list of 64-byte records with a running SHA-256."""

    def __init__(self) -> None:
        self.records: list[bytes] = []
        self._hash = hashlib.sha256()
        self.frozen = False

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: bytes) -> None:
        if self.frozen:
            raise StateError("measurement log is frozen")
        if len(record) != RECORD_SIZE:
            raise ValueError(f"measurement records are {RECORD_SIZE} bytes, got {len(record)}")
        self.records.append(bytes(record))
        self._hash.update(record)

    def ecreate(self, ssa_frame_size: int, size: int) -> None:
        self.append(_ECREATE.pack(TAG_ECREATE, ssa_frame_size, size))

    def eadd(self, offset: int, page_type: int, perm_bits: int) -> None:
        self.append(_EADD.pack(TAG_EADD, offset, secinfo_flags(page_type, perm_bits)))

    def eextend(self, offset: int, chunk: bytes) -> None:
        if len(chunk) != EEXTEND_CHUNK:
            raise ValueError("EEXTEND measures exactly 256 bytes")
        self.append(_EEXTEND.pack(TAG_EEXTEND, offset))
        for i in range(0, EEXTEND_CHUNK, RECORD_SIZE):
            self.append(chunk[i:i + RECORD_SIZE])

    def freeze(self) -> bytes:
        self.frozen = True
        return self.digest()

    def digest(self) -> bytes:
        return self._hash.copy().digest()
