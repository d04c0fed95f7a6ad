"""Wire format of the driver <-> monitor parameter channel page.

Request:  b"NSGQ" | leaf u32 | nargs u32 | nargs x u64
Result:   b"NSGR" | status u32 | kind u32 | nvals u32 | nvals x u64
          | error-name length u16 | name | message length u16 | message

``status`` is 0 on success; on failure the error class name and message are
carried so the driver can re-raise the monitor's error unchanged.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .errors import ProtocolError, SimError, error_registry

REQ_MAGIC = b"NSGQ"
RES_MAGIC = b"NSGR"
MAX_ARGS = 16


class ResultKind(enum.IntEnum):
    LEAF_DONE = 0
    EEXIT_RETURN = 1
    AEX_DELIVERY = 2


@dataclass(frozen=True)
class DriverRequest:
    leaf: int
    args: tuple[int, ...] = ()

    def encode(self) -> bytes:
        return struct.pack(f"<4sII{len(self.args)}Q", REQ_MAGIC, self.leaf, len(self.args), *self.args)

    @classmethod
    def decode(cls, raw: bytes) -> "DriverRequest":
        magic, leaf, nargs = struct.unpack_from("<4sII", raw)
        if magic != REQ_MAGIC or nargs > MAX_ARGS:
            raise ProtocolError("malformed driver request")
        return cls(leaf, struct.unpack_from(f"<{nargs}Q", raw, 12))


@dataclass(frozen=True)
class LeafResult:
    kind: ResultKind = ResultKind.LEAF_DONE
    values: tuple[int, ...] = ()
    error: str | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.error is None

    @classmethod
    def failure(cls, exc: SimError) -> "LeafResult":
        return cls(error=type(exc).__name__, message=str(exc)[:1000])

    def raise_error(self) -> None:
        if self.error is not None:
            cls = error_registry().get(self.error, SimError)
            raise cls(self.message)

    def encode(self) -> bytes:
        name = (self.error or "").encode()
        msg = self.message.encode()
        return (struct.pack(f"<4sIII{len(self.values)}Q", RES_MAGIC, 0 if self.ok else 1, self.kind,
                            len(self.values), *self.values)
                + struct.pack("<H", len(name)) + name + struct.pack("<H", len(msg)) + msg)

    @classmethod
    def decode(cls, raw: bytes) -> "LeafResult":
        magic, status, kind, nvals = struct.unpack_from("<4sIII", raw)
        if magic != RES_MAGIC or nvals > MAX_ARGS:
            raise ProtocolError("malformed monitor result")
        off = 16
        values = struct.unpack_from(f"<{nvals}Q", raw, off)
        off += 8 * nvals
        (nlen,) = struct.unpack_from("<H", raw, off)
        name = raw[off + 2:off + 2 + nlen].decode()
        off += 2 + nlen
        (mlen,) = struct.unpack_from("<H", raw, off)
        msg = raw[off + 2:off + 2 + mlen].decode()
        return cls(ResultKind(kind), tuple(values), name if status else None, msg)


def digest_to_words(digest: bytes) -> tuple[int, ...]:
    return struct.unpack(f"<{len(digest) // 8}Q", digest)


def words_to_digest(words) -> bytes:
    return struct.pack(f"<{len(words)}Q", *words)
