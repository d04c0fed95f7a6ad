"""SGX leaf numbering.

ENCLS leaves keep their SGX numbers; ENCLU leaves are offset by 0x100 so one
integer space covers both.  The 0x2xx range names privileged operations an
enclave might try to reach through ``syscall``; the monitor never routes them.
"""
from __future__ import annotations

import enum


class Leaf(enum.IntEnum):
    ECREATE = 0x00
    EADD = 0x01
    EINIT = 0x02
    EREMOVE = 0x03
    EEXTEND = 0x06
    EREPORT = 0x100
    EGETKEY = 0x101
    EENTER = 0x102
    ERESUME = 0x103
    EEXIT = 0x104
    WRMSR = 0x200
    VMGEXIT = 0x201
    RMPADJUST = 0x202
    SNP_REPORT_REQ = 0x203
    MSG_KEY_REQ = 0x204

    @classmethod
    def lookup(cls, token: str | int) -> int:
        """Leaf number from a name or an integer literal; unknown integers pass through."""
        if isinstance(token, int):
            return token
        token = token.strip()
        try:
            return cls[token.upper()].value
        except KeyError:
            return int(token, 0)


DRIVER_LEAVES = frozenset({Leaf.ECREATE, Leaf.EADD, Leaf.EEXTEND, Leaf.EINIT,
                           Leaf.EENTER, Leaf.ERESUME, Leaf.EREMOVE})
ENCLAVE_LEAVES = frozenset({Leaf.EEXIT, Leaf.EREPORT, Leaf.EGETKEY})
PRIVILEGED_LEAVES = frozenset({Leaf.WRMSR, Leaf.VMGEXIT, Leaf.RMPADJUST,
                               Leaf.SNP_REPORT_REQ, Leaf.MSG_KEY_REQ})


def leaf_name(value: int) -> str:
    try:
        return Leaf(value).name
    except ValueError:
        return f"{value:#x}"
