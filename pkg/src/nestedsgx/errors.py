"""Exception hierarchy and fault values shared across the simulator.

Faults raised by the memory layer (``PageFault``, ``RmpFault``) are plain
values; everything that aborts an operation is an exception deriving from
:class:`SimError`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass


class ExceptionKind(enum.IntEnum):
    """Architectural exceptions, numbered after their x86 vectors."""

    INVALID_OPCODE = 6
    GENERAL_PROTECTION = 13
    PAGE_FAULT = 14
    RMP_FAULT = 29
    TIMER = 32

    @property
    def label(self) -> str:
        return _EXC_LABELS[self]

    @classmethod
    def from_label(cls, name: str) -> "ExceptionKind":
        for kind, label in _EXC_LABELS.items():
            if label.lower() == name.lower():
                return kind
        raise ValueError(f"unknown exception kind {name!r}")


_EXC_LABELS = {
    ExceptionKind.INVALID_OPCODE: "InvalidOpcode",
    ExceptionKind.GENERAL_PROTECTION: "GeneralProtection",
    ExceptionKind.PAGE_FAULT: "PageFault",
    ExceptionKind.RMP_FAULT: "RmpFault",
    ExceptionKind.TIMER: "Timer",
}


@dataclass(frozen=True)
class PageFault:
    gva: int
    access: int
    kind = ExceptionKind.PAGE_FAULT


@dataclass(frozen=True)
class RmpFault:
    spa: int
    vmpl: int
    access: int
    kind = ExceptionKind.RMP_FAULT


class SimError(Exception):
    """Base class for every simulator error."""


class MemTrap(SimError):
    """Raised by address-space accessors so interpreters can unwind to a trap."""

    def __init__(self, kind: ExceptionKind, fault: object = None) -> None:
        super().__init__(f"{kind.label}: {fault}")
        self.kind = kind
        self.fault = fault


# mem
class SizeError(SimError):
    pass


class LayoutError(SimError):
    pass


class AlreadyMapped(SimError):
    pass


class ImmutableMapping(SimError):
    pass


class AliasError(SimError):
    """A guest-physical page would be mapped by two system-physical pages."""


class PrivilegeFault(SimError):
    pass


# vcpu
class ProtocolError(SimError):
    pass


class DecodeError(SimError):
    pass


class DoubleFault(SimError):
    pass


class HypervisorStall(SimError):
    """The host refused to (or could not) run the requested VMPL."""


# monitor
class EpcExhausted(SimError):
    pass


class AlignmentError(SimError):
    pass


class StateError(SimError):
    pass


class RangeError(SimError):
    pass


class UnmappedError(SimError):
    pass


class NoTcsError(SimError):
    pass


class TcsBusy(SimError):
    pass


class SsaOverflow(SimError):
    pass


class NoPendingSsa(SimError):
    pass


class ThreadsActive(SimError):
    pass


class BadEntry(SimError):
    pass


class GeneralProtection(BadEntry):
    """Control transfer into the monitor at an address other than LSTAR."""


# guest
class InvalidLeaf(SimError):
    pass


# attest
class AuthError(SimError):
    pass


class ReplayError(SimError):
    pass


class VmplDenied(SimError):
    pass


class ChannelError(SimError):
    pass


class BundleError(SimError):
    pass


# cli
class ParseError(SimError):
    def __init__(self, message: str, *, source: str | None = None,
                 field: str | None = None, line: int | None = None) -> None:
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.message = message
        self.source = source
        self.field = field
        self.line = line


def error_registry() -> dict[str, type[SimError]]:
    """Map class names to classes so errors can cross the parameter channel."""
    out: dict[str, type[SimError]] = {}
    stack: list[type[SimError]] = [SimError]
    while stack:
        cls = stack.pop()
        out[cls.__name__] = cls
        stack.extend(cls.__subclasses__())
    return out
