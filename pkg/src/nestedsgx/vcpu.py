"""Per-VMPL save areas, the GHCB MSR switch protocol, and the host hypervisor.

The hypervisor only ever sees the raw MSR value a guest writes before
VMGEXIT; it picks which VMPL to run but has no handle on any :class:`Vmsa`.
"""
from __future__ import annotations

import enum
import json
import struct
from array import array
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from .errors import DecodeError, DoubleFault, ExceptionKind, PrivilegeFault, ProtocolError
from .mem import NUM_VMPLS, Mode

GHCB_MSR = 0xC001_0130
GHCB_NAE_RUN_VMPL = 0x8000_0018
RUN_VMPL_KIND = GHCB_NAE_RUN_VMPL & 0xFFF
_KIND_MASK = 0xFFF
_VMPL_SHIFT = 32
_VMPL_MASK = 0xFF


@dataclass(frozen=True)
class GhcbMsrRequest:
    raw: int


def encode_msr_request(target_vmpl: int) -> GhcbMsrRequest:
    if not 0 <= target_vmpl < NUM_VMPLS:
        raise ValueError(f"bad VMPL {target_vmpl}")
    return GhcbMsrRequest(RUN_VMPL_KIND | (target_vmpl << _VMPL_SHIFT))


def decode_msr_request(req: GhcbMsrRequest | int) -> int:
    raw = req.raw if isinstance(req, GhcbMsrRequest) else req
    if not 0 <= raw < 1 << 64:
        raise DecodeError(f"MSR value {raw:#x} is not 64-bit")
    kind = raw & _KIND_MASK
    if kind != RUN_VMPL_KIND:
        raise DecodeError(f"unknown GHCB MSR request kind {kind:#x}")
    if raw & ~(_KIND_MASK | (_VMPL_MASK << _VMPL_SHIFT)):
        raise DecodeError(f"reserved bits set in {raw:#x}")
    vmpl = (raw >> _VMPL_SHIFT) & _VMPL_MASK
    if vmpl >= NUM_VMPLS:
        raise DecodeError(f"VMPL {vmpl} out of range")
    return vmpl


@dataclass
class Vmsa:
    vmpl: int
    gprs: array = field(default_factory=lambda: array("Q", bytes(16 * 8)))
    rip: int = 0
    rsp: int = 0
    mode: Mode = Mode.KERNEL
    cr3: int = 0
    lstar: int = 0
    runnable: bool = False

    def to_bytes(self) -> bytes:
        return struct.pack("<B", self.vmpl) + self.gprs.tobytes() + struct.pack(
            "<QQBQQB", self.rip, self.rsp, self.mode is Mode.USER, self.cr3, self.lstar, self.runnable)

    def clear_gprs(self) -> None:
        self.gprs[:] = array("Q", bytes(16 * 8))


class EventKind(enum.Enum):
    VMPL_SWITCH = "VmplSwitch"
    VMGEXIT = "Vmgexit"
    AEX = "Aex"
    SYSCALL_ENTRY = "SyscallEntry"
    SYSRET_EXIT = "SysretExit"
    IOCTL_ENTRY = "IoctlEntry"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    detail: tuple = ()

    @property
    def key(self) -> str:
        if self.kind is EventKind.VMPL_SWITCH:
            return f"VmplSwitch({self.detail[0]},{self.detail[1]})"
        return self.kind.value

    def to_json(self) -> dict:
        out: dict = {"event": self.kind.value}
        if self.kind is EventKind.VMPL_SWITCH:
            out["from"], out["to"] = self.detail
        elif self.detail:
            out["detail"] = [str(d) for d in self.detail]
        return out


class SwitchLedger:
    """Deterministic record of every mode and VMPL transition."""

    def __init__(self) -> None:
        self.trace: list[Event] = []
        self.counts: Counter[str] = Counter()

    def record(self, kind: EventKind, *detail) -> None:
        ev = Event(kind, tuple(detail))
        self.trace.append(ev)
        self.counts[ev.key] += 1

    def mark(self) -> int:
        return len(self.trace)

    def since(self, mark: int) -> list[Event]:
        return self.trace[mark:]

    def switches(self, since: int = 0) -> int:
        return sum(1 for ev in self.trace[since:] if ev.kind is EventKind.VMPL_SWITCH)

    def count(self, kind: EventKind, since: int = 0) -> int:
        return sum(1 for ev in self.trace[since:] if ev.kind is kind)

    def to_json(self) -> str:
        doc = {
            "counts": dict(sorted(self.counts.items())),
            "vmpl_switches": self.switches(),
            "trace": [ev.to_json() for ev in self.trace],
        }
        return json.dumps(doc, indent=1) + "\n"


class PolicyMode(enum.Enum):
    HONEST = "honest"
    REFUSE_SWITCH = "refuse"
    WRONG_VMPL = "wrong"


@dataclass(frozen=True)
class HypervisorPolicy:
    mode: PolicyMode = PolicyMode.HONEST
    target: int | None = None

    @classmethod
    def parse(cls, text: str) -> "HypervisorPolicy":
        name, _, arg = text.partition(":")
        mode = PolicyMode(name.strip().lower())
        if mode is PolicyMode.WRONG_VMPL:
            return cls(mode, int(arg))
        return cls(mode)


class Hypervisor:
    """Host VMM.  Sees MSR values and chooses a VMPL; nothing else."""

    def __init__(self, policy: HypervisorPolicy | None = None) -> None:
        self.policy = policy or HypervisorPolicy()
        self.observed: list[int] = []

    def handle_vmgexit(self, msr_raw: int) -> int | None:
        self.observed.append(msr_raw)
        if self.policy.mode is PolicyMode.REFUSE_SWITCH:
            return None
        if self.policy.mode is PolicyMode.WRONG_VMPL:
            return self.policy.target
        try:
            return decode_msr_request(msr_raw)
        except DecodeError:
            return None


@dataclass(frozen=True)
class SwitchResult:
    switched: bool
    vmpl: int | None

    @property
    def stalled(self) -> bool:
        return not self.switched


Handler = Callable[[ExceptionKind, object], object]


class Vcpu:
    def __init__(self, ledger: SwitchLedger, hypervisor: Hypervisor, vmpls=(0, 1)) -> None:
        self.ledger = ledger
        self.hypervisor = hypervisor
        self.vmsas: dict[int, Vmsa] = {v: Vmsa(v) for v in vmpls}
        self.current = min(self.vmsas)
        self.vmsas[self.current].runnable = True
        self.handlers: dict[int, Handler] = {}
        self._in_handler: set[int] = set()

    @property
    def vmsa(self) -> Vmsa:
        return self.vmsas[self.current]

    def vmgexit_run_vmpl(self, current_vmpl: int, target_vmpl: int) -> SwitchResult:
        if current_vmpl != self.current:
            raise ProtocolError(f"VMPL{current_vmpl} is not running (VMPL{self.current} is)")
        if self.vmsa.mode is not Mode.KERNEL:
            raise PrivilegeFault("writing the GHCB MSR requires kernel mode")
        if target_vmpl not in self.vmsas:
            raise ProtocolError(f"VMPL{target_vmpl} has no initialised VMSA")
        msr = encode_msr_request(target_vmpl)
        self.ledger.record(EventKind.VMGEXIT, current_vmpl, target_vmpl)
        chosen = self.hypervisor.handle_vmgexit(msr.raw)
        if chosen is None or chosen not in self.vmsas:
            return SwitchResult(False, None)
        self.vmsas[self.current].runnable = False
        self.vmsas[chosen].runnable = True
        self.ledger.record(EventKind.VMPL_SWITCH, self.current, chosen)
        self.current = chosen
        return SwitchResult(True, chosen)

    def register_handler(self, vmpl: int, handler: Handler) -> None:
        self.handlers[vmpl] = handler

    def deliver_exception(self, kind: ExceptionKind, fault: object = None):
        """Route to the handler of the running VMPL; no VMPL switch happens here."""
        level = self.current
        if level in self._in_handler:
            raise DoubleFault(f"{kind.label} raised inside the VMPL{level} handler")
        handler = self.handlers.get(level)
        if handler is None:
            raise DoubleFault(f"no exception handler registered at VMPL{level}")
        self._in_handler.add(level)
        try:
            return handler(kind, fault)
        finally:
            self._in_handler.discard(level)
