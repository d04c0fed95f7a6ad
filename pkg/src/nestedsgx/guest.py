"""Untrusted VMPL1 side: guest kernel, NestedSGX driver, Apps, and attack scripts.

The guest kernel reaches its own memory through a direct map in its page
table.  The driver forwards leaf requests to the monitor through a channel
page and a VMGEXIT; Apps talk to enclaves only through the shared parameter
buffer.
"""
from __future__ import annotations

import enum
import struct
from array import array
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from . import evm
from .attest import NestedBundle, SnpReport, EnclaveReport, GuestChannel
from .errors import (
    ExceptionKind,
    HypervisorStall,
    InvalidLeaf,
    ProtocolError,
    SimError,
)
from .image import EnclaveImage
from .leaves import DRIVER_LEAVES, Leaf, leaf_name
from .mem import (
    GUEST_KERNEL,
    PAGE_SHIFT,
    PAGE_SIZE,
    AddressSpace,
    Context,
    ContextKind,
    Mode,
)
from .request import DriverRequest, LeafResult, ResultKind, words_to_digest
from .vcpu import EventKind

if TYPE_CHECKING:
    from .machine import Machine

DIRECT_MAP_BASE = 0xFFFF_8880_0000_0000
AEP_GVA = 0x0000_7FFF_E000_0000
DIVERTED_RIP = 0x0000_7FFF_D000_0000
APP_STACK_TOP = 0x0000_7FFF_FFFF_0000
APP_SCRATCH_GVA = 0x0000_6000_0000_0000

LEAF_ARITY = {Leaf.ECREATE: 8, Leaf.EADD: 5, Leaf.EEXTEND: 2, Leaf.EINIT: 1,
              Leaf.EENTER: 3, Leaf.ERESUME: 2, Leaf.EREMOVE: 1}

# parameter buffer header
PB_KIND, PB_INDEX, PB_LEN, PB_DATA = 0, 8, 16, 24
KIND_ECALL, KIND_OCALL_REQ, KIND_OCALL_RET = 0, 1, 2


class GuestOs:
    def __init__(self, machine: "Machine") -> None:
        self.machine = machine
        self.vmpl = machine.guest_vmpl
        layout = machine.layout
        reserved = {machine.channel_gpn, machine.attest_info_gpn}
        self._free = [g for g in layout.vmpl1_region if g not in reserved]
        self.pt = machine.new_page_table(GUEST_KERNEL)
        self.kspace = AddressSpace(self.pt, machine.rmp, machine.phys, Mode.KERNEL, self.vmpl)
        self.fault_log: list[tuple[ExceptionKind, object]] = []
        sp = machine.amd_sp
        self.channel = GuestChannel(self.vmpl, sp.vmpck[self.vmpl], machine.relay_guest_message)
        self.driver = Driver(self)
        self.apps: dict[int, App] = {}
        self._next_pid = 100
        vmsa = machine.vcpu.vmsas[self.vmpl]
        vmsa.cr3 = self.pt.ptid
        vmsa.mode = Mode.KERNEL
        machine.vcpu.register_handler(self.vmpl, self._on_exception)

    # -- memory -----------------------------------------------------------

    def alloc_pages(self, n: int = 1) -> int:
        """First gpn of ``n`` contiguous free guest pages."""
        free = self._free
        for i in range(len(free) - n + 1):
            if free[i + n - 1] - free[i] == n - 1:
                run = free[i:i + n]
                del free[i:i + n]
                for g in run:
                    self.machine.phys.zero_page(g)
                return run[0]
        raise MemoryError(f"no {n} contiguous free guest pages")

    def free_pages(self, gpn: int, n: int = 1) -> None:
        self._free.extend(range(gpn, gpn + n))
        self._free.sort()

    def direct_map(self, gpn: int) -> int:
        """Kernel virtual address of ``gpn`` (maps lazily, like a real direct map)."""
        vpn = (DIRECT_MAP_BASE >> PAGE_SHIFT) + gpn
        if self.pt.lookup(vpn) is None:
            self.pt.map(vpn, gpn, user=False, writable=True, executable=False)
        return vpn << PAGE_SHIFT

    def kread(self, gpn: int, offset: int, n: int) -> bytes:
        return self.kspace.read(self.direct_map(gpn) + offset, n)

    def kwrite(self, gpn: int, offset: int, data: bytes) -> None:
        self.kspace.write(self.direct_map(gpn) + offset, data)

    # -- processes --------------------------------------------------------

    def spawn(self) -> "App":
        pid = self._next_pid
        self._next_pid += 1
        app = App(self, pid)
        self.apps[pid] = app
        return app

    def _on_exception(self, kind: ExceptionKind, fault: object) -> None:
        self.fault_log.append((kind, fault))

    # -- attestation ------------------------------------------------------

    def attestation_info(self) -> tuple[SnpReport, bytes]:
        """The monitor's published binding report and AIK public key."""
        (n,) = struct.unpack("<H", self.kread(self.machine.attest_info_gpn, 0, 2))
        raw = self.kread(self.machine.attest_info_gpn, 2, n)
        return SnpReport.from_bytes(raw[:-32]), raw[-32:]

    def bundle_from_report(self, signed_report: bytes) -> NestedBundle:
        snp, aik_public = self.attestation_info()
        report = EnclaveReport.from_bytes(signed_report[:EnclaveReport.SIZE])
        sig = signed_report[EnclaveReport.SIZE:EnclaveReport.SIZE + 64]
        return NestedBundle(snp, aik_public, report, sig)

    # -- attacks ----------------------------------------------------------

    def run_attack(self, script: "AttackScript") -> "AttackVerdict":
        from .attacks import run_attack
        return run_attack(self, script)


class Driver:
    """The NestedSGX driver: IOCTL entry, VMPL switch requests, AEP return path."""

    def __init__(self, os: GuestOs) -> None:
        self.os = os
        self.tamper: Callable[[DriverRequest], DriverRequest] | None = None
        self.skip_aep = False

    def ioctl(self, app: "App", leaf: int, *args: int) -> LeafResult:
        if leaf not in DRIVER_LEAVES:
            raise InvalidLeaf(f"{leaf_name(leaf)} is not a driver leaf")
        m = self.os.machine
        vcpu = m.vcpu
        if vcpu.current != self.os.vmpl:
            raise ProtocolError("ioctl issued while the guest is not running")
        vmsa = vcpu.vmsa
        m.ledger.record(EventKind.IOCTL_ENTRY, leaf_name(leaf))
        saved = (vmsa.rip, vmsa.rsp)
        vmsa.mode = Mode.KERNEL
        vmsa.cr3 = self.os.pt.ptid
        req = DriverRequest(int(leaf), tuple(int(a) & 0xFFFF_FFFF_FFFF_FFFF for a in args))
        if self.tamper is not None:
            req = self.tamper(req)
        self.os.kwrite(m.channel_gpn, 0, req.encode())
        sw = vcpu.vmgexit_run_vmpl(self.os.vmpl, 0)
        if not sw.switched or vcpu.current != 0:
            self._back_to_app(app, saved)
            raise HypervisorStall("host did not run VMPL0 for the leaf request")
        m.monitor.service_request()
        if vcpu.current != self.os.vmpl:
            raise HypervisorStall("host did not return control to the guest")
        result = LeafResult.decode(self.os.kread(m.channel_gpn, 0, PAGE_SIZE))
        return self.handle_return_from_vmpl0(app, result, saved)

    def _back_to_app(self, app: "App", saved: tuple[int, int]) -> None:
        vmsa = self.os.machine.vcpu.vmsas[self.os.vmpl]
        vmsa.cr3 = app.pt.ptid
        vmsa.mode = Mode.USER
        vmsa.rip, vmsa.rsp = saved
        self.os.machine.ledger.record(EventKind.SYSRET_EXIT, f"app{app.pid}")

    def handle_return_from_vmpl0(self, app: "App", result: LeafResult,
                                 saved: tuple[int, int]) -> LeafResult:
        vcpu = self.os.machine.vcpu
        vmsa = vcpu.vmsa
        if result.kind is ResultKind.AEX_DELIVERY and result.ok:
            aep, kind = result.values
            # synthetic register state: nothing of the enclave's context survives
            vmsa.clear_gprs()
            vmsa.rip = DIVERTED_RIP if self.skip_aep else aep
            vmsa.rsp = saved[1]
            vcpu.deliver_exception(ExceptionKind(kind), None)
            vmsa.cr3 = app.pt.ptid
            vmsa.mode = Mode.USER
            self.os.machine.ledger.record(EventKind.SYSRET_EXIT, f"app{app.pid}")
            return result
        self._back_to_app(app, saved)
        result.raise_error()
        return result


@dataclass
class LoadedEnclave:
    eid: int
    mrenclave: bytes
    image: EnclaveImage
    tcs: tuple[int, ...]
    param_gpn: int | None = None

    @property
    def param_gva(self) -> int:
        return self.image.param_gva


@dataclass
class EcallResult:
    output: bytes
    completed: bool
    aex: int = 0
    ocalls: int = 0
    switches: int = 0
    aex_kinds: list[ExceptionKind] = field(default_factory=list)


@dataclass(frozen=True)
class AppRun:
    status: evm.Status
    exception: ExceptionKind | None
    regs: tuple[int, ...]
    steps: int


OcallHandler = Callable[[int, bytes], bytes]


class App:
    def __init__(self, os: GuestOs, pid: int) -> None:
        self.os = os
        self.pid = pid
        m = os.machine
        self.pt = m.new_page_table(Context(ContextKind.APP_USER, pid))
        self.space = AddressSpace(self.pt, m.rmp, m.phys, Mode.USER, os.vmpl)
        stack = os.alloc_pages(1)
        self.pt.map((APP_STACK_TOP >> PAGE_SHIFT) - 1, stack, user=True, writable=True, executable=False)
        self.rsp = APP_STACK_TOP
        self.enclaves: dict[int, LoadedEnclave] = {}

    def ioctl(self, leaf: int, *args: int) -> LeafResult:
        vmsa = self.os.machine.vcpu.vmsa
        vmsa.cr3 = self.pt.ptid
        vmsa.mode = Mode.USER
        vmsa.rsp = self.rsp
        return self.os.driver.ioctl(self, leaf, *args)

    def map_scratch(self, pages: int = 1, gva: int = APP_SCRATCH_GVA) -> int:
        gpn = self.os.alloc_pages(pages)
        for k in range(pages):
            self.pt.map((gva >> PAGE_SHIFT) + k, gpn + k, user=True, writable=True, executable=False)
        return gpn

    # -- enclave lifecycle ------------------------------------------------

    def load_enclave(self, image: EnclaveImage,
                     request_filter: Callable[[DriverRequest], DriverRequest] | None = None) -> LoadedEnclave:
        """Issue the ECREATE/EADD/EEXTEND/EINIT sequence for ``image``."""
        def issue(leaf: int, *args: int) -> LeafResult:
            if request_filter is not None:
                req = request_filter(DriverRequest(leaf, tuple(args)))
                leaf, args = req.leaf, req.args
            return self.ioctl(leaf, *args)

        os = self.os
        pb_gpn = os.alloc_pages(image.param_pages)
        try:
            eid = issue(Leaf.ECREATE, image.base_gva, image.size, image.ssa_frame_size, image.attributes,
                        image.param_gva >> PAGE_SHIFT, pb_gpn, image.param_pages, self.pt.ptid).values[0]
        except SimError:
            os.free_pages(pb_gpn, image.param_pages)
            raise
        staging = os.alloc_pages(1)
        try:
            for page in image.pages:
                os.kwrite(staging, 0, page.content)
                issue(Leaf.EADD, eid, staging, page.gva, page.page_type, page.perms.bits)
                if page.measure:
                    for off in range(0, PAGE_SIZE, 256):
                        issue(Leaf.EEXTEND, eid, page.gva + off)
            done = issue(Leaf.EINIT, eid)
            if len(done.values) != 4:
                raise ProtocolError("EINIT did not return a measurement")
            mr = words_to_digest(done.values)
        finally:
            os.free_pages(staging)
        loaded = LoadedEnclave(eid, mr, image, image.tcs_gvas, pb_gpn)
        self.enclaves[eid] = loaded
        return loaded

    def remove_enclave(self, enclave: LoadedEnclave) -> None:
        self.ioctl(Leaf.EREMOVE, enclave.eid)
        self.enclaves.pop(enclave.eid, None)
        if enclave.param_gpn is not None:
            # the monitor released the shared mapping; the pages are ours again
            self.os.free_pages(enclave.param_gpn, enclave.image.param_pages)

    def write_param(self, enclave: LoadedEnclave, kind: int, index: int, data: bytes) -> None:
        self.space.write(enclave.param_gva, struct.pack("<QQQ", kind, index, len(data)) + data)

    def read_param(self, enclave: LoadedEnclave) -> tuple[int, int, bytes]:
        kind, index, n = struct.unpack("<QQQ", self.space.read(enclave.param_gva, 24))
        limit = enclave.image.param_pages * PAGE_SIZE - PB_DATA
        return kind, index, self.space.read(enclave.param_gva + PB_DATA, min(n, limit))

    def ecall(self, enclave: LoadedEnclave, index: int = 0, data: bytes = b"", *,
              tcs: int | None = None, ocall_handler: OcallHandler | None = None,
              max_aex: int = 10_000) -> EcallResult:
        ledger = self.os.machine.ledger
        mark = ledger.mark()
        tcs = enclave.tcs[0] if tcs is None else tcs
        self.write_param(enclave, KIND_ECALL, index, data)
        res = self.ioctl(Leaf.EENTER, enclave.eid, tcs, AEP_GVA)
        out = EcallResult(b"", False)
        while True:
            if res.kind is ResultKind.AEX_DELIVERY:
                out.aex += 1
                out.aex_kinds.append(ExceptionKind(res.values[1]))
                if self.os.driver.skip_aep or out.aex > max_aex:
                    break
                # the AEP trampoline simply asks the driver to resume
                res = self.ioctl(Leaf.ERESUME, enclave.eid, tcs)
                continue
            kind, idx, payload = self.read_param(enclave)
            if kind == KIND_OCALL_REQ:
                out.ocalls += 1
                reply = ocall_handler(idx, payload) if ocall_handler else b""
                self.write_param(enclave, KIND_OCALL_RET, idx, reply)
                res = self.ioctl(Leaf.EENTER, enclave.eid, tcs, AEP_GVA)
                continue
            out.output = payload
            out.completed = True
            break
        out.switches = ledger.switches(mark)
        return out

    # -- App bytecode -----------------------------------------------------

    def run_program(self, program: evm.Program, budget: int = 10_000) -> AppRun:
        """Run App code in user mode at the guest VMPL.  ``syscall`` issues an ioctl."""
        regs = array("Q", bytes(16 * 8))
        rip = program.entry
        steps = 0
        vmsa = self.os.machine.vcpu.vmsa
        vmsa.cr3 = self.pt.ptid
        vmsa.mode = Mode.USER
        while True:
            res = evm.run(program, regs, rip, max(budget - steps, 1), self.space.load_u64, self.space.store_u64)
            steps += res.steps
            rip = res.rip
            if res.status is evm.Status.EXITED:
                leaf = res.leaf
                try:
                    if leaf not in LEAF_ARITY:
                        raise InvalidLeaf(f"{leaf_name(leaf)} is not a driver leaf")
                    args = res.args + (0,) * 8
                    r = self.ioctl(leaf, *args[:LEAF_ARITY[Leaf(leaf)]])
                    regs[0] = r.values[0] if r.values else 0
                except SimError:
                    regs[0] = 0xFFFF_FFFF_FFFF_FFFF
                if steps >= budget:
                    return AppRun(evm.Status.BUDGET_EXHAUSTED, None, tuple(regs), steps)
                continue
            if res.status is evm.Status.TRAPPED:
                self.os.machine.vcpu.deliver_exception(res.exception, res.fault)
                return AppRun(res.status, res.exception, tuple(regs), steps)
            return AppRun(res.status, None, tuple(regs), steps)


# -- attack scripts -------------------------------------------------------

class AttackKind(enum.Enum):
    READ_VMPL0 = "ReadVmpl0"
    WRITE_VMPL0 = "WriteVmpl0"
    REMAP_ENCLAVE_PAGE = "RemapEnclavePage"
    SKIP_AEP = "SkipAep"
    TAMPER_LEAF_PARAMS = "TamperLeafParams"
    REQUEST_VMPL0_REPORT = "RequestVmpl0Report"
    DERIVE_VMPL0_KEY = "DeriveVmpl0Key"

    @classmethod
    def parse(cls, text: str) -> "AttackKind":
        for k in cls:
            if k.value.lower() == text.strip().lower() or k.name.lower() == text.strip().lower():
                return k
        raise ValueError(f"unknown attack kind {text!r}")


@dataclass(frozen=True)
class AttackScript:
    kind: AttackKind
    target: int | None = None
    variant: str | None = None


class VerdictKind(enum.Enum):
    BLOCKED = "Blocked"
    NO_EFFECT = "NoEffect"
    SUCCEEDED = "Succeeded"


@dataclass(frozen=True)
class AttackVerdict:
    kind: VerdictKind
    detail: str | None = None

    @classmethod
    def blocked(cls, why: str) -> "AttackVerdict":
        return cls(VerdictKind.BLOCKED, why)

    @property
    def safe(self) -> bool:
        return self.kind is not VerdictKind.SUCCEEDED

    def __str__(self) -> str:
        if self.kind is VerdictKind.BLOCKED:
            return f"Blocked({self.detail})"
        if self.kind is VerdictKind.SUCCEEDED:
            return f"Succeeded({self.detail})"
        return "NoEffect"
