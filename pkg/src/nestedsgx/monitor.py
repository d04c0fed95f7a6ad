"""The VMPL0 security monitor.

Emulates the SGX leaf functions over an EPC pool carved out of VMPL0
memory.  SGX control structures (SECS, TCS state, EPCM) live in monitor
memory; enclave pages live in the EPC and are reachable only through the
enclave page tables the monitor builds.  Enclaves run in user mode at VMPL0,
enter the monitor only through the LSTAR trampoline, and leave either by
EEXIT or by an emulated AEX.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from . import evm
from .attest import Aik, EnclaveReport, GuestChannel, KeyName, build_bundle, derive_enclave_key
from .errors import (
    AlignmentError,
    BadEntry,
    DoubleFault,
    EpcExhausted,
    ExceptionKind,
    GeneralProtection,
    LayoutError,
    NoPendingSsa,
    NoTcsError,
    ProtocolError,
    RangeError,
    SimError,
    SsaOverflow,
    StateError,
    TcsBusy,
    ThreadsActive,
    UnmappedError,
)
from .image import TCS_CSSA, TCS_OENTRY, TCS_OSSA
from .leaves import Leaf
from .measurement import EEXTEND_CHUNK, MeasurementLog
from .mem import (
    MONITOR,
    PAGE_MASK,
    PAGE_SHIFT,
    PAGE_SIZE,
    AddressSpace,
    Context,
    ContextKind,
    Mode,
    PageTable,
    VmplPerms,
    map_shared_parameter_buffer,
)
from .request import DriverRequest, LeafResult, ResultKind, digest_to_words
from .vcpu import EventKind

if TYPE_CHECKING:
    from .machine import Machine

TRAMPOLINE_GVA = 0xFFFF_FFFF_FFE0_0000
LSTAR = TRAMPOLINE_GVA
DEFAULT_STEP_BUDGET = 10_000

# SSA frame layout used by this monitor
SSA_GPRS = 0
SSA_RIP = 128
SSA_RSP = 136
SSA_EXIT_REASON = 144


class PageType(enum.IntEnum):
    SECS = 0
    TCS = 1
    REG = 2


class SecsState(enum.Enum):
    UNINITIALIZED = "Uninitialized"
    INITIALIZED = "Initialized"
    REMOVED = "Removed"


@dataclass
class EpcmEntry:
    gpn: int
    owner: int
    page_type: PageType
    perms: VmplPerms
    enclave_offset: int
    valid: bool = True


@dataclass
class Tcs:
    gva: int
    gpn: int
    entry_point: int
    ssa_base: int
    nssa: int
    aep: int = 0
    current_ssa_index: int = 0
    busy: bool = False


@dataclass
class Ssa:
    saved_gprs: tuple[int, ...]
    saved_rip: int
    saved_rsp: int
    exit_reason: int

    def to_bytes(self) -> bytes:
        return struct.pack("<16QQQI", *self.saved_gprs, self.saved_rip, self.saved_rsp, self.exit_reason)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Ssa":
        vals = struct.unpack_from("<16QQQI", raw)
        return cls(tuple(vals[:16]), vals[16], vals[17], vals[18])


@dataclass
class Secs:
    enclave_id: int
    base_gva: int
    size_bytes: int
    ssa_frame_size: int
    attributes: int
    secs_gpn: int
    pt: PageTable
    state: SecsState = SecsState.UNINITIALIZED
    mrenclave: bytes | None = None
    measurement_log: MeasurementLog = field(default_factory=MeasurementLog)
    tcs: dict[int, Tcs] = field(default_factory=dict)
    pages: dict[int, int] = field(default_factory=dict)  # enclave offset -> gpn
    programs: list[evm.Program] = field(default_factory=list)
    app_ptid: int | None = None

    def contains(self, gva: int) -> bool:
        return self.base_gva <= gva < self.base_gva + self.size_bytes


@dataclass(frozen=True)
class KeyRequest:
    key_name: int
    key_id: bytes
    policy: str = "MRENCLAVE"

    def __post_init__(self) -> None:
        if len(self.key_id) != 16:
            raise ValueError("key_id is 16 bytes")
        if self.key_name not in set(KeyName):
            raise ValueError(f"unknown key name {self.key_name}")
        if self.policy != "MRENCLAVE":
            raise ValueError("only MRENCLAVE key policy is modelled")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KeyRequest":
        name, key_id = struct.unpack("<H16s", raw[:18])
        return cls(name, key_id)

    def to_bytes(self) -> bytes:
        return struct.pack("<H16s", self.key_name, self.key_id)


class _Eexit:
    pass


EEXIT = _Eexit()
SIGNED_REPORT_SIZE = EnclaveReport.SIZE + 64


class SecurityMonitor:
    def __init__(self, machine: "Machine") -> None:
        self.machine = machine
        self.layout = machine.layout
        self.rmp = machine.rmp
        self.phys = machine.phys
        self.vcpu = machine.vcpu
        self.ledger = machine.ledger
        self.step_budget = machine.config.step_budget
        self.epc_free: list[int] = list(self.layout.epc_region)
        self.epcm: dict[int, EpcmEntry] = {}
        self.enclaves: dict[int, Secs] = {}
        self._next_eid = 1
        self.trampoline_gpn = self.layout.monitor_pages - 1
        self.secrets_gpn = 1
        self.pt = machine.new_page_table(MONITOR)
        for gpn in self.layout.monitor_region:
            self.pt.map(gpn, gpn, user=False, writable=True, executable=True)
        self.pt.map(TRAMPOLINE_GVA >> PAGE_SHIFT, self.trampoline_gpn,
                    user=False, writable=False, executable=True)
        self.aik: Aik | None = None
        self.binding_report = None
        self._guest_key: bytes | None = None
        self.hooks: list[Callable[[str, int, object], None]] = []
        self._thread: tuple[Secs, Tcs] | None = None

    # -- boot -------------------------------------------------------------

    def boot(self) -> None:
        sp = self.machine.amd_sp
        vmsa = self.vcpu.vmsas[0]
        vmsa.cr3 = self.pt.ptid
        vmsa.lstar = LSTAR
        vmsa.mode = Mode.KERNEL
        # VMPCK0 sits in the secrets page inside the monitor carve-out
        self.phys.write(self.secrets_gpn << PAGE_SHIFT, b"".join(sp.vmpck))
        self.channel = GuestChannel(0, sp.vmpck[0], self.machine.relay_guest_message)
        self.aik = Aik(self.machine.rng.child("aik"))
        self._guest_key = self.channel.msg_key_req(0)
        self.binding_report = self.channel.snp_report_req(0, self.aik.binding_report_data())
        self.vcpu.register_handler(0, self._on_exception)
        info = self.binding_report.to_bytes() + self.aik.public
        self.phys.write(self.machine.attest_info_gpn << PAGE_SHIFT, struct.pack("<H", len(info)) + info)

    # -- helpers ----------------------------------------------------------

    def _emit(self, event: str, eid: int, data: object = None) -> None:
        for hook in self.hooks:
            hook(event, eid, data)

    def _secs(self, eid: int) -> Secs:
        secs = self.enclaves.get(eid)
        if secs is None or secs.state is SecsState.REMOVED:
            raise StateError(f"no live enclave {eid}")
        return secs

    def _alloc_epc(self) -> int:
        if not self.epc_free:
            raise EpcExhausted("EPC pool exhausted")
        return self.epc_free.pop(0)

    def _free_epc(self, gpn: int) -> None:
        self.phys.zero_page(gpn)
        self.epc_free.append(gpn)
        self.epc_free.sort()

    def _read_guest_page(self, gpn: int) -> bytes:
        if not self.layout.in_vmpl1(gpn):
            raise LayoutError(f"source page {gpn:#x} is not guest memory")
        return self.phys.read_page(gpn)

    def epc_owned(self) -> int:
        return sum(1 for e in self.epcm.values() if e.valid)

    def enclave_space(self, secs: Secs) -> AddressSpace:
        def epcm_filter(gva: int, gpn: int, access: int) -> bool:
            if self.layout.in_epc(gpn):
                entry = self.epcm.get(gpn)
                return (entry is not None and entry.valid and entry.owner == secs.enclave_id
                        and entry.page_type is PageType.REG)
            pb = secs.pt.param_buffer
            return pb is not None and pb[1] <= gpn < pb[1] + pb[2]
        return AddressSpace(secs.pt, self.rmp, self.phys, Mode.USER, 0, epcm_filter)

    # -- ENCLS leaves -----------------------------------------------------

    def ecreate(self, base_gva: int, size_bytes: int, ssa_frame_size: int = 1, attributes: int = 0) -> int:
        if size_bytes < PAGE_SIZE or size_bytes & (size_bytes - 1):
            raise AlignmentError(f"enclave size {size_bytes:#x} is not a power of two")
        if base_gva % size_bytes:
            raise AlignmentError(f"base {base_gva:#x} not aligned to size {size_bytes:#x}")
        if base_gva + size_bytes > 1 << 64 or ssa_frame_size < 1:
            raise RangeError("bad enclave extent or SSA frame size")
        gpn = self._alloc_epc()
        eid = self._next_eid
        self._next_eid += 1
        pt = self.machine.new_page_table(Context(ContextKind.ENCLAVE_USER, eid))
        pt.map(TRAMPOLINE_GVA >> PAGE_SHIFT, self.trampoline_gpn,
               user=False, writable=False, executable=True)
        secs = Secs(eid, base_gva, size_bytes, ssa_frame_size, attributes, gpn, pt)
        secs.measurement_log.ecreate(ssa_frame_size, size_bytes)
        self.epcm[gpn] = EpcmEntry(gpn, eid, PageType.SECS, VmplPerms(), 0)
        self.phys.write(gpn << PAGE_SHIFT, struct.pack("<QQQQ", eid, base_gva, size_bytes, attributes))
        self.enclaves[eid] = secs
        return eid

    def set_parameter_buffer(self, eid: int, app_pt: PageTable, vpn: int, gpn: int, pages: int) -> None:
        secs = self._secs(eid)
        if secs.state is not SecsState.UNINITIALIZED:
            raise StateError("parameter buffer must be mapped before EINIT")
        if app_pt.owner.kind is not ContextKind.APP_USER:
            raise LayoutError("parameter buffer may only be shared with an App address space")
        if secs.contains(vpn << PAGE_SHIFT) or secs.contains(((vpn + pages) << PAGE_SHIFT) - 1):
            raise LayoutError("parameter buffer overlaps the enclave range")
        map_shared_parameter_buffer(secs.pt, app_pt, vpn, gpn, pages, self.layout)
        secs.app_ptid = app_pt.ptid

    def eadd(self, eid: int, src_gpn: int, dest_gva: int, page_type: int, perms: VmplPerms) -> None:
        secs = self._secs(eid)
        if secs.state is not SecsState.UNINITIALIZED:
            raise StateError("EADD after EINIT")
        if page_type not in (PageType.TCS, PageType.REG):
            raise RangeError(f"page type {page_type} cannot be added")
        if dest_gva & PAGE_MASK or not secs.contains(dest_gva):
            raise RangeError(f"{dest_gva:#x} is not a page inside the enclave")
        offset = dest_gva - secs.base_gva
        if offset in secs.pages:
            raise RangeError(f"{dest_gva:#x} already added")
        content = self._read_guest_page(src_gpn)
        gpn = self._alloc_epc()
        self.phys.write_page(gpn, content)
        ptype = PageType(page_type)
        self.epcm[gpn] = EpcmEntry(gpn, eid, ptype, perms, offset)
        secs.pages[offset] = gpn
        if ptype is PageType.TCS:
            ossa, = struct.unpack_from("<Q", content, TCS_OSSA)
            cssa, nssa = struct.unpack_from("<II", content, TCS_CSSA)
            oentry, = struct.unpack_from("<Q", content, TCS_OENTRY)
            secs.tcs[dest_gva] = Tcs(dest_gva, gpn, secs.base_gva + oentry, secs.base_gva + ossa,
                                     nssa, current_ssa_index=cssa)
        else:
            secs.pt.map(dest_gva >> PAGE_SHIFT, gpn, user=True, writable=perms.write,
                        executable=perms.execute)
        secs.measurement_log.eadd(offset, ptype, perms.bits)

    def eextend(self, eid: int, gva: int) -> None:
        secs = self._secs(eid)
        if secs.state is not SecsState.UNINITIALIZED:
            raise StateError("EEXTEND after EINIT")
        if gva % EEXTEND_CHUNK or not secs.contains(gva):
            raise UnmappedError(f"{gva:#x} is not a 256-byte chunk of the enclave")
        offset = gva - secs.base_gva
        gpn = secs.pages.get(offset & ~PAGE_MASK)
        if gpn is None:
            raise UnmappedError(f"{gva:#x} lies in a page that was never added")
        chunk = self.phys.read((gpn << PAGE_SHIFT) | (offset & PAGE_MASK), EEXTEND_CHUNK)
        secs.measurement_log.eextend(offset, chunk)

    def einit(self, eid: int) -> bytes:
        secs = self._secs(eid)
        if secs.state is not SecsState.UNINITIALIZED:
            raise StateError("enclave already initialised")
        if not secs.tcs:
            raise NoTcsError("EINIT without a TCS page")
        if secs.pt.param_buffer is None:
            raise StateError("EINIT before the parameter buffer is mapped")
        secs.mrenclave = secs.measurement_log.freeze()
        secs.state = SecsState.INITIALIZED
        secs.programs = self._decode_code(secs)
        return secs.mrenclave

    def _decode_code(self, secs: Secs) -> list[evm.Program]:
        """Snapshot executable pages into programs, one per contiguous run."""
        offsets = sorted(off for off, gpn in secs.pages.items()
                         if self.epcm[gpn].page_type is PageType.REG and self.epcm[gpn].perms.execute)
        programs, run = [], []
        for off in offsets:
            if run and off != run[-1] + PAGE_SIZE:
                programs.append(run)
                run = []
            run.append(off)
        if run:
            programs.append(run)
        return [evm.Program.decode(b"".join(self.phys.read_page(secs.pages[o]) for o in r),
                                   base_gva=secs.base_gva + r[0]) for r in programs]

    def eremove(self, eid: int) -> None:
        secs = self._secs(eid)
        if any(t.busy for t in secs.tcs.values()):
            raise ThreadsActive(f"enclave {eid} still has a thread inside")
        for gpn in [g for g, e in self.epcm.items() if e.owner == eid and e.valid]:
            self.epcm[gpn].valid = False
            del self.epcm[gpn]
            self._free_epc(gpn)
        pb = secs.pt.param_buffer
        if pb is not None and secs.app_ptid is not None:
            app_pt = self.machine.page_tables.get(secs.app_ptid)
            if app_pt is not None:
                for k in range(pb[2]):
                    app_pt.release(pb[0] + k)
        self.machine.drop_page_table(secs.pt.ptid)
        secs.state = SecsState.REMOVED
        secs.pages.clear()

    # -- ENCLU leaves reached through the trampoline -----------------------

    def ereport(self, eid: int, report_data: bytes) -> EnclaveReport:
        secs = self._secs(eid)
        if secs.state is not SecsState.INITIALIZED:
            raise StateError("EREPORT before EINIT")
        if len(report_data) != 64:
            raise ValueError("report data is 64 bytes")
        return EnclaveReport(secs.mrenclave, secs.attributes, bytes(report_data))

    def egetkey(self, eid: int, req: KeyRequest) -> bytes:
        secs = self._secs(eid)
        if secs.state is not SecsState.INITIALIZED:
            raise StateError("EGETKEY before EINIT")
        return derive_enclave_key(self._guest_key, req.key_name, secs.mrenclave, req.key_id)

    def sign_report(self, report: EnclaveReport):
        return build_bundle(self.aik, self.binding_report, report)

    def syscall_dispatch(self, caller: Context, leaf: int, args: tuple[int, ...] = (),
                         entry: int = LSTAR):
        """Entry point behind LSTAR.  Only enclave callers and enclave leaves are routed."""
        if entry != LSTAR:
            raise GeneralProtection(f"entry at {entry:#x} is not the syscall trampoline")
        if caller.kind is not ContextKind.ENCLAVE_USER:
            raise BadEntry(f"{caller} may not enter the monitor through the trampoline")
        if self._thread is None or self._thread[0].enclave_id != caller.ident:
            raise BadEntry(f"{caller} has no thread inside an enclave")
        secs, tcs = self._thread
        if leaf == Leaf.EEXIT:
            return self.eexit(secs, tcs)
        space = self.enclave_space(secs)
        if leaf == Leaf.EREPORT:
            report = self.ereport(secs.enclave_id, space.read(args[0], 64))
            bundle = self.sign_report(report)
            space.write(args[1], report.to_bytes() + bundle.enclave_sig)
            return None
        if leaf == Leaf.EGETKEY:
            key = self.egetkey(secs.enclave_id, KeyRequest.from_bytes(space.read(args[0], 18)))
            space.write(args[1], key)
            return None
        raise BadEntry(f"leaf {leaf:#x} is not routed for enclaves")

    def eexit(self, secs: Secs, tcs: Tcs):
        # busy is cleared before the VMPL switch is requested
        tcs.busy = False
        self._thread = None
        return EEXIT

    # -- entry, AEX, resume ----------------------------------------------

    def _tcs(self, secs: Secs, tcs_gva: int) -> Tcs:
        tcs = secs.tcs.get(tcs_gva)
        if tcs is None:
            raise RangeError(f"{tcs_gva:#x} is not a TCS of enclave {secs.enclave_id}")
        return tcs

    def _ssa_addr(self, secs: Secs, tcs: Tcs, index: int) -> int:
        gva = tcs.ssa_base + index * secs.ssa_frame_size * PAGE_SIZE
        gpn = secs.pages.get((gva - secs.base_gva) & ~PAGE_MASK)
        if gpn is None or self.epcm[gpn].page_type is not PageType.REG:
            raise SsaOverflow(f"SSA frame {index} at {gva:#x} is not an enclave REG page")
        return (gpn << PAGE_SHIFT) | (gva & PAGE_MASK)

    def eenter(self, eid: int, tcs_gva: int, aep: int) -> LeafResult:
        secs = self._secs(eid)
        if secs.state is not SecsState.INITIALIZED:
            raise StateError("EENTER before EINIT")
        tcs = self._tcs(secs, tcs_gva)
        if tcs.busy:
            raise TcsBusy(f"TCS {tcs_gva:#x} is busy")
        tcs.busy = True
        tcs.aep = aep
        vmsa = self.vcpu.vmsa
        vmsa.clear_gprs()
        vmsa.gprs[0] = tcs.current_ssa_index
        pb = secs.pt.param_buffer
        vmsa.gprs[1] = pb[0] << PAGE_SHIFT if pb else 0
        vmsa.rip = tcs.entry_point
        vmsa.rsp = secs.base_gva + secs.size_bytes
        return self._run_thread(secs, tcs, "eenter")

    def eresume(self, eid: int, tcs_gva: int) -> LeafResult:
        secs = self._secs(eid)
        if secs.state is not SecsState.INITIALIZED:
            raise StateError("ERESUME before EINIT")
        tcs = self._tcs(secs, tcs_gva)
        if tcs.busy:
            raise TcsBusy(f"TCS {tcs_gva:#x} is busy")
        if tcs.current_ssa_index == 0:
            raise NoPendingSsa(f"TCS {tcs_gva:#x} has no saved state")
        ssa = Ssa.from_bytes(self.phys.read(self._ssa_addr(secs, tcs, tcs.current_ssa_index - 1), 152))
        tcs.current_ssa_index -= 1
        tcs.busy = True
        vmsa = self.vcpu.vmsa
        for i, v in enumerate(ssa.saved_gprs):
            vmsa.gprs[i] = v
        vmsa.rip = ssa.saved_rip
        vmsa.rsp = ssa.saved_rsp
        return self._run_thread(secs, tcs, "eresume")

    def _run_thread(self, secs: Secs, tcs: Tcs, how: str) -> LeafResult:
        vmsa = self.vcpu.vmsa
        vmsa.cr3 = secs.pt.ptid
        vmsa.mode = Mode.USER
        self._thread = (secs, tcs)
        self.ledger.record(EventKind.SYSRET_EXIT, f"enclave{secs.enclave_id}")
        self._emit(how, secs.enclave_id, vmsa.to_bytes())
        space = self.enclave_space(secs)
        load, store = space.load_u64, space.store_u64
        remaining = self.step_budget
        ctx = Context(ContextKind.ENCLAVE_USER, secs.enclave_id)
        while True:
            program, idx = self._locate(secs, vmsa.rip)
            if program is None:
                exc = self.vcpu.deliver_exception(ExceptionKind.GENERAL_PROTECTION, None)
                return exc
            res = evm.run(program, vmsa.gprs, idx, remaining, load, store)
            remaining -= res.steps
            vmsa.rip = program.gva_of(res.rip)
            if res.status is evm.Status.EXITED:
                self.ledger.record(EventKind.SYSCALL_ENTRY, f"enclave{secs.enclave_id}")
                vmsa.mode = Mode.KERNEL
                try:
                    out = self.syscall_dispatch(ctx, res.leaf, res.args)
                except SimError:
                    # a refused leaf faults on the syscall itself, like any other #GP
                    vmsa.mode = Mode.USER
                    vmsa.rip = program.gva_of(res.rip - 1)
                    return self.vcpu.deliver_exception(ExceptionKind.GENERAL_PROTECTION, None)
                if out is EEXIT:
                    vmsa.clear_gprs()
                    vmsa.cr3 = self.pt.ptid
                    return LeafResult(ResultKind.EEXIT_RETURN)
                vmsa.mode = Mode.USER
                self.ledger.record(EventKind.SYSRET_EXIT, f"enclave{secs.enclave_id}")
                if remaining <= 0:
                    return self.vcpu.deliver_exception(ExceptionKind.TIMER, None)
                continue
            if res.status is evm.Status.TRAPPED:
                return self.vcpu.deliver_exception(res.exception, res.fault)
            if res.status is evm.Status.BUDGET_EXHAUSTED:
                return self.vcpu.deliver_exception(ExceptionKind.TIMER, None)
            # hlt is privileged at CPL3
            return self.vcpu.deliver_exception(ExceptionKind.GENERAL_PROTECTION, None)

    def _locate(self, secs: Secs, rip: int) -> tuple[evm.Program | None, int]:
        for program in secs.programs:
            idx = program.index_of(rip)
            if idx is not None:
                return program, idx
        return None, 0

    def _on_exception(self, kind: ExceptionKind, fault: object) -> LeafResult:
        vmsa = self.vcpu.vmsa
        if vmsa.mode is Mode.USER and self._thread is not None:
            return self.aex(kind)
        raise DoubleFault(f"{kind.label} in monitor kernel context")

    def aex(self, kind: ExceptionKind) -> LeafResult:
        """Save the enclave context to the current SSA frame and exit towards the AEP."""
        if self._thread is None:
            raise StateError("AEX with no enclave thread running")
        secs, tcs = self._thread
        vmsa = self.vcpu.vmsa
        self._thread = None
        tcs.busy = False
        try:
            if tcs.current_ssa_index >= tcs.nssa:
                raise SsaOverflow(f"TCS {tcs.gva:#x} has no free SSA frame")
            addr = self._ssa_addr(secs, tcs, tcs.current_ssa_index)
        except SsaOverflow:
            vmsa.clear_gprs()
            vmsa.mode = Mode.KERNEL
            vmsa.cr3 = self.pt.ptid
            raise
        snapshot = vmsa.to_bytes()
        self.phys.write(addr, Ssa(tuple(vmsa.gprs), vmsa.rip, vmsa.rsp, int(kind)).to_bytes())
        tcs.current_ssa_index += 1
        self.ledger.record(EventKind.AEX, kind.label)
        self._emit("aex", secs.enclave_id, snapshot)
        vmsa.clear_gprs()
        vmsa.rip = 0
        vmsa.rsp = 0
        vmsa.mode = Mode.KERNEL
        vmsa.cr3 = self.pt.ptid
        return LeafResult(ResultKind.AEX_DELIVERY, (tcs.aep, int(kind)))

    # -- request loop -----------------------------------------------------

    def service_request(self) -> None:
        """Handle one driver request from the channel page, then switch back to the guest."""
        vmsa = self.vcpu.vmsa
        vmsa.mode = Mode.KERNEL
        vmsa.cr3 = self.pt.ptid
        channel = self.machine.channel_gpn << PAGE_SHIFT
        try:
            req = DriverRequest.decode(self.phys.read(channel, PAGE_SIZE))
            result = self._dispatch(req)
        except SimError as exc:
            if self._thread is not None:
                self._thread[1].busy = False
                self._thread = None
            vmsa.mode = Mode.KERNEL
            vmsa.cr3 = self.pt.ptid
            result = LeafResult.failure(exc)
        except (ValueError, IndexError, struct.error) as exc:
            result = LeafResult.failure(ProtocolError(str(exc)))
        self.phys.write(channel, result.encode())
        self.vcpu.vmgexit_run_vmpl(0, self.machine.guest_vmpl)

    def _dispatch(self, req: DriverRequest) -> LeafResult:
        a = req.args

        def need(n: int) -> None:
            if len(a) != n:
                raise ProtocolError(f"leaf {req.leaf:#x} takes {n} arguments, got {len(a)}")

        if req.leaf == Leaf.ECREATE:
            need(8)
            base, size, ssa, attrs, vpn, gpn, pages, app_ptid = a
            app_pt = self.machine.page_tables.get(app_ptid)
            if app_pt is None:
                raise LayoutError(f"no page table {app_ptid}")
            if app_pt.owner.kind is not ContextKind.APP_USER:
                raise LayoutError("parameter buffer may only be shared with an App address space")
            eid = self.ecreate(base, size, ssa, attrs)
            try:
                self.set_parameter_buffer(eid, app_pt, vpn, gpn, pages)
            except SimError:
                self.eremove(eid)
                raise
            return LeafResult(values=(eid,))
        if req.leaf == Leaf.EADD:
            need(5)
            self.eadd(a[0], a[1], a[2], a[3], VmplPerms.from_bits(a[4]))
            return LeafResult()
        if req.leaf == Leaf.EEXTEND:
            need(2)
            self.eextend(a[0], a[1])
            return LeafResult()
        if req.leaf == Leaf.EINIT:
            need(1)
            return LeafResult(values=digest_to_words(self.einit(a[0])))
        if req.leaf == Leaf.EENTER:
            need(3)
            return self.eenter(a[0], a[1], a[2])
        if req.leaf == Leaf.ERESUME:
            need(2)
            return self.eresume(a[0], a[1])
        if req.leaf == Leaf.EREMOVE:
            need(1)
            self.eremove(a[0])
            return LeafResult()
        raise BadEntry(f"leaf {req.leaf:#x} is not a driver leaf")

    # -- introspection ----------------------------------------------------

    def check_enclave_tables(self) -> list[str]:
        """Every live enclave table maps only its own EPC pages, its buffer, and the trampoline."""
        problems = []
        for secs in self.enclaves.values():
            if secs.state is SecsState.REMOVED:
                continue
            pb = secs.pt.param_buffer
            allowed = {gpn for gpn in secs.pages.values() if self.epcm[gpn].page_type is PageType.REG}
            if pb:
                allowed |= set(range(pb[1], pb[1] + pb[2]))
            for vpn, pte in secs.pt.mappings.items():
                if vpn == TRAMPOLINE_GVA >> PAGE_SHIFT:
                    if pte.gpn != self.trampoline_gpn or pte.user or pte.writable:
                        problems.append(f"enclave {secs.enclave_id}: trampoline mapping altered")
                elif pte.gpn not in allowed:
                    problems.append(f"enclave {secs.enclave_id}: vpn {vpn:#x} maps foreign gpn {pte.gpn:#x}")
        return problems
