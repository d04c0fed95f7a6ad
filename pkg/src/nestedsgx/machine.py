"""One simulated CVM: memory, RMP, vCPU, AMD-SP, monitor and guest OS."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable

from .attest import AmdSp, GuestMessage, SnpReport
from .mem import (
    NUM_VMPLS,
    PAGE_SIZE,
    Access,
    Context,
    MemLayout,
    PageTable,
    PhysMemory,
    Rmp,
    carve_layout,
)
from .rng import Drbg
from .vcpu import Hypervisor, HypervisorPolicy, SwitchLedger, Vcpu

MONITOR_MAGIC = b"NSGXMON\0"
MONITOR_VERSION = 1
TRAMPOLINE_CODE = b"NSGXTRMP" + struct.pack("<Q", 0x0F05)  # stub marker + syscall dispatch


@dataclass(frozen=True)
class MachineConfig:
    total_pages: int = 2048
    vmpl0_pages: int = 1088
    monitor_pages: int = 64
    step_budget: int = 10_000
    guest_vmpl: int = 1
    seed: int | str | None = 0
    hypervisor: str = "honest"

    @property
    def epc_pages(self) -> int:
        return self.vmpl0_pages - self.monitor_pages

    def layout(self) -> MemLayout:
        return carve_layout(self.total_pages, self.vmpl0_pages, self.monitor_pages)


def monitor_image(layout: MemLayout) -> tuple[bytes, bytes]:
    """Initial contents of monitor page 0 and of the trampoline page."""
    header = struct.pack("<8sIQQQ", MONITOR_MAGIC, MONITOR_VERSION, layout.total_gpa_pages,
                         layout.vmpl0_pages, layout.monitor_pages)
    return header.ljust(PAGE_SIZE, b"\0"), TRAMPOLINE_CODE.ljust(PAGE_SIZE, b"\0")


def expected_launch_digest(config: MachineConfig | None = None) -> bytes:
    """SHA-384 over the monitor image and the boot RMP, computable without booting."""
    config = config or MachineConfig()
    layout = config.layout()
    head, tramp = monitor_image(layout)
    rmp = Rmp.from_layout(layout, config.guest_vmpl)
    return hashlib.sha384(head + tramp + rmp.serialize()).digest()


class Machine:
    def __init__(self, config: MachineConfig | None = None, *, hypervisor: Hypervisor | None = None) -> None:
        from .guest import GuestOs
        from .monitor import SecurityMonitor

        self.config = config = config or MachineConfig()
        if not 1 <= config.guest_vmpl < NUM_VMPLS:
            raise ValueError("the guest must run below VMPL0")
        self.rng = Drbg(config.seed)
        self.layout = config.layout()
        self.guest_vmpl = config.guest_vmpl
        self.rmp = Rmp.from_layout(self.layout, config.guest_vmpl)
        self.phys = PhysMemory(self.layout.total_gpa_pages)
        head, tramp = monitor_image(self.layout)
        self.phys.write_page(0, head)
        self.phys.write_page(self.layout.monitor_pages - 1, tramp)
        self.launch_digest = hashlib.sha384(head + tramp + self.rmp.serialize()).digest()
        self.amd_sp = AmdSp(self.rng.child("amd-sp"), self.launch_digest)
        self.ledger = SwitchLedger()
        self.hypervisor = hypervisor or Hypervisor(HypervisorPolicy.parse(config.hypervisor))
        self.vcpu = Vcpu(self.ledger, self.hypervisor, (0, config.guest_vmpl))
        self.page_tables: dict[int, PageTable] = {}
        self._next_ptid = 1
        self.transcript: list[bytes] = []
        self.relay_filter: Callable[[GuestMessage], GuestMessage] | None = None
        # first two guest pages: driver<->monitor channel and the attestation info page
        self.channel_gpn = self.layout.vmpl0_pages
        self.attest_info_gpn = self.layout.vmpl0_pages + 1

        self.monitor = SecurityMonitor(self)
        self.monitor.boot()
        self.guest = GuestOs(self)
        self.vcpu.vmgexit_run_vmpl(0, self.guest_vmpl)

    # -- plumbing ---------------------------------------------------------

    def new_page_table(self, owner: Context) -> PageTable:
        pt = PageTable(owner, self._next_ptid)
        self.page_tables[pt.ptid] = pt
        self._next_ptid += 1
        return pt

    def drop_page_table(self, ptid: int) -> None:
        self.page_tables.pop(ptid, None)

    def relay_guest_message(self, msg: GuestMessage) -> GuestMessage:
        """Host-side relay of SNP_GUEST_REQUEST messages; the host sees only ciphertext."""
        self.transcript.append(msg.to_bytes())
        if self.relay_filter is not None:
            msg = self.relay_filter(msg)
        resp = self.amd_sp.handle_guest_request(msg)
        self.transcript.append(resp.to_bytes())
        return resp

    @property
    def vcek_public(self) -> bytes:
        return self.amd_sp.vcek_public

    def guest_report(self, report_data: bytes = bytes(64)) -> SnpReport:
        """A genuine SNP report requested by the guest kernel for its own VMPL."""
        return self.guest.channel.snp_report_req(self.guest_vmpl, report_data)

    # -- invariants -------------------------------------------------------

    def check_invariants(self) -> list[str]:
        problems: list[str] = []
        layout, rmp = self.layout, self.rmp
        seen: dict[int, int] = {}
        for spa in range(len(rmp)):
            e = rmp.entry(spa)
            if e.assigned_gpa is None:
                continue
            if e.assigned_gpa in seen:
                problems.append(f"gpa {e.assigned_gpa:#x} backed by spa {seen[e.assigned_gpa]} and {spa}")
            seen[e.assigned_gpa] = spa
        for gpn in layout.vmpl0_region:
            spa = rmp.spa_of(gpn)
            for vmpl in range(1, NUM_VMPLS):
                for acc in (Access.READ, Access.WRITE, Access.EXECUTE):
                    if spa is not None and rmp.check(spa, vmpl, acc) is None:
                        problems.append(f"VMPL{vmpl} has {acc.name} on VMPL0 page {gpn:#x}")
        mon = self.monitor
        problems += mon.check_enclave_tables()
        free = set(mon.epc_free)
        owned = {gpn for gpn, e in mon.epcm.items() if e.valid}
        if free & owned:
            problems.append("EPC pages both free and owned")
        if len(free) + len(owned) != len(layout.epc_region) or len(free) != len(mon.epc_free):
            problems.append("EPC conservation violated")
        for secs in mon.enclaves.values():
            pb = secs.pt.param_buffer
            if pb is None or secs.state.value == "Removed":
                continue
            vpn, gpn, pages = pb
            tables = [secs.pt]
            if secs.app_ptid in self.page_tables:
                tables.append(self.page_tables[secs.app_ptid])
            for pt in tables:
                for k in range(pages):
                    pte = pt.lookup(vpn + k)
                    if pte is None or pte.gpn != gpn + k or not pte.immutable:
                        problems.append(f"parameter buffer of enclave {secs.enclave_id} altered in table {pt.ptid}")
        runnable = [v for v, s in self.vcpu.vmsas.items() if s.runnable]
        if len(runnable) != 1 or runnable[0] != self.vcpu.current:
            problems.append(f"runnable VMSAs {runnable} with VMPL{self.vcpu.current} current")
        return problems
