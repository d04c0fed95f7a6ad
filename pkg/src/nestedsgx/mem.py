"""Guest-physical memory, the reverse map table, and page-table translation.

Physical pages are identified by their system-physical page index (spa).
The RMP stores, per spa, the guest-physical page it backs, a validated bit
and an R/W/X permission mask for each of the four VMPLs.  Storage is packed
into arrays so machines with a million pages stay cheap to build.
"""
from __future__ import annotations

import enum
import struct
from array import array
from dataclasses import dataclass, field

from .errors import (
    AliasError,
    AlreadyMapped,
    ExceptionKind,
    ImmutableMapping,
    LayoutError,
    MemTrap,
    PageFault,
    PrivilegeFault,
    RmpFault,
    SizeError,
)

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
PAGE_MASK = PAGE_SIZE - 1
NUM_VMPLS = 4


class Access(enum.IntFlag):
    READ = 1
    WRITE = 2
    EXECUTE = 4


class Mode(enum.Enum):
    USER = "user"
    KERNEL = "kernel"


@dataclass(frozen=True)
class VmplPerms:
    read: bool = False
    write: bool = False
    execute: bool = False

    @property
    def bits(self) -> int:
        return (Access.READ if self.read else 0) | (Access.WRITE if self.write else 0) | (
            Access.EXECUTE if self.execute else 0)

    @classmethod
    def from_bits(cls, bits: int) -> "VmplPerms":
        return cls(bool(bits & Access.READ), bool(bits & Access.WRITE), bool(bits & Access.EXECUTE))

    @classmethod
    def parse(cls, text: str) -> "VmplPerms":
        """Parse ``"rwx"``-style strings; ``-`` marks an absent permission."""
        text = text.strip().lower()
        bad = set(text) - set("rwx-")
        if bad:
            raise ValueError(f"bad permission string {text!r}")
        return cls("r" in text, "w" in text, "x" in text)

    def __str__(self) -> str:
        return ("r" if self.read else "-") + ("w" if self.write else "-") + ("x" if self.execute else "-")

    def allows(self, access: int) -> bool:
        return (self.bits & access) == access


FULL = VmplPerms(True, True, True)
NONE = VmplPerms()


@dataclass(frozen=True)
class MemLayout:
    """Split of guest-physical memory into the VMPL0 carve-out and the rest.

    The VMPL0 carve-out starts at gPA page 0: first the monitor's private
    pages, then the EPC pool.  Everything above belongs to the guest.
    """

    total_gpa_pages: int
    vmpl0_pages: int
    monitor_pages: int

    @property
    def vmpl0_region(self) -> range:
        return range(0, self.vmpl0_pages)

    @property
    def monitor_region(self) -> range:
        return range(0, self.monitor_pages)

    @property
    def epc_region(self) -> range:
        return range(self.monitor_pages, self.vmpl0_pages)

    @property
    def vmpl1_region(self) -> range:
        return range(self.vmpl0_pages, self.total_gpa_pages)

    def in_vmpl0(self, gpn: int) -> bool:
        return 0 <= gpn < self.vmpl0_pages

    def in_epc(self, gpn: int) -> bool:
        return self.monitor_pages <= gpn < self.vmpl0_pages

    def in_vmpl1(self, gpn: int) -> bool:
        return self.vmpl0_pages <= gpn < self.total_gpa_pages


def carve_layout(total_pages: int, vmpl0_pages: int, monitor_pages: int) -> MemLayout:
    if not 0 < monitor_pages < vmpl0_pages < total_pages:
        raise SizeError(
            f"need 0 < monitor_pages ({monitor_pages}) < vmpl0_pages ({vmpl0_pages})"
            f" < total_pages ({total_pages})")
    return MemLayout(total_pages, vmpl0_pages, monitor_pages)


@dataclass(frozen=True)
class RmpEntry:
    spa: int
    assigned_gpa: int | None
    validated: bool
    vmpl_perms: tuple[VmplPerms, VmplPerms, VmplPerms, VmplPerms]


class Rmp:
    """Reverse map table.  ``check`` returns a fault value instead of raising."""

    def __init__(self, npages: int) -> None:
        self.npages = npages
        self._gpa = array("q", [-1]) * npages
        self._valid = bytearray(npages)
        self._perms = bytearray(NUM_VMPLS * npages)
        self._by_gpa: dict[int, int] = {}

    @classmethod
    def from_layout(cls, layout: MemLayout, guest_vmpl: int = 1) -> "Rmp":
        """Assign every page identity-mapped and apply the boot-time carve-out."""
        n = layout.total_gpa_pages
        rmp = cls(n)
        rmp._gpa = array("q", range(n))
        rmp._valid = bytearray(b"\x01") * n
        rmp._by_gpa = dict(zip(range(n), range(n)))
        vmpl0_row = bytes([FULL.bits, 0, 0, 0])
        guest_row = bytearray(vmpl0_row)
        guest_row[guest_vmpl] = FULL.bits
        rmp._perms = bytearray(vmpl0_row * layout.vmpl0_pages
                               + bytes(guest_row) * len(layout.vmpl1_region))
        return rmp

    def __len__(self) -> int:
        return self.npages

    def _require(self, spa: int) -> None:
        if not 0 <= spa < self.npages:
            raise IndexError(f"spa {spa} out of range")

    def assign(self, spa: int, gpa: int) -> None:
        """Back ``gpa`` with ``spa``; the page comes up validated, VMPL0-only."""
        self._require(spa)
        owner = self._by_gpa.get(gpa)
        if owner is not None and owner != spa:
            raise AliasError(f"gpa {gpa} already backed by spa {owner}")
        old = self._gpa[spa]
        if old >= 0 and old != gpa:
            del self._by_gpa[old]
        self._gpa[spa] = gpa
        self._by_gpa[gpa] = spa
        self._valid[spa] = 1
        base = spa * NUM_VMPLS
        self._perms[base:base + NUM_VMPLS] = bytes([FULL.bits, 0, 0, 0])

    def unassign(self, spa: int) -> None:
        self._require(spa)
        old = self._gpa[spa]
        if old >= 0:
            del self._by_gpa[old]
        self._gpa[spa] = -1
        self._valid[spa] = 0
        base = spa * NUM_VMPLS
        self._perms[base:base + NUM_VMPLS] = bytes(NUM_VMPLS)

    def entry(self, spa: int) -> RmpEntry:
        self._require(spa)
        gpa = self._gpa[spa]
        base = spa * NUM_VMPLS
        perms = tuple(VmplPerms.from_bits(b) for b in self._perms[base:base + NUM_VMPLS])
        return RmpEntry(spa, gpa if gpa >= 0 else None, bool(self._valid[spa]), perms)  # type: ignore[arg-type]

    def spa_of(self, gpa: int) -> int | None:
        return self._by_gpa.get(gpa)

    def check(self, spa: int, vmpl: int, access: int) -> RmpFault | None:
        """None when the access is allowed, otherwise the fault value."""
        if not 0 <= spa < self.npages or self._gpa[spa] < 0 or not self._valid[spa]:
            return RmpFault(spa, vmpl, int(access))
        if (self._perms[spa * NUM_VMPLS + vmpl] & access) != access:
            return RmpFault(spa, vmpl, int(access))
        return None

    def adjust(self, caller_vmpl: int, spa: int, target_vmpl: int, perms: VmplPerms,
               mode: Mode = Mode.KERNEL) -> None:
        """RMPADJUST: a level may only lower-or-set permissions of strictly lower levels."""
        self._require(spa)
        if mode is not Mode.KERNEL:
            raise PrivilegeFault("RMPADJUST is a privileged instruction")
        if not 0 <= target_vmpl < NUM_VMPLS or target_vmpl <= caller_vmpl:
            raise PrivilegeFault(f"VMPL{caller_vmpl} cannot adjust VMPL{target_vmpl}")
        if self._gpa[spa] < 0:
            raise PrivilegeFault(f"spa {spa} is not assigned to the guest")
        own = self._perms[spa * NUM_VMPLS + caller_vmpl]
        if perms.bits & ~own:
            raise PrivilegeFault(f"VMPL{caller_vmpl} cannot grant permissions it lacks")
        self._perms[spa * NUM_VMPLS + target_vmpl] = perms.bits

    def serialize(self) -> bytes:
        """Packed RMP image used in the launch measurement."""
        return struct.pack("<Q", self.npages) + self._gpa.tobytes() + bytes(self._valid) + bytes(self._perms)


class PhysMemory:
    """Backing store.  Pages are materialised on first write; reads of absent pages see zeros."""

    def __init__(self, npages: int) -> None:
        self.npages = npages
        self._pages: dict[int, bytearray] = {}

    def _page(self, spa: int, create: bool) -> bytearray | None:
        if not 0 <= spa < self.npages:
            raise IndexError(f"spa {spa} out of range")
        page = self._pages.get(spa)
        if page is None and create:
            page = self._pages[spa] = bytearray(PAGE_SIZE)
        return page

    def read(self, addr: int, n: int) -> bytes:
        out = bytearray()
        while n > 0:
            spa, off = addr >> PAGE_SHIFT, addr & PAGE_MASK
            chunk = min(n, PAGE_SIZE - off)
            page = self._page(spa, False)
            out += page[off:off + chunk] if page is not None else bytes(chunk)
            addr += chunk
            n -= chunk
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            spa, off = addr >> PAGE_SHIFT, addr & PAGE_MASK
            chunk = min(len(data) - pos, PAGE_SIZE - off)
            page = self._page(spa, True)
            page[off:off + chunk] = data[pos:pos + chunk]
            addr += chunk
            pos += chunk

    def read_page(self, spa: int) -> bytes:
        return self.read(spa << PAGE_SHIFT, PAGE_SIZE)

    def write_page(self, spa: int, data: bytes) -> None:
        if len(data) != PAGE_SIZE:
            raise ValueError("page contents must be exactly 4096 bytes")
        self.write(spa << PAGE_SHIFT, data)

    def zero_page(self, spa: int) -> None:
        self._page(spa, False)
        self._pages.pop(spa, None)

    def digest_pages(self, spas) -> dict[int, bytes]:
        return {spa: self.read_page(spa) for spa in spas}


class ContextKind(enum.Enum):
    MONITOR_KERNEL = "MonitorKernel"
    ENCLAVE_USER = "EnclaveUser"
    GUEST_KERNEL = "GuestKernel"
    APP_USER = "AppUser"


@dataclass(frozen=True)
class Context:
    kind: ContextKind
    ident: int | None = None

    def __str__(self) -> str:
        return self.kind.value if self.ident is None else f"{self.kind.value}({self.ident})"


MONITOR = Context(ContextKind.MONITOR_KERNEL)
GUEST_KERNEL = Context(ContextKind.GUEST_KERNEL)


@dataclass(frozen=True)
class Pte:
    gpn: int
    user: bool
    writable: bool
    executable: bool
    immutable: bool = False


@dataclass
class PageTable:
    owner: Context
    ptid: int
    mappings: dict[int, Pte] = field(default_factory=dict)
    param_buffer: tuple[int, int, int] | None = None

    def map(self, vpn: int, gpn: int, *, user: bool, writable: bool, executable: bool,
            immutable: bool = False) -> None:
        old = self.mappings.get(vpn)
        if old is not None and old.immutable:
            raise ImmutableMapping(f"vpn {vpn:#x} is pinned in page table {self.ptid}")
        self.mappings[vpn] = Pte(gpn, user, writable, executable, immutable)

    def unmap(self, vpn: int) -> None:
        old = self.mappings.get(vpn)
        if old is not None and old.immutable:
            raise ImmutableMapping(f"vpn {vpn:#x} is pinned in page table {self.ptid}")
        self.mappings.pop(vpn, None)

    def release(self, vpn: int) -> None:
        """Drop a mapping regardless of pinning (monitor teardown only)."""
        self.mappings.pop(vpn, None)

    def lookup(self, vpn: int) -> Pte | None:
        return self.mappings.get(vpn)

    def mapped_gpns(self) -> set[int]:
        return {pte.gpn for pte in self.mappings.values()}


def check_pte(pte: Pte | None, gva: int, access: int, mode: Mode) -> PageFault | None:
    if pte is None:
        return PageFault(gva, int(access))
    if mode is Mode.USER and not pte.user:
        return PageFault(gva, int(access))
    if access & Access.WRITE and not pte.writable:
        return PageFault(gva, int(access))
    if access & Access.EXECUTE and not pte.executable:
        return PageFault(gva, int(access))
    return None


def translate(pt: PageTable, rmp: Rmp, gva: int, access: int, mode: Mode,
              vmpl: int) -> int | PageFault | RmpFault:
    """Page-table walk followed by the RMP check at the mapped page.

    Returns the system-physical byte address on success, else the fault.
    """
    pte = pt.mappings.get(gva >> PAGE_SHIFT)
    fault = check_pte(pte, gva, access, mode)
    if fault is not None:
        return fault
    spa = rmp.spa_of(pte.gpn)
    if spa is None:
        return RmpFault(-1, vmpl, int(access))
    rfault = rmp.check(spa, vmpl, access)
    if rfault is not None:
        return rfault
    return (spa << PAGE_SHIFT) | (gva & PAGE_MASK)


def map_shared_parameter_buffer(enclave_pt: PageTable, app_pt: PageTable, gva: int, gpa: int,
                                pages: int, layout: MemLayout) -> None:
    """Map ``pages`` pages at vpn ``gva`` -> gpn ``gpa`` identically into both tables."""
    if enclave_pt.param_buffer is not None:
        raise AlreadyMapped(f"enclave page table {enclave_pt.ptid} already has a parameter buffer")
    if pages < 1:
        raise LayoutError("parameter buffer needs at least one page")
    for k in range(pages):
        if not layout.in_vmpl1(gpa + k):
            raise LayoutError(f"parameter buffer gpn {gpa + k:#x} is not guest-accessible")
    for k in range(pages):
        existing = app_pt.lookup(gva + k)
        if existing is not None and existing.gpn != gpa + k:
            raise ImmutableMapping(f"vpn {gva + k:#x} already maps a different page in the App")
        if enclave_pt.lookup(gva + k) is not None:
            raise AlreadyMapped(f"vpn {gva + k:#x} already mapped in the enclave")
    for k in range(pages):
        for pt in (enclave_pt, app_pt):
            pt.mappings[gva + k] = Pte(gpa + k, True, True, False, True)
    enclave_pt.param_buffer = (gva, gpa, pages)


class AddressSpace:
    """Checked byte access through one page table at a fixed mode and VMPL.

    Faults are raised as :class:`MemTrap` so bytecode interpreters can turn
    them into traps.  ``page_filter`` lets the monitor add the EPCM owner
    check on top of the page walk.
    """

    def __init__(self, pt: PageTable, rmp: Rmp, phys: PhysMemory, mode: Mode, vmpl: int,
                 page_filter=None) -> None:
        self.pt = pt
        self.rmp = rmp
        self.phys = phys
        self.mode = mode
        self.vmpl = vmpl
        self.page_filter = page_filter

    def _resolve(self, gva: int, access: int) -> int:
        res = translate(self.pt, self.rmp, gva, access, self.mode, self.vmpl)
        if isinstance(res, PageFault):
            raise MemTrap(ExceptionKind.PAGE_FAULT, res)
        if isinstance(res, RmpFault):
            raise MemTrap(ExceptionKind.RMP_FAULT, res)
        if self.page_filter is not None and not self.page_filter(gva, res >> PAGE_SHIFT, access):
            raise MemTrap(ExceptionKind.PAGE_FAULT, PageFault(gva, int(access)))
        return res

    def _spans(self, gva: int, n: int):
        while n > 0:
            chunk = min(n, PAGE_SIZE - (gva & PAGE_MASK))
            yield gva, chunk
            gva += chunk
            n -= chunk

    def read(self, gva: int, n: int, access: int = Access.READ) -> bytes:
        # resolve every span before touching memory so a fault has no partial effect
        spans = [(self._resolve(v, access), c) for v, c in self._spans(gva, n)]
        return b"".join(self.phys.read(addr, c) for addr, c in spans)

    def write(self, gva: int, data: bytes) -> None:
        spans = [(self._resolve(v, Access.WRITE), c) for v, c in self._spans(gva, len(data))]
        pos = 0
        for addr, c in spans:
            self.phys.write(addr, data[pos:pos + c])
            pos += c

    def load_u64(self, gva: int) -> int:
        return int.from_bytes(self.read(gva & 0xFFFF_FFFF_FFFF_FFFF, 8), "little")

    def store_u64(self, gva: int, value: int) -> None:
        self.write(gva & 0xFFFF_FFFF_FFFF_FFFF, (value & 0xFFFF_FFFF_FFFF_FFFF).to_bytes(8, "little"))
