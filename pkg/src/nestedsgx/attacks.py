"""Scripted guest-side attacks and their classification.

Each attack runs with the full power of the VMPL1 kernel: it may edit any
guest page table, rewrite driver requests, and talk to the AMD-SP over its
own VMPCK.  An attack *succeeds* only if it observes or changes VMPL0 or
enclave state, or leaves the machine with a broken invariant.
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Callable

from .errors import MemTrap, SimError, VmplDenied
from .guest import (
    DIRECT_MAP_BASE,
    DIVERTED_RIP,
    App,
    AttackKind,
    AttackScript,
    AttackVerdict,
    LoadedEnclave,
    VerdictKind,
)
from .image import offline_mrenclave
from .leaves import Leaf
from .mem import PAGE_SHIFT
from .monitor import SecsState
from .programs import image_for
from .request import DriverRequest

if TYPE_CHECKING:
    from .guest import GuestOs

NO_EFFECT = AttackVerdict(VerdictKind.NO_EFFECT)
PROBE_VPN = (DIRECT_MAP_BASE >> PAGE_SHIFT) - 0x100


def _succeeded(why: str) -> AttackVerdict:
    return AttackVerdict(VerdictKind.SUCCEEDED, why)


def _any_app(os: "GuestOs") -> App:
    return next(iter(os.apps.values())) if os.apps else os.spawn()


def _live_enclave(os: "GuestOs") -> tuple[App, LoadedEnclave] | None:
    mon = os.machine.monitor
    for app in os.apps.values():
        for enc in app.enclaves.values():
            secs = mon.enclaves.get(enc.eid)
            if secs is None or secs.state is not SecsState.INITIALIZED:
                continue
            tcs = secs.tcs[enc.tcs[0]]
            if not tcs.busy and tcs.current_ssa_index < tcs.nssa:
                return app, enc
    return None


def _read_vmpl0(os: "GuestOs", s: AttackScript) -> AttackVerdict:
    m = os.machine
    target = m.monitor.secrets_gpn if s.target is None else s.target
    os.pt.map(PROBE_VPN, target, user=False, writable=True, executable=False)
    try:
        data = os.kspace.read(PROBE_VPN << PAGE_SHIFT, 64)
    except MemTrap as trap:
        return AttackVerdict.blocked(trap.kind.label)
    finally:
        os.pt.unmap(PROBE_VPN)
    return _succeeded(f"read {len(data)} bytes of VMPL0 page {target:#x}")


def _write_vmpl0(os: "GuestOs", s: AttackScript) -> AttackVerdict:
    m = os.machine
    target = m.monitor.secrets_gpn if s.target is None else s.target
    before = m.phys.read_page(target)
    os.pt.map(PROBE_VPN, target, user=False, writable=True, executable=False)
    try:
        os.kspace.write(PROBE_VPN << PAGE_SHIFT, b"\xa5" * 64)
    except MemTrap as trap:
        if m.phys.read_page(target) != before:
            return _succeeded("VMPL0 page changed despite the fault")
        return AttackVerdict.blocked(trap.kind.label)
    finally:
        os.pt.unmap(PROBE_VPN)
    if m.phys.read_page(target) == before:
        return NO_EFFECT
    return _succeeded(f"wrote VMPL0 page {target:#x}")


def _remap_enclave_page(os: "GuestOs", s: AttackScript) -> AttackVerdict:
    m = os.machine
    target = s.target
    if target is None:
        owned = sorted(g for g, e in m.monitor.epcm.items() if e.valid)
        target = owned[-1] if owned else m.layout.epc_region[0]
    app = _any_app(os)
    # the App's own table, edited by the guest kernel, points straight at the EPC page
    app.pt.map(PROBE_VPN, target, user=True, writable=True, executable=False)
    try:
        app.space.read(PROBE_VPN << PAGE_SHIFT, 64)
    except MemTrap as trap:
        return AttackVerdict.blocked(trap.kind.label)
    finally:
        app.pt.unmap(PROBE_VPN)
    return _succeeded(f"App read EPC page {target:#x}")


def _skip_aep(os: "GuestOs", s: AttackScript) -> AttackVerdict:
    m = os.machine
    found = _live_enclave(os)
    if found is None:
        app = os.spawn()
        enc = app.load_enclave(image_for("spin"))
    else:
        app, enc = found
    mon = m.monitor
    saved_budget = mon.step_budget
    mon.step_budget = 1  # host timer fires right after entry
    os.driver.skip_aep = True
    try:
        res = app.ecall(enc, 0, (1000).to_bytes(8, "little"))
    finally:
        os.driver.skip_aep = False
        mon.step_budget = saved_budget
    if res.completed:
        return NO_EFFECT
    vmsa = m.vcpu.vmsas[os.vmpl]
    if any(vmsa.gprs) or vmsa.rip != DIVERTED_RIP:
        return _succeeded("enclave register state visible to the guest")
    secs = mon.enclaves[enc.eid]
    tcs = secs.tcs[enc.tcs[0]]
    if tcs.busy or tcs.current_ssa_index != 1:
        return _succeeded("TCS state inconsistent after a skipped AEP")
    ssa_gpn = mon._ssa_addr(secs, tcs, 0) >> PAGE_SHIFT
    os.pt.map(PROBE_VPN, ssa_gpn, user=False, writable=False, executable=False)
    try:
        os.kspace.read(PROBE_VPN << PAGE_SHIFT, 8)
        return _succeeded("guest kernel read the SSA frame")
    except MemTrap:
        pass
    finally:
        os.pt.unmap(PROBE_VPN)
    return NO_EFFECT


def _perm_flip(req: DriverRequest) -> DriverRequest:
    if req.leaf == Leaf.EADD:
        a = list(req.args)
        a[4] ^= 0x2
        return DriverRequest(req.leaf, tuple(a))
    return req


def _offset_shift(req: DriverRequest) -> DriverRequest:
    if req.leaf == Leaf.EEXTEND:
        return DriverRequest(req.leaf, (req.args[0], req.args[1] ^ 0x100))
    return req


def _leaf_swap(req: DriverRequest) -> DriverRequest:
    if req.leaf == Leaf.EINIT:
        return DriverRequest(Leaf.EREMOVE, req.args)
    return req


TAMPER_VARIANTS: dict[str, Callable[[DriverRequest], DriverRequest]] = {
    "perms": _perm_flip,
    "offset": _offset_shift,
    "leaf": _leaf_swap,
}


def _load_outcome(app: App, image, **kw) -> tuple[str, bytes | None, int | None]:
    try:
        enc = app.load_enclave(image, **kw)
    except SimError as exc:
        return type(exc).__name__, None, None
    return "ok", enc.mrenclave, enc.eid


def _tamper_leaf_params(os: "GuestOs", s: AttackScript) -> AttackVerdict:
    """The driver rewrites requests in flight; compare with a twin that asks for the rewrite honestly."""
    from .machine import Machine

    fn = TAMPER_VARIANTS[s.variant or "perms"]
    image = image_for("adder")
    honest = offline_mrenclave(image)
    app = os.spawn()
    os.driver.tamper = fn
    try:
        outcome = _load_outcome(app, image)
    finally:
        os.driver.tamper = None
    twin = Machine(os.machine.config)
    twin_outcome = _load_outcome(twin.guest.spawn(), image, request_filter=fn)
    if outcome[:2] != twin_outcome[:2]:
        return _succeeded(f"tampered load {outcome[:2]} differs from the equivalent honest leaf {twin_outcome[:2]}")
    if outcome[1] == honest and fn is not _leaf_swap:
        return _succeeded("tampering went unnoticed by the measurement")
    if outcome[2] is not None:
        app.remove_enclave(app.enclaves[outcome[2]])
    return NO_EFFECT


def _request_vmpl0_report(os: "GuestOs", s: AttackScript) -> AttackVerdict:
    try:
        report = os.channel.snp_report_req(0, bytes(64))
    except VmplDenied:
        return AttackVerdict.blocked("VmplDenied")
    return _succeeded(f"obtained a VMPL{report.vmpl} report")


def _derive_vmpl0_key(os: "GuestOs", s: AttackScript) -> AttackVerdict:
    try:
        os.channel.msg_key_req(0)
    except VmplDenied:
        return AttackVerdict.blocked("VmplDenied")
    return _succeeded("derived the VMPL0 guest key")


HANDLERS: dict[AttackKind, Callable[["GuestOs", AttackScript], AttackVerdict]] = {
    AttackKind.READ_VMPL0: _read_vmpl0,
    AttackKind.WRITE_VMPL0: _write_vmpl0,
    AttackKind.REMAP_ENCLAVE_PAGE: _remap_enclave_page,
    AttackKind.SKIP_AEP: _skip_aep,
    AttackKind.TAMPER_LEAF_PARAMS: _tamper_leaf_params,
    AttackKind.REQUEST_VMPL0_REPORT: _request_vmpl0_report,
    AttackKind.DERIVE_VMPL0_KEY: _derive_vmpl0_key,
}


def run_attack(os: "GuestOs", script: AttackScript) -> AttackVerdict:
    verdict = HANDLERS[script.kind](os, script)
    problems = os.machine.check_invariants()
    if problems and verdict.safe:
        return _succeeded(f"invariant broken: {problems[0]}")
    return verdict
