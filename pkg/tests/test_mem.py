from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestedsgx.errors import (
    AliasError,
    AlreadyMapped,
    ImmutableMapping,
    LayoutError,
    MemTrap,
    PrivilegeFault,
    SizeError,
)
from nestedsgx.mem import (
    FULL,
    GUEST_KERNEL,
    NONE,
    Access,
    AddressSpace,
    Context,
    ContextKind,
    Mode,
    PageFault,
    PageTable,
    PhysMemory,
    Rmp,
    RmpFault,
    VmplPerms,
    carve_layout,
    check_pte,
    map_shared_parameter_buffer,
    translate,
)

LAYOUT = carve_layout(64, 24, 4)
ACCESSES = [Access.READ, Access.WRITE, Access.EXECUTE, Access.READ | Access.WRITE]


def test_layout_regions_partition_memory():
    assert LAYOUT.vmpl0_region == range(0, 24)
    assert LAYOUT.monitor_region == range(0, 4)
    assert LAYOUT.epc_region == range(4, 24)
    assert LAYOUT.vmpl1_region == range(24, 64)
    assert set(LAYOUT.vmpl0_region) | set(LAYOUT.vmpl1_region) == set(range(64))


@pytest.mark.parametrize("args", [(64, 64, 4), (64, 4, 4), (64, 24, 0), (10, 24, 4)])
def test_bad_layouts(args):
    with pytest.raises(SizeError):
        carve_layout(*args)


def test_vmpl_perms_parse_and_bits():
    assert VmplPerms.parse("rwx") == FULL
    assert VmplPerms.parse("") == NONE
    assert VmplPerms.parse("rx").bits == 0b101
    assert VmplPerms.from_bits(0b011) == VmplPerms(True, True, False)
    assert str(VmplPerms.parse("rw")) == "rw-"
    with pytest.raises(ValueError):
        VmplPerms.parse("rq")


def test_boot_rmp_closes_vmpl0_to_the_guest():
    rmp = Rmp.from_layout(LAYOUT)
    for spa in LAYOUT.vmpl0_region:
        for a in ACCESSES:
            assert rmp.check(spa, 0, a) is None
            for v in (1, 2, 3):
                assert isinstance(rmp.check(spa, v, a), RmpFault)
    for spa in LAYOUT.vmpl1_region:
        assert rmp.check(spa, 1, Access.READ | Access.WRITE) is None
        assert rmp.check(spa, 2, Access.READ) is not None


def test_assign_rejects_aliasing():
    rmp = Rmp.from_layout(LAYOUT)
    with pytest.raises(AliasError):
        rmp.assign(5, 6)


def test_rmpadjust_rules():
    rmp = Rmp.from_layout(LAYOUT)
    with pytest.raises(PrivilegeFault):
        rmp.adjust(1, 30, 1, FULL)          # same level
    with pytest.raises(PrivilegeFault):
        rmp.adjust(1, 30, 0, FULL)          # higher level
    with pytest.raises(PrivilegeFault):
        rmp.adjust(1, 5, 2, VmplPerms(True))  # VMPL1 has nothing on VMPL0 pages to grant
    with pytest.raises(PrivilegeFault):
        rmp.adjust(0, 30, 1, FULL, Mode.USER)
    rmp.adjust(1, 30, 2, VmplPerms(True))
    assert rmp.check(30, 2, Access.READ) is None
    assert rmp.check(30, 2, Access.WRITE) is not None


def test_serialize_covers_permissions():
    a, b = Rmp.from_layout(LAYOUT), Rmp.from_layout(LAYOUT)
    assert a.serialize() == b.serialize()
    b.adjust(0, 40, 2, VmplPerms(True))
    assert a.serialize() != b.serialize()


rmp_ops = st.lists(
    st.one_of(
        st.tuples(st.just("assign"), st.integers(0, 63), st.integers(0, 80)),
        st.tuples(st.just("unassign"), st.integers(0, 63), st.just(0)),
        st.tuples(st.just("adjust"), st.integers(0, 63), st.integers(0, 7), st.integers(1, 3)),
    ),
    max_size=60,
)


def _apply(rmp: Rmp, op, caller: int = 0) -> None:
    try:
        if op[0] == "assign":
            rmp.assign(op[1], op[2])
        elif op[0] == "unassign":
            rmp.unassign(op[1])
        else:
            rmp.adjust(caller, op[1], op[3], VmplPerms.from_bits(op[2]))
    except (AliasError, PrivilegeFault):
        pass


@settings(max_examples=150, deadline=None)
@given(ops=rmp_ops)
def test_rmp_stays_one_to_one(ops):
    rmp = Rmp.from_layout(LAYOUT)
    for op in ops:
        _apply(rmp, op)
        gpas = [rmp.entry(s).assigned_gpa for s in range(rmp.npages)]
        assigned = [g for g in gpas if g is not None]
        assert len(assigned) == len(set(assigned))
        for s, g in enumerate(gpas):
            if g is not None:
                assert rmp.spa_of(g) == s


@settings(max_examples=150, deadline=None)
@given(ops=st.lists(st.tuples(st.integers(0, 63), st.integers(0, 7), st.integers(1, 3)), max_size=80))
def test_vmpl1_operations_never_open_vmpl0(ops):
    rmp = Rmp.from_layout(LAYOUT)
    for spa, bits, target in ops:
        _apply(rmp, ("adjust", spa, bits, target), caller=1)
    for spa in LAYOUT.vmpl0_region:
        for v in (1, 2, 3):
            for a in ACCESSES:
                assert rmp.check(spa, v, a) is not None
        # monotone privilege: VMPL0 keeps full access to its own carve-out
        assert rmp.check(spa, 0, Access.READ | Access.WRITE | Access.EXECUTE) is None


def _pt() -> PageTable:
    return PageTable(GUEST_KERNEL, 1)


@settings(max_examples=200, deadline=None)
@given(gpn=st.integers(0, 70), user=st.booleans(), w=st.booleans(), x=st.booleans(), mapped=st.booleans(),
       access=st.sampled_from(ACCESSES), mode=st.sampled_from([Mode.USER, Mode.KERNEL]), vmpl=st.integers(0, 3))
def test_translate_is_pte_check_and_rmp_check(gpn, user, w, x, mapped, access, mode, vmpl):
    rmp = Rmp.from_layout(LAYOUT)
    pt = _pt()
    if mapped:
        pt.map(7, gpn, user=user, writable=w, executable=x)
    gva = (7 << 12) | 0x123
    res = translate(pt, rmp, gva, access, mode, vmpl)
    pte_fault = check_pte(pt.lookup(7), gva, access, mode)
    spa = rmp.spa_of(gpn)
    rmp_ok = spa is not None and rmp.check(spa, vmpl, access) is None
    if pte_fault is None and rmp_ok:
        assert res == (spa << 12) | 0x123
    elif pte_fault is not None:
        assert isinstance(res, PageFault)
    else:
        assert isinstance(res, RmpFault)


def test_address_space_faults_have_no_partial_effect():
    rmp = Rmp.from_layout(LAYOUT)
    phys = PhysMemory(64)
    pt = _pt()
    pt.map(1, 30, user=False, writable=True, executable=False)
    pt.map(2, 5, user=False, writable=True, executable=False)  # VMPL0 page
    space = AddressSpace(pt, rmp, phys, Mode.KERNEL, 1)
    with pytest.raises(MemTrap) as info:
        space.write((2 << 12) - 4, b"\xaa" * 8)
    assert info.value.kind.label == "RmpFault"
    assert phys.read_page(30) == bytes(4096)
    space.write(1 << 12, b"hello")
    assert space.read(1 << 12, 5) == b"hello"


def test_parameter_buffer_mapping():
    enc = PageTable(Context(ContextKind.ENCLAVE_USER, 1), 2)
    app = PageTable(Context(ContextKind.APP_USER, 100), 3)
    map_shared_parameter_buffer(enc, app, 0x7F000, 40, 4, LAYOUT)
    for k in range(4):
        assert enc.lookup(0x7F000 + k) == app.lookup(0x7F000 + k)
        assert enc.lookup(0x7F000 + k).gpn == 40 + k
    with pytest.raises(AlreadyMapped):
        map_shared_parameter_buffer(enc, app, 0x80000, 50, 1, LAYOUT)
    with pytest.raises(ImmutableMapping):
        app.unmap(0x7F000)
    with pytest.raises(ImmutableMapping):
        app.map(0x7F001, 41, user=True, writable=False, executable=False)


def test_parameter_buffer_must_be_guest_memory():
    enc = PageTable(Context(ContextKind.ENCLAVE_USER, 1), 2)
    app = PageTable(Context(ContextKind.APP_USER, 100), 3)
    with pytest.raises(LayoutError):
        map_shared_parameter_buffer(enc, app, 0x7F000, 10, 1, LAYOUT)
    # every page a valid buffer may use is reachable by VMPL1
    rmp = Rmp.from_layout(LAYOUT)
    for gpn in LAYOUT.vmpl1_region:
        assert rmp.check(rmp.spa_of(gpn), 1, Access.READ | Access.WRITE) is None


def test_phys_memory_reads_zero_until_written():
    phys = PhysMemory(4)
    assert phys.read(0x1ffe, 4) == bytes(4)
    phys.write(0x1ffe, b"abcd")
    assert phys.read(0x1ffe, 4) == b"abcd"
    assert phys.read_page(2)[:2] == b"cd"
