from __future__ import annotations

from array import array

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestedsgx import evm
from nestedsgx.errors import ExceptionKind, MemTrap, ParseError
from nestedsgx.evm import Instr, Op, Program, Status, assemble, disassemble
from nestedsgx.leaves import Leaf
from nestedsgx.mem import PageFault

BACKENDS = sorted(evm.BACKENDS)
TRAP_BASE = 0xDEAD_0000


class FlatMemory:
    """Dictionary memory; addresses at or above TRAP_BASE fault."""

    def __init__(self) -> None:
        self.cells: dict[int, int] = {}
        self.log: list[tuple] = []

    def load(self, gva: int) -> int:
        self.log.append(("load", gva))
        if gva >= TRAP_BASE:
            raise MemTrap(ExceptionKind.PAGE_FAULT, PageFault(gva, 1))
        return self.cells.get(gva, gva * 7 & 0xFFFF)

    def store(self, gva: int, value: int) -> None:
        self.log.append(("store", gva, value))
        if gva >= TRAP_BASE:
            raise MemTrap(ExceptionKind.PAGE_FAULT, PageFault(gva, 2))
        self.cells[gva] = value


def _regs() -> array:
    return array("Q", bytes(128))


def _run(program, backend, budget=1000, regs=None, rip=None):
    mem = FlatMemory()
    regs = regs if regs is not None else _regs()
    res = evm.run(program, regs, program.entry if rip is None else rip, budget, mem.load, mem.store, backend)
    return res, tuple(regs), mem


def test_backends_available():
    assert "python" in evm.BACKENDS
    assert evm.BACKEND in evm.BACKENDS


@pytest.mark.parametrize("backend", BACKENDS)
def test_three_instructions_to_eexit(backend):
    prog = assemble("loadi r1, 5\nloadi r2, 6\nsyscall EEXIT, r1, r2\n")
    res, regs, _ = _run(prog, backend)
    assert res.status is Status.EXITED and res.steps == 3
    assert res.leaf == Leaf.EEXIT and res.args[:2] == (5, 6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_budget_exhaustion_resumes_exactly(backend):
    prog = assemble("""
        loadi r1, 10
        loadi r2, -1
    top: add r3, r1
        add r1, r2
        jnz r1, top
        syscall EEXIT
    """)
    regs = _regs()
    mem = FlatMemory()
    rip, total = prog.entry, 0
    while True:
        res = evm.run(prog, regs, rip, 3, mem.load, mem.store, backend)
        total += res.steps
        rip = res.rip
        if res.status is not Status.BUDGET_EXHAUSTED:
            break
    straight, sregs, _ = _run(prog, backend)
    assert res.status is Status.EXITED
    assert tuple(regs) == sregs and total == straight.steps
    assert regs[3] == 55


def test_budget_must_be_positive():
    with pytest.raises(ValueError):
        evm.run(assemble("halt"), _regs(), 0, 0, None, None)


@pytest.mark.parametrize("backend", BACKENDS)
def test_traps(backend):
    assert _run(assemble(f"load r1, [{TRAP_BASE:#x}]"), backend)[0].exception is ExceptionKind.PAGE_FAULT
    assert _run(assemble("fault RmpFault"), backend)[0].exception is ExceptionKind.RMP_FAULT
    assert _run(Program((Instr(Op.FAULT, imm=999),)), backend)[0].exception is ExceptionKind.INVALID_OPCODE
    assert _run(Program((Instr(Op.INVALID),)), backend)[0].exception is ExceptionKind.INVALID_OPCODE
    assert _run(Program((Instr(Op.JMP, imm=5),)), backend)[0].exception is ExceptionKind.GENERAL_PROTECTION
    assert _run(Program((Instr(Op.LOADI, 1, imm=1),)), backend)[0].exception is ExceptionKind.GENERAL_PROTECTION
    assert _run(assemble("halt"), backend)[0].status is Status.HALTED


def test_step_outcomes():
    prog = assemble("loadi r1, 1\nsyscall EEXIT\nfault PageFault\nhalt")
    mem = FlatMemory()
    regs = _regs()
    assert isinstance(evm.step(prog, regs, 0, mem.load, mem.store)[0], evm.Continue)
    out, nxt = evm.step(prog, regs, 1, mem.load, mem.store)
    assert isinstance(out, evm.SyscallRequest) and nxt == 2
    assert isinstance(evm.step(prog, regs, 2, mem.load, mem.store)[0], evm.Trap)
    assert isinstance(evm.step(prog, regs, 3, mem.load, mem.store)[0], evm.Halted)


def test_instruction_encoding_roundtrip():
    prog = assemble("loadi r15, 0xffffffffffffffff\nstore [0x10], r3\njnz r2, 0\nsyscall EREPORT, r1, r2\n")
    assert Program.decode(prog.encode()) == prog
    assert Instr.decode(b"\xff" * 16).op is Op.INVALID


def test_disassemble_roundtrip():
    src = "loadi r1, 0x10\nload r2, [0x20]\nstore [0x28], r2\nadd r1, r2\nxor r1, r1\njmp 6\n" \
          "jnz r1, 0\nsyscall EEXIT, r0, r0, r0\nfault PageFault\nhalt\n"
    prog = assemble(src)
    assert assemble(disassemble(prog)) == prog


def test_assembler_symbols_and_errors():
    prog = assemble(".equ P, 0x1000\nload r1, [P+0x18]\nloadi r2, P-8\n")
    assert prog.instructions[0].imm == 0x1018 and prog.instructions[1].imm == 0xFF8
    for bad, line in [("loadi r16, 1", 1), ("nop", 1), ("\njmp nowhere", 2), ("loadi r1, Q", 1)]:
        with pytest.raises(ParseError) as info:
            assemble(bad)
        assert info.value.line == line


# -- backend parity -------------------------------------------------------

_reg = st.integers(0, 15)
_addr = st.one_of(st.integers(0, 64).map(lambda k: k * 8), st.just(TRAP_BASE + 8))


def _instr(n: int):
    return st.one_of(
        st.builds(lambda a, v: Instr(Op.LOADI, a, imm=v), _reg, st.integers(0, 2**64 - 1)),
        st.builds(lambda a, g: Instr(Op.LOAD, a, imm=g), _reg, _addr),
        st.builds(lambda a, g: Instr(Op.STORE, a, imm=g), _reg, _addr),
        st.builds(lambda a, b: Instr(Op.ADD, a, b), _reg, _reg),
        st.builds(lambda a, b: Instr(Op.XOR, a, b), _reg, _reg),
        st.builds(lambda t: Instr(Op.JMP, imm=t), st.integers(0, n)),
        st.builds(lambda a, t: Instr(Op.JNZ, a, imm=t), _reg, st.integers(0, n)),
        st.builds(lambda a, b, c: Instr(Op.SYSCALL, a, b, c, imm=Leaf.EEXIT), _reg, _reg, _reg),
        st.builds(lambda k: Instr(Op.FAULT, imm=k), st.integers(0, 20)),
        st.just(Instr(Op.HALT)),
        st.just(Instr(Op.INVALID)),
    )


programs = st.integers(1, 24).flatmap(lambda n: st.lists(_instr(n), min_size=n, max_size=n)).map(
    lambda ins: Program(tuple(ins)))


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@settings(max_examples=300, deadline=None)
@given(prog=programs, seed_regs=st.lists(st.integers(0, 2**64 - 1), min_size=16, max_size=16),
       budget=st.integers(1, 400))
def test_backend_parity(prog, seed_regs, budget):
    outs = []
    for backend in BACKENDS:
        regs = array("Q", seed_regs)
        res, final, mem = _run(prog, backend, budget, regs)
        outs.append((res, final, mem.log, mem.cells))
    assert all(o == outs[0] for o in outs[1:])


@settings(max_examples=100, deadline=None)
@given(prog=programs, budget=st.integers(1, 200))
def test_determinism(prog, budget):
    a = _run(prog, "python", budget)
    b = _run(prog, "python", budget)
    assert (a[0], a[1], a[2].log) == (b[0], b[1], b[2].log)


def test_pure_python_switch_is_read_at_import():
    import os
    import subprocess
    import sys
    code = "from nestedsgx import evm; print(evm.BACKEND)"
    env = dict(os.environ, NESTEDSGX_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_benchmark_runs(capsys):
    import runpy
    from pathlib import Path
    bench = runpy.run_path(str(Path(__file__).parent.parent / "benchmarks" / "bench_evm.py"))
    bench["main"](["--steps", "2000", "--repeat", "1"])
    out = capsys.readouterr().out
    assert out.startswith("backends:") and "alu" in out and "speedup" in out
