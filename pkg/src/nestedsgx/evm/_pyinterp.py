"""Pure-Python interpreter loop.  Must stay behaviourally identical to ``_kernel.pyx``."""
from __future__ import annotations

from ..errors import ExceptionKind, MemTrap
from .isa import ST_BUDGET, ST_EXITED, ST_HALTED, ST_TRAPPED, Op

MASK64 = (1 << 64) - 1
_GP = int(ExceptionKind.GENERAL_PROTECTION)
_UD = int(ExceptionKind.INVALID_OPCODE)
_KINDS = frozenset(int(k) for k in ExceptionKind)
LOADI, LOAD, STORE, ADD, XOR, JMP, JNZ, SYSCALL, FAULT, HALT = (int(op) for op in (
    Op.LOADI, Op.LOAD, Op.STORE, Op.ADD, Op.XOR, Op.JMP, Op.JNZ, Op.SYSCALL, Op.FAULT, Op.HALT))


def run(program, regs, rip: int, budget: int, load, store) -> tuple:
    """Execute until a syscall, trap, halt, or ``budget`` retired instructions.

    ``regs`` is mutated in place.  Returns ``(status, rip, steps, payload)``.
    """
    rows = program.rows
    n = len(rows)
    steps = 0
    while True:
        if steps >= budget:
            return ST_BUDGET, rip, steps, None
        if not 0 <= rip < n:
            return ST_TRAPPED, rip, steps, (_GP, None)
        op, a, b, c, imm = rows[rip]
        if op == LOADI:
            regs[a] = imm
        elif op == LOAD:
            try:
                regs[a] = load(imm)
            except MemTrap as trap:
                return ST_TRAPPED, rip, steps, (int(trap.kind), trap.fault)
        elif op == STORE:
            try:
                store(imm, regs[a])
            except MemTrap as trap:
                return ST_TRAPPED, rip, steps, (int(trap.kind), trap.fault)
        elif op == ADD:
            regs[a] = (regs[a] + regs[b]) & MASK64
        elif op == XOR:
            regs[a] = regs[a] ^ regs[b]
        elif op == JMP:
            if imm >= n:
                return ST_TRAPPED, rip, steps, (_GP, None)
            rip = imm
            steps += 1
            continue
        elif op == JNZ:
            if regs[a]:
                if imm >= n:
                    return ST_TRAPPED, rip, steps, (_GP, None)
                rip = imm
                steps += 1
                continue
        elif op == SYSCALL:
            return ST_EXITED, rip + 1, steps + 1, (imm, (regs[a], regs[b], regs[c]))
        elif op == FAULT:
            return ST_TRAPPED, rip, steps, (imm if imm in _KINDS else _UD, None)
        elif op == HALT:
            return ST_HALTED, rip, steps, None
        else:
            return ST_TRAPPED, rip, steps, (_UD, None)
        rip += 1
        steps += 1
