# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled interpreter loop.  Semantics mirror ``_pyinterp.run`` exactly."""

from nestedsgx.errors import MemTrap

cdef enum:
    OP_INVALID = 0
    OP_LOADI = 1
    OP_LOAD = 2
    OP_STORE = 3
    OP_ADD = 4
    OP_XOR = 5
    OP_JMP = 6
    OP_JNZ = 7
    OP_SYSCALL = 8
    OP_FAULT = 9
    OP_HALT = 10

cdef enum:
    ST_EXITED = 0
    ST_TRAPPED = 1
    ST_BUDGET = 2
    ST_HALTED = 3

cdef enum:
    EXC_UD = 6
    EXC_GP = 13
    EXC_PF = 14
    EXC_RMP = 29
    EXC_TIMER = 32


cdef inline bint _known_kind(unsigned long long k):
    return k == EXC_UD or k == EXC_GP or k == EXC_PF or k == EXC_RMP or k == EXC_TIMER


def run(program, regs, Py_ssize_t rip, Py_ssize_t budget, load, store):
    cdef const long long[:] code = program.flat
    cdef unsigned long long[:] r = regs
    cdef Py_ssize_t n = code.shape[0] // 5
    cdef Py_ssize_t steps = 0
    cdef Py_ssize_t base
    cdef long long op, a, b, c
    cdef unsigned long long imm
    while True:
        if steps >= budget:
            return ST_BUDGET, rip, steps, None
        if rip < 0 or rip >= n:
            return ST_TRAPPED, rip, steps, (EXC_GP, None)
        base = rip * 5
        op = code[base]
        a = code[base + 1]
        b = code[base + 2]
        c = code[base + 3]
        imm = <unsigned long long>code[base + 4]
        if op == OP_LOADI:
            r[a] = imm
        elif op == OP_LOAD:
            try:
                r[a] = load(imm)
            except MemTrap as trap:
                return ST_TRAPPED, rip, steps, (int(trap.kind), trap.fault)
        elif op == OP_STORE:
            try:
                store(imm, r[a])
            except MemTrap as trap:
                return ST_TRAPPED, rip, steps, (int(trap.kind), trap.fault)
        elif op == OP_ADD:
            r[a] = r[a] + r[b]
        elif op == OP_XOR:
            r[a] = r[a] ^ r[b]
        elif op == OP_JMP:
            if imm >= <unsigned long long>n:
                return ST_TRAPPED, rip, steps, (EXC_GP, None)
            rip = <Py_ssize_t>imm
            steps += 1
            continue
        elif op == OP_JNZ:
            if r[a] != 0:
                if imm >= <unsigned long long>n:
                    return ST_TRAPPED, rip, steps, (EXC_GP, None)
                rip = <Py_ssize_t>imm
                steps += 1
                continue
        elif op == OP_SYSCALL:
            return ST_EXITED, rip + 1, steps + 1, (imm, (r[a], r[b], r[c]))
        elif op == OP_FAULT:
            return ST_TRAPPED, rip, steps, (imm if _known_kind(imm) else EXC_UD, None)
        elif op == OP_HALT:
            return ST_HALTED, rip, steps, None
        else:
            return ST_TRAPPED, rip, steps, (EXC_UD, None)
        rip += 1
        steps += 1
