"""Deterministic bytecode machine used for enclave and App code.

The interpreter loop comes in two builds: the compiled ``_kernel`` extension
and the pure-Python ``_pyinterp`` fallback.  The compiled one is used when it
imports, unless ``NESTEDSGX_PURE_PYTHON`` is set.
"""
from __future__ import annotations

import os

from . import _pyinterp
from .asm import assemble, disassemble
from .isa import (
    INSTR_SIZE,
    NUM_REGS,
    Continue,
    Halted,
    Instr,
    Op,
    Program,
    RunResult,
    Status,
    StepOutcome,
    SyscallRequest,
    Trap,
)

BACKENDS = {"python": _pyinterp.run}
try:
    from . import _kernel
except ImportError:  # extension not built
    _kernel = None
else:
    BACKENDS["compiled"] = _kernel.run

if os.environ.get("NESTEDSGX_PURE_PYTHON") or _kernel is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"

__all__ = [
    "BACKEND", "BACKENDS", "INSTR_SIZE", "NUM_REGS", "Continue", "Halted", "Instr", "Op",
    "Program", "RunResult", "Status", "StepOutcome", "SyscallRequest", "Trap",
    "assemble", "disassemble", "run", "step",
]


def run(program: Program, regs, rip: int, budget: int, load, store,
        backend: str | None = None) -> RunResult:
    """Run from instruction index ``rip`` for at most ``budget`` retired instructions.

    ``load(gva) -> int`` and ``store(gva, value)`` perform 64-bit memory
    accesses and raise :class:`MemTrap` on a fault.  ``regs`` (an
    ``array('Q')`` of 16) is updated in place.
    """
    if budget < 1:
        raise ValueError("budget must be at least one instruction")
    impl = BACKENDS[backend or BACKEND]
    return RunResult.from_raw(impl(program, regs, rip, budget, load, store))


def step(program: Program, regs, rip: int, load, store) -> tuple[StepOutcome, int]:
    """Execute a single instruction.  Returns the outcome and the next rip."""
    res = RunResult.from_raw(_pyinterp.run(program, regs, rip, 1, load, store))
    if res.status is Status.BUDGET_EXHAUSTED:
        return Continue(), res.rip
    if res.status is Status.EXITED:
        return SyscallRequest(res.leaf, res.args), res.rip
    if res.status is Status.TRAPPED:
        return Trap(res.exception, res.fault), res.rip
    return Halted(), res.rip
