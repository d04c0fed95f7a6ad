"""Instruction set, binary encoding and program container for the bytecode machine.

Each instruction encodes to 16 bytes: opcode, three register/operand bytes,
four bytes of padding and a 64-bit little-endian immediate.  An all-zero
slot decodes as ``INVALID`` so unused code-page space traps when executed.
"""
from __future__ import annotations

import enum
import struct
from array import array
from dataclasses import dataclass
from functools import cached_property

from ..errors import ExceptionKind

INSTR_SIZE = 16
NUM_REGS = 16
MASK64 = (1 << 64) - 1
_FMT = struct.Struct("<BBBB4xQ")


class Op(enum.IntEnum):
    INVALID = 0
    LOADI = 1
    LOAD = 2
    STORE = 3
    ADD = 4
    XOR = 5
    JMP = 6
    JNZ = 7
    SYSCALL = 8
    FAULT = 9
    HALT = 10


@dataclass(frozen=True)
class Instr:
    op: Op
    a: int = 0
    b: int = 0
    c: int = 0
    imm: int = 0

    def __post_init__(self) -> None:
        if self.op in (Op.LOADI, Op.LOAD, Op.STORE, Op.ADD, Op.XOR, Op.JNZ, Op.SYSCALL):
            for r in (self.a, self.b, self.c):
                if not 0 <= r < NUM_REGS:
                    raise ValueError(f"register index {r} out of range in {self.op.name}")
        object.__setattr__(self, "imm", self.imm & MASK64)

    # Constructors named after the instruction forms.
    @classmethod
    def load_imm(cls, reg: int, value: int) -> "Instr":
        return cls(Op.LOADI, reg, imm=value)

    @classmethod
    def load(cls, reg: int, gva: int) -> "Instr":
        return cls(Op.LOAD, reg, imm=gva)

    @classmethod
    def store(cls, gva: int, reg: int) -> "Instr":
        return cls(Op.STORE, reg, imm=gva)

    @classmethod
    def add(cls, dst: int, src: int) -> "Instr":
        return cls(Op.ADD, dst, src)

    @classmethod
    def xor(cls, dst: int, src: int) -> "Instr":
        return cls(Op.XOR, dst, src)

    @classmethod
    def jmp(cls, target: int) -> "Instr":
        return cls(Op.JMP, imm=target)

    @classmethod
    def jnz(cls, reg: int, target: int) -> "Instr":
        return cls(Op.JNZ, reg, imm=target)

    @classmethod
    def syscall(cls, leaf: int, a: int = 0, b: int = 0, c: int = 0) -> "Instr":
        return cls(Op.SYSCALL, a, b, c, imm=leaf)

    @classmethod
    def trigger_fault(cls, kind: ExceptionKind) -> "Instr":
        return cls(Op.FAULT, imm=int(kind))

    @classmethod
    def halt(cls) -> "Instr":
        return cls(Op.HALT)

    def encode(self) -> bytes:
        return _FMT.pack(self.op, self.a, self.b, self.c, self.imm)

    @classmethod
    def decode(cls, raw: bytes) -> "Instr":
        op, a, b, c, imm = _FMT.unpack(raw)
        try:
            opcode = Op(op)
        except ValueError:
            return cls(Op.INVALID)
        if opcode in (Op.LOADI, Op.LOAD, Op.STORE, Op.ADD, Op.XOR, Op.JNZ, Op.SYSCALL) and max(a, b, c) >= NUM_REGS:
            return cls(Op.INVALID)
        return cls(opcode, a, b, c, imm)


@dataclass(frozen=True)
class Program:
    """Straight-line array of instructions placed at ``base_gva``.

    Jump immediates are instruction indices into this program.  ``strict``
    programs (assembled ones) have every jump target checked up front;
    programs decoded from memory trap on bad targets at run time instead.
    """

    instructions: tuple[Instr, ...]
    entry: int = 0
    base_gva: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "instructions", tuple(self.instructions))

    def validate(self) -> "Program":
        n = len(self.instructions)
        if not 0 <= self.entry < n:
            raise ValueError(f"entry {self.entry} outside program of {n} instructions")
        for i, ins in enumerate(self.instructions):
            if ins.op in (Op.JMP, Op.JNZ) and not 0 <= ins.imm < n:
                raise ValueError(f"instruction {i}: jump target {ins.imm} out of range")
        return self

    def __len__(self) -> int:
        return len(self.instructions)

    def encode(self) -> bytes:
        return b"".join(ins.encode() for ins in self.instructions)

    @classmethod
    def decode(cls, raw: bytes, base_gva: int = 0, entry: int = 0) -> "Program":
        if len(raw) % INSTR_SIZE:
            raise ValueError("code length is not a multiple of the instruction size")
        return cls(tuple(Instr.decode(raw[i:i + INSTR_SIZE]) for i in range(0, len(raw), INSTR_SIZE)),
                   entry, base_gva)

    def gva_of(self, index: int) -> int:
        return self.base_gva + index * INSTR_SIZE

    def index_of(self, gva: int) -> int | None:
        off = gva - self.base_gva
        if off < 0 or off % INSTR_SIZE or off // INSTR_SIZE >= len(self.instructions):
            return None
        return off // INSTR_SIZE

    @cached_property
    def rows(self) -> tuple[tuple[int, int, int, int, int], ...]:
        return tuple((int(i.op), i.a, i.b, i.c, i.imm) for i in self.instructions)

    @cached_property
    def flat(self) -> array:
        """Five signed 64-bit words per instruction, for the compiled interpreter."""
        out = array("q")
        for op, a, b, c, imm in self.rows:
            out.extend((op, a, b, c, imm - (1 << 64) if imm >> 63 else imm))
        return out


class Status(enum.Enum):
    EXITED = "Exited"
    TRAPPED = "Trapped"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    HALTED = "Halted"


# Integer codes shared with the compiled kernel.
ST_EXITED, ST_TRAPPED, ST_BUDGET, ST_HALTED = 0, 1, 2, 3
_STATUS = {ST_EXITED: Status.EXITED, ST_TRAPPED: Status.TRAPPED,
           ST_BUDGET: Status.BUDGET_EXHAUSTED, ST_HALTED: Status.HALTED}


@dataclass(frozen=True)
class RunResult:
    status: Status
    rip: int
    steps: int
    leaf: int | None = None
    args: tuple[int, ...] = ()
    exception: ExceptionKind | None = None
    fault: object = None

    @classmethod
    def from_raw(cls, raw: tuple) -> "RunResult":
        code, rip, steps, payload = raw
        status = _STATUS[code]
        if status is Status.EXITED:
            leaf, args = payload
            return cls(status, rip, steps, leaf=leaf, args=tuple(args))
        if status is Status.TRAPPED:
            kind, fault = payload
            return cls(status, rip, steps, exception=ExceptionKind(kind), fault=fault)
        return cls(status, rip, steps)


@dataclass(frozen=True)
class Continue:
    pass


@dataclass(frozen=True)
class Trap:
    exception: ExceptionKind
    fault: object = None


@dataclass(frozen=True)
class SyscallRequest:
    leaf: int
    args: tuple[int, ...]


@dataclass(frozen=True)
class Halted:
    pass


StepOutcome = Continue | Trap | SyscallRequest | Halted
