"""Text assembly for bytecode programs.

One instruction per line; ``;`` or ``#`` start a comment; ``name:`` defines a
label usable as a jump target.  Forms::

    loadi r1, 0x10
    load  r2, [0x7f0000000000]
    store [0x7f0000000008], r2
    add   r1, r2
    xor   r1, r2
    jmp   loop
    jnz   r1, loop
    syscall EEXIT            ; optional argument registers: syscall EREPORT, r1, r2
    fault PageFault
    halt
    .equ PARAM, 0x70000000   ; named constant, usable as PARAM+0x18 in any operand
"""
from __future__ import annotations

import re

from ..errors import ExceptionKind, ParseError
from ..leaves import Leaf, leaf_name
from .isa import Instr, Op, Program

_REG = re.compile(r"^r(\d+)$", re.IGNORECASE)
_MEM = re.compile(r"^\[\s*(.+?)\s*\]$")
_TERM = re.compile(r"\s*([+-]?)\s*([A-Za-z_]\w*|0[xX][0-9a-fA-F_]+|0[bB][01_]+|0[oO][0-7_]+|\d[\d_]*)\s*")


def _reg(tok: str, line: int) -> int:
    m = _REG.match(tok)
    if not m or int(m.group(1)) >= 16:
        raise ParseError(f"expected register r0..r15, got {tok!r}", line=line)
    return int(m.group(1))


def _int(tok: str, line: int, symbols: dict[str, int] | None = None) -> int:
    """Integer literal or a sum/difference of literals and ``.equ`` names."""
    symbols = symbols or {}
    pos, total, first = 0, 0, True
    while pos < len(tok):
        m = _TERM.match(tok, pos)
        if not m or m.end() == pos or (not first and not m.group(1)):
            raise ParseError(f"expected integer, got {tok!r}", line=line)
        word = m.group(2)
        if word[0].isalpha() or word[0] == "_":
            if word not in symbols:
                raise ParseError(f"undefined symbol {word!r}", line=line)
            value = symbols[word]
        else:
            value = int(word, 0)
        total += -value if m.group(1) == "-" else value
        pos, first = m.end(), False
    if first:
        raise ParseError("expected integer, got nothing", line=line)
    return total


def _mem(tok: str, line: int, symbols: dict[str, int] | None = None) -> int:
    m = _MEM.match(tok)
    if not m:
        raise ParseError(f"expected memory operand [addr], got {tok!r}", line=line)
    return _int(m.group(1), line, symbols)


def assemble(text: str, base_gva: int = 0, entry: str | int = 0,
             symbols: dict[str, int] | None = None) -> Program:
    """Assemble ``text``; ``entry`` is a label or an instruction index.

    ``symbols`` predefines ``.equ`` names (the loader passes ``PARAM`` this way).
    """
    lines: list[tuple[int, str, list[str]]] = []
    labels: dict[str, int] = {}
    syms: dict[str, int] = dict(symbols or {})
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = re.split(r"[;#]", raw, maxsplit=1)[0].strip()
        while body:
            m = re.match(r"^([A-Za-z_][\w.]*):\s*(.*)$", body)
            if not m:
                break
            if m.group(1) in labels:
                raise ParseError(f"duplicate label {m.group(1)!r}", line=lineno)
            labels[m.group(1)] = len(lines)
            body = m.group(2).strip()
        if not body:
            continue
        mnemonic, _, rest = body.partition(" ")
        operands = [t.strip() for t in rest.split(",")] if rest.strip() else []
        if mnemonic.lower() == ".equ":
            if len(operands) != 2 or not re.match(r"^[A-Za-z_]\w*$", operands[0]):
                raise ParseError(".equ takes a name and a value", line=lineno)
            syms[operands[0]] = _int(operands[1], lineno, syms)
            continue
        lines.append((lineno, mnemonic.lower(), operands))

    def target(tok: str, line: int) -> int:
        if tok in labels:
            return labels[tok]
        return _int(tok, line, syms)

    out: list[Instr] = []
    for lineno, mn, ops in lines:
        def need(k: int) -> None:
            if len(ops) != k:
                raise ParseError(f"{mn} takes {k} operand(s), got {len(ops)}", line=lineno)
        if mn == "loadi":
            need(2)
            out.append(Instr.load_imm(_reg(ops[0], lineno), _int(ops[1], lineno, syms)))
        elif mn == "load":
            need(2)
            out.append(Instr.load(_reg(ops[0], lineno), _mem(ops[1], lineno, syms)))
        elif mn == "store":
            need(2)
            out.append(Instr.store(_mem(ops[0], lineno, syms), _reg(ops[1], lineno)))
        elif mn in ("add", "xor"):
            need(2)
            make = Instr.add if mn == "add" else Instr.xor
            out.append(make(_reg(ops[0], lineno), _reg(ops[1], lineno)))
        elif mn == "jmp":
            need(1)
            out.append(Instr.jmp(target(ops[0], lineno)))
        elif mn == "jnz":
            need(2)
            out.append(Instr.jnz(_reg(ops[0], lineno), target(ops[1], lineno)))
        elif mn == "syscall":
            if not 1 <= len(ops) <= 4:
                raise ParseError("syscall takes a leaf and up to three registers", line=lineno)
            try:
                leaf = Leaf.lookup(ops[0])
            except ValueError:
                raise ParseError(f"unknown leaf {ops[0]!r}", line=lineno) from None
            regs = [_reg(t, lineno) for t in ops[1:]] + [0] * (4 - len(ops))
            out.append(Instr.syscall(leaf, *regs))
        elif mn == "fault":
            need(1)
            try:
                kind = ExceptionKind.from_label(ops[0])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            out.append(Instr.trigger_fault(kind))
        elif mn == "halt":
            need(0)
            out.append(Instr.halt())
        else:
            raise ParseError(f"unknown mnemonic {mn!r}", line=lineno)

    if isinstance(entry, str):
        if entry not in labels:
            raise ParseError(f"entry label {entry!r} not defined")
        entry = labels[entry]
    try:
        return Program(tuple(out), entry, base_gva).validate()
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def disassemble(program: Program) -> str:
    lines = []
    for ins in program.instructions:
        op = ins.op
        if op is Op.LOADI:
            lines.append(f"loadi r{ins.a}, {ins.imm:#x}")
        elif op is Op.LOAD:
            lines.append(f"load r{ins.a}, [{ins.imm:#x}]")
        elif op is Op.STORE:
            lines.append(f"store [{ins.imm:#x}], r{ins.a}")
        elif op in (Op.ADD, Op.XOR):
            lines.append(f"{op.name.lower()} r{ins.a}, r{ins.b}")
        elif op is Op.JMP:
            lines.append(f"jmp {ins.imm}")
        elif op is Op.JNZ:
            lines.append(f"jnz r{ins.a}, {ins.imm}")
        elif op is Op.SYSCALL:
            lines.append(f"syscall {leaf_name(ins.imm)}, r{ins.a}, r{ins.b}, r{ins.c}")
        elif op is Op.FAULT:
            try:
                lines.append(f"fault {ExceptionKind(ins.imm).label}")
            except ValueError:
                lines.append(".invalid")
        elif op is Op.HALT:
            lines.append("halt")
        else:
            lines.append(".invalid")
    return "\n".join(lines) + "\n"
