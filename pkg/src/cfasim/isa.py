"""TinyMCU instruction set: a 17-instruction, 16-bit ISA with fixed 4-byte encoding.

Every instruction occupies exactly 4 bytes:

    byte 0: (opcode class << 3) | addressing mode
    byte 1: (dst register << 4) | src register
    bytes 2-3: 16-bit immediate, little-endian

The fixed width makes disassembly trivially invertible, which the verifier
relies on when it rebuilds a control-flow graph from the expected binary.
Opcode class 0 is NOP so that zero-filled program memory decodes cleanly.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

INSTR_SIZE = 4

# src-register nibble that selects the stack pointer in register-move mode.
SP_REG = 0x8


class Op(enum.IntEnum):
    NOP = 0
    MOV = 1
    ADD = 2
    SUB = 3
    CMP = 4
    JMP = 5
    JZ = 6
    JNZ = 7
    CALL = 8
    CALLI = 9
    RET = 10
    RETI = 11
    PUSH = 12
    POP = 13
    EINT = 14
    DINT = 15
    HALT = 16


# MOV addressing modes (other classes use only IMM/REG).
M_IMM = 0        # rd := imm
M_REG = 1        # rd := rs        (rs == SP_REG reads the stack pointer)
M_ABS_LOAD = 2   # rd := mem16[imm]
M_ABS_STORE = 3  # mem16[imm] := rs
M_IND_LOAD = 4   # rd := mem16[rs]
M_IND_STORE = 5  # mem16[rd] := rs
M_IDX_LOAD = 6   # rd := mem16[rs + imm]
M_IDX_STORE = 7  # mem16[rd + imm] := rs

_MODES = {
    Op.NOP: (0,),
    Op.MOV: (M_IMM, M_REG, M_ABS_LOAD, M_ABS_STORE, M_IND_LOAD, M_IND_STORE,
             M_IDX_LOAD, M_IDX_STORE),
    Op.ADD: (M_IMM, M_REG),
    Op.SUB: (M_IMM, M_REG),
    Op.CMP: (M_IMM, M_REG),
    Op.JMP: (0,),
    Op.JZ: (0,),
    Op.JNZ: (0,),
    Op.CALL: (0,),
    Op.CALLI: (0,),
    Op.RET: (0,),
    Op.RETI: (0,),
    Op.PUSH: (0,),
    Op.POP: (0,),
    Op.EINT: (0,),
    Op.DINT: (0,),
    Op.HALT: (0,),
}

# Instructions that transfer control when they retire.  Conditional jumps
# count only when taken; the monitor infers that from pc_next != pc + 4.
BRANCH_OPS = frozenset({Op.JMP, Op.JZ, Op.JNZ, Op.CALL, Op.CALLI, Op.RET, Op.RETI})

# Instructions execution can never fall through (used by the verifier when it
# walks straight-line code between logged transfers).
NO_FALLTHROUGH_OPS = frozenset({Op.JMP, Op.CALL, Op.CALLI, Op.RET, Op.RETI, Op.HALT})


class DecodeError(ValueError):
    """Raised when 4 bytes do not form a valid TinyMCU instruction."""


@dataclass(frozen=True)
class Instr:
    op: Op
    mode: int = 0
    rd: int = 0
    rs: int = 0
    imm: int = 0

    def encode(self) -> bytes:
        return struct.pack("<BBH", (self.op << 3) | self.mode,
                           (self.rd << 4) | self.rs, self.imm)


def decode(raw: bytes | bytearray | memoryview, offset: int = 0) -> Instr:
    """Decode one instruction at ``offset``; raises DecodeError if invalid."""
    if offset + INSTR_SIZE > len(raw):
        raise DecodeError("truncated instruction")
    b0, b1, imm = struct.unpack_from("<BBH", raw, offset)
    cls, mode = b0 >> 3, b0 & 0x7
    try:
        op = Op(cls)
    except ValueError:
        raise DecodeError(f"unknown opcode class {cls}") from None
    if mode not in _MODES[op]:
        raise DecodeError(f"invalid mode {mode} for {op.name}")
    rd, rs = b1 >> 4, b1 & 0xF
    if rd > 7 or (rs > 7 and not (op is Op.MOV and mode == M_REG and rs == SP_REG)):
        raise DecodeError(f"invalid register nibble in {op.name}")
    return Instr(op, mode, rd, rs, imm)


def format_instr(ins: Instr) -> str:
    """Canonical assembly text for one instruction (round-trips through the assembler)."""
    op = ins.op
    if op in (Op.NOP, Op.RET, Op.RETI, Op.EINT, Op.DINT, Op.HALT):
        return op.name
    if op is Op.MOV:
        rd, rs, imm = f"r{ins.rd}", f"r{ins.rs}", ins.imm
        return {
            M_IMM: f"MOV {rd}, #{imm:#x}",
            M_REG: f"MOV {rd}, SP" if ins.rs == SP_REG else f"MOV {rd}, {rs}",
            M_ABS_LOAD: f"MOV {rd}, &{imm:#x}",
            M_ABS_STORE: f"MOV &{imm:#x}, {rs}",
            M_IND_LOAD: f"MOV {rd}, @{rs}",
            M_IND_STORE: f"MOV @{rd}, {rs}",
            M_IDX_LOAD: f"MOV {rd}, {imm:#x}({rs})",
            M_IDX_STORE: f"MOV {imm:#x}({rd}), {rs}",
        }[ins.mode]
    if op in (Op.ADD, Op.SUB, Op.CMP):
        src = f"#{ins.imm:#x}" if ins.mode == M_IMM else f"r{ins.rs}"
        return f"{op.name} r{ins.rd}, {src}"
    if op in (Op.JMP, Op.JZ, Op.JNZ, Op.CALL):
        return f"{op.name} {ins.imm:#x}"
    if op is Op.CALLI:
        return f"CALLI r{ins.rs}"
    if op is Op.PUSH:
        return f"PUSH r{ins.rs}"
    if op is Op.POP:
        return f"POP r{ins.rd}"
    raise AssertionError(op)
