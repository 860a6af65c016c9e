"""Two-pass assembler and disassembler for the TinyMCU ISA.

Grammar, one statement per line::

    [label:] MNEMONIC [operand[, operand]]   [; comment]
    [label:] .org ADDRESS
    [label:] .word VALUE[, VALUE...]

Operands: ``rN`` registers, ``SP`` (readable via MOV), ``#expr`` immediates,
``&expr`` absolute addresses, ``@rN`` register-indirect, ``expr(rN)``
indexed, and bare expressions for jump/call targets.  An expression is a
number (any Python int literal base) or a label optionally followed by
``+n``/``-n``.  Label resolution is two-pass, so forward references work.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .isa import (INSTR_SIZE, Instr, Op, SP_REG, decode, format_instr,
                  M_ABS_LOAD, M_ABS_STORE, M_IDX_LOAD, M_IDX_STORE,
                  M_IMM, M_IND_LOAD, M_IND_STORE, M_REG)
from .mcu import ProgramImage, Segment


class AsmError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class AsmResult:
    image: ProgramImage
    symbols: dict[str, int] = field(default_factory=dict)


_LABEL_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*):")
_EXPR_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*([+-]\s*\d+)?$")
_IDX_RE = re.compile(r"^(.+)\(\s*[rR]([0-7])\s*\)$")

_NO_OPERAND = {"NOP": Op.NOP, "RET": Op.RET, "RETI": Op.RETI,
               "EINT": Op.EINT, "DINT": Op.DINT, "HALT": Op.HALT}
_JUMPS = {"JMP": Op.JMP, "JZ": Op.JZ, "JNZ": Op.JNZ, "CALL": Op.CALL}
_ALU = {"ADD": Op.ADD, "SUB": Op.SUB, "CMP": Op.CMP}


def _split_statement(line: str) -> str:
    return line.split(";", 1)[0].strip()


def _parse_reg(tok: str) -> int | None:
    m = re.fullmatch(r"[rR]([0-7])", tok.strip())
    return int(m.group(1)) if m else None


class _Pass:
    """Shared two-pass machinery: pass 1 sizes statements and collects
    labels, pass 2 encodes with everything resolvable."""

    def __init__(self, source: str):
        self.lines = source.splitlines()
        self.symbols: dict[str, int] = {}

    def _expr(self, text: str, line_no: int) -> int:
        text = text.strip()
        try:
            return int(text, 0)
        except ValueError:
            pass
        m = _EXPR_RE.match(text)
        if not m:
            raise AsmError(line_no, f"bad expression {text!r}")
        name, off = m.group(1), m.group(2)
        if name not in self.symbols:
            raise AsmError(line_no, f"undefined label {name!r}")
        value = self.symbols[name] + (int(off.replace(" ", "")) if off else 0)
        return value

    def _check16(self, value: int, line_no: int) -> int:
        if not 0 <= value <= 0xFFFF:
            raise AsmError(line_no, f"value {value:#x} outside 16-bit range")
        return value

    def run(self, collect: bool) -> list[Segment]:
        loc: int | None = None
        segments: list[Segment] = []
        cur_base, cur = None, bytearray()

        def flush():
            nonlocal cur_base, cur
            if cur_base is not None and cur:
                segments.append(Segment(cur_base, bytes(cur)))
            cur_base, cur = None, bytearray()

        for idx, raw in enumerate(self.lines, 1):
            stmt = _split_statement(raw)
            m = _LABEL_RE.match(stmt)
            if m:
                label = m.group(1)
                stmt = stmt[m.end():].strip()
                if loc is None:
                    raise AsmError(idx, "label before any .org")
                if collect:
                    if label in self.symbols:
                        raise AsmError(idx, f"duplicate label {label!r}")
                    self.symbols[label] = loc
            if not stmt:
                continue

            parts = stmt.split(None, 1)
            mnem = parts[0].upper()
            rest = parts[1] if len(parts) > 1 else ""

            if mnem == ".ORG":
                flush()
                try:
                    loc = self._check16(int(rest.strip(), 0), idx)
                except ValueError:
                    raise AsmError(idx, ".org needs a numeric address") from None
                cur_base = loc
                continue
            if loc is None:
                raise AsmError(idx, "code before any .org")
            if cur_base is None:
                cur_base = loc

            if mnem == ".WORD":
                for item in rest.split(","):
                    value = 0 if collect else self._check16(self._expr(item, idx), idx)
                    cur += value.to_bytes(2, "little")
                    loc += 2
                continue

            encoded = self._encode(mnem, rest, idx, collect)
            cur += encoded
            loc += len(encoded)
        flush()
        return segments

    def _encode(self, mnem: str, rest: str, line_no: int, sizing: bool) -> bytes:
        if sizing:
            # pass 1 only needs the width; every instruction is 4 bytes
            if mnem not in _NO_OPERAND and mnem not in _JUMPS and mnem not in _ALU \
                    and mnem not in ("MOV", "CALLI", "PUSH", "POP"):
                raise AsmError(line_no, f"unknown mnemonic {mnem!r}")
            return bytes(INSTR_SIZE)

        if mnem in _NO_OPERAND:
            if rest.strip():
                raise AsmError(line_no, f"{mnem} takes no operands")
            return Instr(_NO_OPERAND[mnem]).encode()
        if mnem in _JUMPS:
            target = self._check16(self._expr(rest, line_no), line_no)
            return Instr(_JUMPS[mnem], imm=target).encode()
        if mnem == "CALLI":
            reg = _parse_reg(rest)
            if reg is None:
                raise AsmError(line_no, "CALLI needs a register")
            return Instr(Op.CALLI, rs=reg).encode()
        if mnem == "PUSH":
            reg = _parse_reg(rest)
            if reg is None:
                raise AsmError(line_no, "PUSH needs a register")
            return Instr(Op.PUSH, rs=reg).encode()
        if mnem == "POP":
            reg = _parse_reg(rest)
            if reg is None:
                raise AsmError(line_no, "POP needs a register")
            return Instr(Op.POP, rd=reg).encode()

        ops = [o.strip() for o in rest.split(",")]
        if len(ops) != 2:
            raise AsmError(line_no, f"{mnem} needs two operands")
        dst, src = ops

        if mnem in _ALU:
            rd = _parse_reg(dst)
            if rd is None:
                raise AsmError(line_no, f"{mnem} destination must be a register")
            rs = _parse_reg(src)
            if rs is not None:
                return Instr(_ALU[mnem], M_REG, rd=rd, rs=rs).encode()
            if src.startswith("#"):
                imm = self._check16(self._expr(src[1:], line_no), line_no)
                return Instr(_ALU[mnem], M_IMM, rd=rd, imm=imm).encode()
            raise AsmError(line_no, f"bad {mnem} source {src!r}")

        if mnem == "MOV":
            return self._encode_mov(dst, src, line_no)
        raise AsmError(line_no, f"unknown mnemonic {mnem!r}")

    def _encode_mov(self, dst: str, src: str, line_no: int) -> bytes:
        rd = _parse_reg(dst)
        rs = _parse_reg(src)
        if rd is not None:
            if src.upper() == "SP":
                return Instr(Op.MOV, M_REG, rd=rd, rs=SP_REG).encode()
            if rs is not None:
                return Instr(Op.MOV, M_REG, rd=rd, rs=rs).encode()
            if src.startswith("#"):
                imm = self._check16(self._expr(src[1:], line_no), line_no)
                return Instr(Op.MOV, M_IMM, rd=rd, imm=imm).encode()
            if src.startswith("&"):
                imm = self._check16(self._expr(src[1:], line_no), line_no)
                return Instr(Op.MOV, M_ABS_LOAD, rd=rd, imm=imm).encode()
            if src.startswith("@"):
                reg = _parse_reg(src[1:])
                if reg is None:
                    raise AsmError(line_no, f"bad indirect operand {src!r}")
                return Instr(Op.MOV, M_IND_LOAD, rd=rd, rs=reg).encode()
            m = _IDX_RE.match(src)
            if m:
                imm = self._check16(self._expr(m.group(1), line_no), line_no)
                return Instr(Op.MOV, M_IDX_LOAD, rd=rd,
                             rs=int(m.group(2)), imm=imm).encode()
            raise AsmError(line_no, f"bad MOV source {src!r}")
        if rs is None:
            raise AsmError(line_no, f"bad MOV operands {dst!r}, {src!r}")
        if dst.startswith("&"):
            imm = self._check16(self._expr(dst[1:], line_no), line_no)
            return Instr(Op.MOV, M_ABS_STORE, rs=rs, imm=imm).encode()
        if dst.startswith("@"):
            reg = _parse_reg(dst[1:])
            if reg is None:
                raise AsmError(line_no, f"bad indirect operand {dst!r}")
            return Instr(Op.MOV, M_IND_STORE, rd=reg, rs=rs).encode()
        m = _IDX_RE.match(dst)
        if m:
            imm = self._check16(self._expr(m.group(1), line_no), line_no)
            return Instr(Op.MOV, M_IDX_STORE, rd=int(m.group(2)),
                         rs=rs, imm=imm).encode()
        raise AsmError(line_no, f"bad MOV destination {dst!r}")


def assemble(source: str, entry: int = 0x8000) -> AsmResult:
    """Assemble ``source`` into an image whose boot entry is ``entry``."""
    first = _Pass(source)
    first.run(collect=True)
    second = _Pass(source)
    second.symbols = first.symbols
    segments = second.run(collect=False)
    return AsmResult(ProgramImage(entry, tuple(segments)), dict(first.symbols))


def disassemble(data: bytes, base: int) -> list[tuple[int, str]]:
    """Canonical listing of a code blob starting at address ``base``."""
    out = []
    for off in range(0, len(data) - len(data) % INSTR_SIZE, INSTR_SIZE):
        ins = decode(data, off)
        out.append((base + off, format_instr(ins)))
    return out


def disassemble_image(image: ProgramImage) -> list[tuple[int, str]]:
    out = []
    for seg in image.segments:
        out.extend(disassemble(seg.data, seg.base))
    return out
