"""TinyMCU: a minimal deterministic 16-bit core that executes images in place
from program memory and exposes, for every cycle, the signals a hardware
security monitor observes (program counter, opcode tag, memory-write strobes,
DMA activity, interrupt state).

Each call to :func:`step` retires exactly one instruction, or performs one
interrupt-acceptance cycle, and yields one :class:`SignalBus` record.  The
record is fully determined *before* state is mutated (``predict_bus``), so a
monitor can veto the cycle and convert it into a reset without any effect
ever landing in memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

from .isa import INSTR_SIZE, DecodeError, Instr, Op, SP_REG, decode
from .isa import (M_ABS_LOAD, M_ABS_STORE, M_IDX_LOAD, M_IDX_STORE,
                  M_IMM, M_IND_LOAD, M_IND_STORE, M_REG)

MASK16 = 0xFFFF

NMI_LINE = 0          # hardwired to the trusted-software entry point
NUM_IRQ_LINES = 8     # lines 1..7 are maskable, vectored through the IVT


class MachineError(Exception):
    pass


class ImageError(MachineError):
    """Image cannot be loaded (overlap, overflow, bad entry point)."""


class LayoutError(MachineError):
    pass


@dataclass(frozen=True)
class MemoryLayout:
    """Physical memory map.  All protected regions are pairwise disjoint; the
    trusted region lives in PMEM, metadata / control-flow log / IVT / the
    memory-mapped I/O words live in DMEM."""

    pmem_base: int = 0x8000
    pmem_size: int = 0x8000
    dmem_base: int = 0x0000
    dmem_size: int = 0x4000
    tcb_min: int = 0x8000          # trusted-software entry (boot target)
    tcb_max: int = 0x8FFC          # trusted-software exit instruction
    metadata_base: int = 0x0100
    metadata_size: int = 10        # chal u32 | ar_min u16 | ar_max u16 | cf_size u16 (big-endian)
    cflog_base: int = 0x0200
    cflog_size: int = 256          # bytes; 4 bytes per entry
    ivt_base: int = 0x0040         # 8 little-endian vector words
    timer_reg: int = 0x0050        # u32 timer reload, writable only from the TCB
    input_base: int = 0x0060       # u16 length + payload, the one I/O peripheral
    input_size: int = 0x80

    def __post_init__(self):
        regions = [
            ("metadata", self.metadata_base, self.metadata_size),
            ("cflog", self.cflog_base, self.cflog_size),
            ("ivt", self.ivt_base, 2 * NUM_IRQ_LINES),
            ("timer", self.timer_reg, 4),
            ("input", self.input_base, self.input_size),
        ]
        for name, base, size in regions:
            if not (self.dmem_base <= base and base + size <= self.dmem_end):
                raise LayoutError(f"{name} region outside DMEM")
        for i, (na, ba, sa) in enumerate(regions):
            for nb, bb, sb in regions[i + 1:]:
                if ba < bb + sb and bb < ba + sa:
                    raise LayoutError(f"{na} overlaps {nb}")
        if not (self.pmem_base <= self.tcb_min <= self.tcb_max < self.pmem_end):
            raise LayoutError("TCB outside PMEM")
        if self.cflog_size % 4:
            raise LayoutError("cflog size must be a multiple of 4")

    @property
    def pmem_end(self) -> int:
        return self.pmem_base + self.pmem_size

    @property
    def dmem_end(self) -> int:
        return self.dmem_base + self.dmem_size

    @property
    def s_base(self) -> int:
        """First address of untrusted application code (just past the TCB)."""
        return self.tcb_max + INSTR_SIZE

    @property
    def max_entries(self) -> int:
        return self.cflog_size // 4

    def in_pmem(self, a: int) -> bool:
        return self.pmem_base <= a < self.pmem_end

    def in_dmem(self, a: int) -> bool:
        return self.dmem_base <= a < self.dmem_end

    def in_tcb(self, a: int) -> bool:
        return self.tcb_min <= a <= self.tcb_max

    def in_metadata(self, a: int) -> bool:
        return self.metadata_base <= a < self.metadata_base + self.metadata_size

    def in_cflog(self, a: int) -> bool:
        return self.cflog_base <= a < self.cflog_base + self.cflog_size

    def in_timer(self, a: int) -> bool:
        return self.timer_reg <= a < self.timer_reg + 4


@dataclass(frozen=True)
class Segment:
    base: int
    data: bytes


@dataclass(frozen=True)
class ProgramImage:
    """Loadable image: code/data segments plus the boot entry point.

    File format (little-endian): magic ``TMCU``, entry u16, n_segments u16,
    then per segment base u16, length u16, raw bytes.
    """

    entry: int
    segments: tuple[Segment, ...]

    MAGIC = b"TMCU"

    def to_bytes(self) -> bytes:
        out = bytearray(self.MAGIC)
        out += struct.pack("<HH", self.entry, len(self.segments))
        for seg in self.segments:
            out += struct.pack("<HH", seg.base, len(seg.data))
            out += seg.data
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ProgramImage":
        if raw[:4] != cls.MAGIC:
            raise ImageError("bad magic")
        entry, nseg = struct.unpack_from("<HH", raw, 4)
        off, segs = 8, []
        for _ in range(nseg):
            if off + 4 > len(raw):
                raise ImageError("truncated segment header")
            base, length = struct.unpack_from("<HH", raw, off)
            off += 4
            if off + length > len(raw):
                raise ImageError("truncated segment data")
            segs.append(Segment(base, bytes(raw[off:off + length])))
            off += length
        return cls(entry, tuple(segs))


@dataclass
class DmaConfig:
    """External DMA engine: while enabled it emits one byte write per cycle."""
    enabled: bool = False
    next_addr: int = 0
    remaining: int = 0
    value: int = 0


@dataclass
class SignalBus:
    """One cycle's worth of monitored signals.

    ``pc`` is the address of the retiring instruction; on an
    interrupt-acceptance cycle no instruction retires (``inst is None``) and
    ``pc`` holds the interrupted address.  ``pc_prev`` is the address of the
    most recently *retired* instruction, ``pc_next`` the address execution
    continues at.  Consecutive records chain: next.pc == this.pc_next.
    """
    pc: int
    pc_prev: int
    pc_next: int
    inst: Op | None
    w_en: bool = False
    r_en: bool = False
    d_addr: int = 0
    dma_en: bool = False
    dma_addr: int = 0
    irq: bool = False
    gie: bool = False
    irq_acc: bool = False
    nmi: bool = False
    irq_line: int | None = None   # line being accepted when irq_acc is set


@dataclass
class McuState:
    layout: MemoryLayout
    pmem: bytearray
    dmem: bytearray
    pc: int = 0
    pc_prev: int = 0
    regs: list[int] = field(default_factory=lambda: [0] * 8)
    sp: int = 0
    z: bool = False
    gie: bool = False
    halted: bool = False
    cycle: int = 0
    retired: int = 0
    pending_irq: dict[int, int] = field(default_factory=dict)  # line -> retired count at raise
    dma: DmaConfig = field(default_factory=DmaConfig)

    def copy(self) -> "McuState":
        c = McuState(self.layout, bytearray(self.pmem), bytearray(self.dmem),
                     self.pc, self.pc_prev, list(self.regs), self.sp, self.z,
                     self.gie, self.halted, self.cycle, self.retired,
                     dict(self.pending_irq), replace(self.dma))
        return c

    # -- memory helpers (little-endian words; METADATA is big-endian and is
    #    accessed only through the monitor/wire helpers) --

    def read16(self, addr: int) -> int:
        lay = self.layout
        if lay.in_dmem(addr) and lay.in_dmem(addr + 1):
            off = addr - lay.dmem_base
            return self.dmem[off] | (self.dmem[off + 1] << 8)
        if lay.in_pmem(addr) and lay.in_pmem(addr + 1):
            off = addr - lay.pmem_base
            return self.pmem[off] | (self.pmem[off + 1] << 8)
        raise MachineError(f"read outside memory: {addr:#06x}")

    def write16(self, addr: int, value: int) -> None:
        value &= MASK16
        lay = self.layout
        if lay.in_dmem(addr) and lay.in_dmem(addr + 1):
            off = addr - lay.dmem_base
            self.dmem[off] = value & 0xFF
            self.dmem[off + 1] = value >> 8
            return
        if lay.in_pmem(addr) and lay.in_pmem(addr + 1):
            off = addr - lay.pmem_base
            self.pmem[off] = value & 0xFF
            self.pmem[off + 1] = value >> 8
            return
        raise MachineError(f"write outside memory: {addr:#06x}")

    def ivt_target(self, line: int) -> int:
        if line == NMI_LINE:
            return self.layout.tcb_min
        return self.read16(self.layout.ivt_base + 2 * line)


class FaultError(MachineError):
    """Execution fault (illegal opcode, misaligned pc, stack fault); the
    surrounding system routes it into a reset."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def render_pmem(image: ProgramImage, layout: MemoryLayout) -> bytes:
    """Full PMEM byte content an image produces (zero-filled elsewhere);
    what a verifier expects the device to attest."""
    pmem = bytearray(layout.pmem_size)
    for seg in image.segments:
        if layout.in_pmem(seg.base):
            off = seg.base - layout.pmem_base
            pmem[off:off + len(seg.data)] = seg.data
    return bytes(pmem)


def load_image(image: ProgramImage, layout: MemoryLayout) -> McuState:
    """Place an image in memory and return the boot state (pc at the TCB entry,
    interrupts and DMA disabled)."""
    if image.entry != layout.tcb_min:
        raise ImageError("entry point outside TCB")
    pmem = bytearray(layout.pmem_size)
    dmem = bytearray(layout.dmem_size)
    protected = [(layout.metadata_base, layout.metadata_size),
                 (layout.cflog_base, layout.cflog_size),
                 (layout.timer_reg, 4)]
    for seg in image.segments:
        end = seg.base + len(seg.data)
        if layout.in_pmem(seg.base):
            if end > layout.pmem_end:
                raise ImageError("image too large: segment past end of PMEM")
            pmem[seg.base - layout.pmem_base:end - layout.pmem_base] = seg.data
        elif layout.in_dmem(seg.base):
            if end > layout.dmem_end:
                raise ImageError("image too large: segment past end of DMEM")
            for base, size in protected:
                if seg.base < base + size and base < end:
                    raise ImageError("image too large: segment overlaps protected region")
            dmem[seg.base - layout.dmem_base:end - layout.dmem_base] = seg.data
        else:
            raise ImageError(f"segment base {seg.base:#06x} outside memory")
    st = McuState(layout, pmem, dmem)
    st.pc = st.pc_prev = layout.tcb_min
    st.sp = layout.dmem_end
    return st


def reset(state: McuState) -> McuState:
    """Hardware reset: execution restarts at the TCB entry with interrupts and
    DMA disabled.  PMEM and DMEM contents are preserved (in particular the
    metadata and control-flow log, so the post-reset report can carry them);
    the cycle counter keeps running."""
    state.pc = state.pc_prev = state.layout.tcb_min
    state.regs = [0] * 8
    state.sp = state.layout.dmem_end
    state.z = False
    state.gie = False
    state.halted = False
    state.pending_irq.clear()
    state.dma = DmaConfig()
    return state


def raise_irq(state: McuState, line: int) -> McuState:
    """Mark an interrupt line pending.  Maskable lines are accepted only while
    gie is set; the NMI line is accepted regardless."""
    if not (0 <= line < NUM_IRQ_LINES):
        raise MachineError(f"unknown irq line {line}")
    state.pending_irq.setdefault(line, state.retired)
    return state


def acceptable_line(state: McuState) -> int | None:
    """Lowest-numbered pending line that may be accepted this cycle: the line
    must have been pending while at least one instruction retired (the
    in-flight instruction), and maskable lines additionally require gie."""
    best = None
    for line, raised_at in state.pending_irq.items():
        if state.retired <= raised_at:
            continue
        if line != NMI_LINE and not state.gie:
            continue
        if best is None or line < best:
            best = line
    return best


def _fetch(state: McuState) -> Instr:
    pc = state.pc
    lay = state.layout
    if pc % 2:
        raise FaultError("misaligned-pc")
    if not (lay.in_pmem(pc) and pc + INSTR_SIZE <= lay.pmem_end):
        raise FaultError("pc-outside-pmem")
    try:
        return decode(state.pmem, pc - lay.pmem_base)
    except DecodeError:
        raise FaultError("illegal-opcode") from None


def _dma_ride(state: McuState, bus: SignalBus) -> None:
    if state.dma.enabled and state.dma.remaining > 0:
        bus.dma_en = True
        bus.dma_addr = state.dma.next_addr


def predict_acceptance(state: McuState, line: int) -> SignalBus:
    """Bus record for the cycle that commits the jump to an interrupt target.
    A maskable acceptance pushes the interrupted pc; the NMI acceptance does
    not touch the stack (the trusted-software context is held by the RoT)."""
    target = state.ivt_target(line)
    bus = SignalBus(pc=state.pc, pc_prev=state.pc_prev, pc_next=target,
                    inst=None, irq=True, gie=state.gie, irq_acc=True,
                    nmi=(line == NMI_LINE or NMI_LINE in state.pending_irq),
                    irq_line=line)
    if line != NMI_LINE:
        if state.sp - 2 < state.layout.dmem_base:
            raise FaultError("stack-overflow")
        bus.w_en = True
        bus.d_addr = (state.sp - 2) & MASK16
    _dma_ride(state, bus)
    return bus


def apply_acceptance(state: McuState, line: int) -> None:
    if line != NMI_LINE:
        state.sp -= 2
        state.write16(state.sp, state.pc)
    state.pending_irq.pop(line, None)
    state.pc = state.ivt_target(line)
    state.gie = False
    state.cycle += 1
    _dma_advance(state)


def predict_bus(state: McuState, ins: Instr) -> SignalBus:
    """Compute the full bus record for retiring ``ins`` without side effects."""
    pc = state.pc
    nxt = (pc + INSTR_SIZE) & MASK16
    bus = SignalBus(pc=pc, pc_prev=state.pc_prev, pc_next=nxt, inst=ins.op,
                    irq=bool(state.pending_irq), gie=state.gie,
                    nmi=NMI_LINE in state.pending_irq)
    op = ins.op
    if op is Op.MOV:
        m = ins.mode
        if m == M_ABS_LOAD:
            bus.r_en, bus.d_addr = True, ins.imm
        elif m == M_ABS_STORE:
            bus.w_en, bus.d_addr = True, ins.imm
        elif m == M_IND_LOAD:
            bus.r_en, bus.d_addr = True, state.regs[ins.rs]
        elif m == M_IND_STORE:
            bus.w_en, bus.d_addr = True, state.regs[ins.rd]
        elif m == M_IDX_LOAD:
            bus.r_en, bus.d_addr = True, (state.regs[ins.rs] + ins.imm) & MASK16
        elif m == M_IDX_STORE:
            bus.w_en, bus.d_addr = True, (state.regs[ins.rd] + ins.imm) & MASK16
    elif op in (Op.CALL, Op.CALLI, Op.PUSH):
        if state.sp - 2 < state.layout.dmem_base:
            raise FaultError("stack-overflow")
        bus.w_en, bus.d_addr = True, (state.sp - 2) & MASK16
        if op is Op.CALL:
            bus.pc_next = ins.imm
        elif op is Op.CALLI:
            bus.pc_next = state.regs[ins.rs]
    elif op in (Op.POP, Op.RET, Op.RETI):
        if not _sp_ok(state):
            raise FaultError("stack-underflow")
        bus.r_en, bus.d_addr = True, state.sp
        if op in (Op.RET, Op.RETI):
            bus.pc_next = state.read16(state.sp)
    elif op is Op.JMP:
        bus.pc_next = ins.imm
    elif op is Op.JZ:
        bus.pc_next = ins.imm if state.z else nxt
    elif op is Op.JNZ:
        bus.pc_next = ins.imm if not state.z else nxt
    elif op is Op.HALT:
        bus.pc_next = pc
    _dma_ride(state, bus)
    return bus


def _sp_ok(state: McuState) -> bool:
    return state.layout.dmem_base <= state.sp <= state.layout.dmem_end - 2


def _dma_advance(state: McuState) -> None:
    d = state.dma
    if d.enabled and d.remaining > 0:
        off = d.next_addr - state.layout.dmem_base
        if 0 <= off < len(state.dmem):
            self_write = True
        else:
            self_write = False
        if self_write:
            state.dmem[off] = d.value & 0xFF
        d.next_addr += 1
        d.remaining -= 1
        if d.remaining == 0:
            d.enabled = False


def apply_instr(state: McuState, ins: Instr, bus: SignalBus) -> None:
    """Commit the effects of ``ins``; ``bus`` must come from predict_bus on the
    same state."""
    op = ins.op
    r = state.regs
    if op is Op.MOV:
        m = ins.mode
        if m == M_IMM:
            r[ins.rd] = ins.imm
        elif m == M_REG:
            r[ins.rd] = state.sp if ins.rs == SP_REG else r[ins.rs]
        elif m in (M_ABS_LOAD, M_IND_LOAD, M_IDX_LOAD):
            r[ins.rd] = state.read16(bus.d_addr)
        else:
            src = r[ins.rs]
            state.write16(bus.d_addr, src)
    elif op in (Op.ADD, Op.SUB, Op.CMP):
        a = r[ins.rd]
        b = ins.imm if ins.mode == M_IMM else r[ins.rs]
        res = (a + b) & MASK16 if op is Op.ADD else (a - b) & MASK16
        state.z = res == 0
        if op is not Op.CMP:
            r[ins.rd] = res
    elif op in (Op.CALL, Op.CALLI):
        state.sp -= 2
        state.write16(state.sp, (bus.pc + INSTR_SIZE) & MASK16)
    elif op is Op.PUSH:
        state.sp -= 2
        state.write16(state.sp, r[ins.rs])
    elif op is Op.POP:
        r[ins.rd] = state.read16(state.sp)
        state.sp += 2
    elif op in (Op.RET, Op.RETI):
        state.sp += 2
        if op is Op.RETI:
            state.gie = True
    elif op is Op.EINT:
        state.gie = True
    elif op is Op.DINT:
        state.gie = False
    elif op is Op.HALT:
        state.halted = True
    state.pc_prev = bus.pc
    state.pc = bus.pc_next
    state.retired += 1
    state.cycle += 1
    _dma_advance(state)


def step(state: McuState) -> tuple[McuState, SignalBus]:
    """Execute one cycle with no monitor attached: accept the highest-priority
    eligible interrupt if any, otherwise retire one instruction.  Used by unit
    tests and as the reference path; the full system drives predict/apply
    itself so vetoes can precede commits."""
    if state.halted:
        raise MachineError("stepping a halted core")
    line = acceptable_line(state)
    if line is not None:
        bus = predict_acceptance(state, line)
        apply_acceptance(state, line)
        return state, bus
    ins = _fetch(state)
    bus = predict_bus(state, ins)
    apply_instr(state, ins, bus)
    return state, bus
