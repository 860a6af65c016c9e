"""Control-flow attestation hardware model.

Five cooperating sub-monitors are evaluated against every bus record:

* boundary monitor  - vetoes illegal writes to the metadata / log regions
* branch monitor    - flags control-flow transfers, including a small FSM
                      that pins interrupt-induced jumps to the exact cycle
                      the core commits the jump
* log monitor       - tracks the log fill level, clears it on trusted-software
                      exit and asserts the flush trigger
* loop monitor      - compresses repeated backward jumps into one entry plus
                      an iteration counter, written in place
* logger            - appends (source, destination) pairs to the protected
                      log region in data memory

Everything here is a pure function of (bus record, monitor state, memory
view): replaying a recorded trace through a fresh monitor over the same
initial memory reproduces the identical log bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .isa import INSTR_SIZE, BRANCH_OPS, Op
from .mcu import MemoryLayout, SignalBus

# The flush trigger fires this many entries before the log is physically
# full.  Two slots are always enough for everything that can still land
# between the flush assertion and the trusted-software entry (one possible
# loop-counter commit plus the acceptance jump itself), so no transfer in
# the attested region is ever dropped.
FLUSH_RESERVE = 2

MD_FMT = ">IHHH"  # chal, ar_min, ar_max, cf_size; big-endian, wire-identical


class ResetReason(enum.Enum):
    CFLOG_WRITE = "cflog-write"
    METADATA_WRITE = "metadata-write"
    DMA_METADATA = "dma-metadata"
    TIMER_WRITE = "timer-write"
    TCB_PMEM_WRITE = "tcb-pmem-write"
    S_PMEM_WRITE = "s-pmem-write"
    IRQ_IN_TCB = "irq-in-tcb"
    DMA_IN_TCB = "dma-in-tcb"
    GIE_IN_TCB = "gie-in-tcb"
    ILLEGAL_TCB_ENTRY = "illegal-tcb-entry"
    ILLEGAL_TCB_EXIT = "illegal-tcb-exit"
    TRIGGER_SUPPRESSED = "trigger-suppressed"
    MACHINE_FAULT = "machine-fault"


class TriggerKind(enum.IntEnum):
    """Why the trusted software was invoked (wire annotation byte)."""
    BOOT = 1
    TIMER = 2
    LOG_FULL = 3
    REGION_END = 4
    VIOLATION = 5


@dataclass
class Metadata:
    """Decoded view of the protected metadata record."""
    chal: int = 0
    ar_min: int = 0
    ar_max: int = 0
    cf_size: int = 0

    def pack(self) -> bytes:
        return struct.pack(MD_FMT, self.chal, self.ar_min, self.ar_max, self.cf_size)

    @classmethod
    def unpack(cls, raw: bytes) -> "Metadata":
        return cls(*struct.unpack(MD_FMT, raw))


def read_metadata(dmem: bytearray, layout: MemoryLayout) -> Metadata:
    off = layout.metadata_base - layout.dmem_base
    return Metadata(*struct.unpack_from(MD_FMT, dmem, off))


def write_metadata(dmem: bytearray, layout: MemoryLayout, md: Metadata) -> None:
    off = layout.metadata_base - layout.dmem_base
    struct.pack_into(MD_FMT, dmem, off, md.chal, md.ar_min, md.ar_max, md.cf_size)


def read_log_entries(dmem: bytearray, layout: MemoryLayout, count: int) -> list[tuple[int, int]]:
    off = layout.cflog_base - layout.dmem_base
    return [struct.unpack_from(">HH", dmem, off + 4 * i) for i in range(count)]


# ---------------------------------------------------------------------------
# Boundary monitor
# ---------------------------------------------------------------------------

def modify_mem(bus: SignalBus, member) -> bool:
    """CPU or DMA write into the region described by predicate ``member``."""
    return (bus.w_en and member(bus.d_addr)) or (bus.dma_en and member(bus.dma_addr))


def boundary_check(bus: SignalBus, layout: MemoryLayout) -> ResetReason | None:
    """Veto writes that would corrupt the log or, from untrusted code or DMA,
    the metadata record."""
    if modify_mem(bus, layout.in_cflog):
        return ResetReason.CFLOG_WRITE
    if modify_mem(bus, layout.in_metadata) and not layout.in_tcb(bus.pc):
        return ResetReason.METADATA_WRITE
    if bus.dma_en and layout.in_metadata(bus.dma_addr):
        return ResetReason.DMA_METADATA
    return None


def timer_write_check(bus: SignalBus, layout: MemoryLayout) -> ResetReason | None:
    """The periodic-report deadline is configurable only by trusted software;
    DMA may never touch it."""
    if bus.w_en and layout.in_timer(bus.d_addr) and not layout.in_tcb(bus.pc):
        return ResetReason.TIMER_WRITE
    if bus.dma_en and layout.in_timer(bus.dma_addr):
        return ResetReason.TIMER_WRITE
    return None


# ---------------------------------------------------------------------------
# Branch monitor
# ---------------------------------------------------------------------------

WAIT, PEND, ACC = 0, 1, 2


@dataclass
class BranchFsm:
    """Three-state FSM tracking interrupt handling so the jump into a handler
    is attributed to the exact last-retired instruction."""
    state: int = WAIT

    def reset(self) -> None:
        self.state = WAIT

    def step(self, bus: SignalBus) -> bool:
        """Advance one cycle; returns call_irq (true exactly on the cycle the
        core commits the jump into a handler)."""
        s = self.state
        if s == WAIT:
            nxt = PEND if ((bus.irq and bus.gie) or bus.nmi) else WAIT
        elif s == PEND:
            nxt = ACC if bus.irq_acc else PEND
        else:
            nxt = WAIT
        # An acceptance can legitimately arrive while the FSM missed the
        # pend-cycle (back-to-back triggers): treat irq_acc as authoritative.
        if bus.irq_acc:
            nxt = ACC
        self.state = nxt
        return nxt == ACC


def is_branch_record(bus: SignalBus, call_irq: bool) -> bool:
    """Taken control-flow transfer on this record (instruction or interrupt)."""
    if call_irq:
        return True
    op = bus.inst
    if op is None or op not in BRANCH_OPS:
        return False
    if op in (Op.JZ, Op.JNZ) and bus.pc_next == (bus.pc + INSTR_SIZE) & 0xFFFF:
        return False      # not taken: no transfer occurs
    return True


def transfer_of(bus: SignalBus) -> tuple[int, int]:
    """(source, destination) pair of the transfer on this record.  For an
    interrupt acceptance the source is the last retired instruction."""
    src = bus.pc if bus.inst is not None else bus.pc_prev
    return src, bus.pc_next


# ---------------------------------------------------------------------------
# Loop monitor
# ---------------------------------------------------------------------------

@dataclass
class LoopState:
    src_loop: int | None = None
    dest_loop: int | None = None
    ctr: int = 1
    counter_slot: int | None = None

    @property
    def active(self) -> bool:
        return self.ctr > 1

    def reset(self) -> None:
        self.src_loop = None
        self.dest_loop = None
        self.ctr = 1
        self.counter_slot = None


# ---------------------------------------------------------------------------
# The composite monitor
# ---------------------------------------------------------------------------

@dataclass
class MonitorEvent:
    """What one record did to the monitor state (for stats and tests)."""
    hw_en: bool = False
    entry: tuple[int, int] | None = None       # appended normal entry
    counter: int | None = None                  # in-place counter value written
    committed_counter: bool = False
    cleared: bool = False                        # log reset on trusted-software exit
    trigger: TriggerKind | None = None


class CfaMonitor:
    """Stateful composition of the sub-monitors over one device's memory."""

    def __init__(self, dmem: bytearray, layout: MemoryLayout):
        self.dmem = dmem
        self.layout = layout
        self.fsm = BranchFsm()
        self.loop = LoopState()
        self.timer_count = 0     # cycles until the periodic trigger; 0 = disarmed
        self._md_off = layout.metadata_base - layout.dmem_base
        self._log_off = layout.cflog_base - layout.dmem_base

    # metadata field helpers (big-endian in data memory, identical to the wire)

    @property
    def cf_size(self) -> int:
        o = self._md_off + 8
        return (self.dmem[o] << 8) | self.dmem[o + 1]

    def _set_cf_size(self, v: int) -> None:
        o = self._md_off + 8
        self.dmem[o] = (v >> 8) & 0xFF
        self.dmem[o + 1] = v & 0xFF

    def _ar_bounds(self) -> tuple[int, int]:
        return struct.unpack_from(">HH", self.dmem, self._md_off + 4)

    def timer_reload(self) -> int:
        off = self.layout.timer_reg - self.layout.dmem_base
        return int.from_bytes(self.dmem[off:off + 4], "little")

    def arm_timer(self) -> None:
        self.timer_count = self.timer_reload()

    def hw_reset(self) -> None:
        """Device reset: sequential monitor state clears; the log and its
        metadata-held size survive so the post-reset report still carries
        everything captured before the reset."""
        self.fsm.reset()
        self.loop.reset()
        self.timer_count = 0

    # the per-record pipeline

    def observe(self, bus: SignalBus) -> MonitorEvent:
        """Digest one committed bus record: update the branch FSM, the loop
        state, the log and its fill counter, and report any trigger that the
        record caused.  Must be called after veto checks passed."""
        ev = MonitorEvent()
        lay = self.layout

        # Trusted-software exit frees the log for the next slice.
        if bus.pc == lay.tcb_max and bus.inst is not None:
            self._set_cf_size(0)
            self.loop.reset()
            ev.cleared = True

        call_irq = self.fsm.step(bus)
        branch = is_branch_record(bus, call_irq)

        if branch:
            self._log_transfer(bus, ev)

        trig = self._trigger_eval(bus)
        if trig is not None:
            ev.trigger = trig
        return ev

    def _log_transfer(self, bus: SignalBus, ev: MonitorEvent) -> None:
        lay = self.layout
        ar_min, ar_max = self._ar_bounds()
        src, dest = transfer_of(bus)
        max_entries = lay.max_entries
        log_full = self.cf_size >= max_entries
        in_ar_src = ar_min <= src <= ar_max
        in_ar_dest = ar_min <= dest <= ar_max
        hw_en = (not log_full) and (in_ar_src or in_ar_dest)
        ev.hw_en = hw_en
        if not hw_en:
            return

        loop = self.loop
        if loop.ctr == 1:
            if (src, dest) == (loop.src_loop, loop.dest_loop):
                # second consecutive identical backward jump: start counting
                loop.ctr = 2
                loop.counter_slot = self.cf_size
                self._write_counter(loop)
                ev.counter = loop.ctr
                return
            loop.src_loop, loop.dest_loop = src, dest
            self._append(src, dest, ev)
            return
        if (src, dest) == (loop.src_loop, loop.dest_loop):
            loop.ctr += 1
            self._write_counter(loop)
            ev.counter = loop.ctr
            return
        # loop left: commit the counter slot, then log this transfer normally
        if loop.counter_slot is not None:
            self._set_cf_size(loop.counter_slot + 1)
            ev.committed_counter = True
        loop.ctr = 1
        loop.counter_slot = None
        loop.src_loop, loop.dest_loop = src, dest
        if self.cf_size < self.layout.max_entries:
            self._append(src, dest, ev)

    def _append(self, src: int, dest: int, ev: MonitorEvent) -> None:
        slot = self.cf_size
        struct.pack_into(">HH", self.dmem, self._log_off + 4 * slot, src, dest)
        self._set_cf_size(slot + 1)
        ev.entry = (src, dest)

    def _write_counter(self, loop: LoopState) -> None:
        struct.pack_into(">HH", self.dmem, self._log_off + 4 * loop.counter_slot,
                         (loop.ctr >> 16) & 0xFFFF, loop.ctr & 0xFFFF)

    def _trigger_eval(self, bus: SignalBus) -> TriggerKind | None:
        lay = self.layout
        ar_min, ar_max = self._ar_bounds()
        region_end = bus.inst is not None and ar_max != 0 and bus.pc == ar_max
        flush = self.cf_size >= lay.max_entries - FLUSH_RESERVE
        timer = False
        if self.timer_count > 0 and not lay.in_tcb(bus.pc):
            self.timer_count -= 1
            timer = self.timer_count == 0
        if region_end:
            return TriggerKind.REGION_END
        if flush:
            return TriggerKind.LOG_FULL
        if timer:
            return TriggerKind.TIMER
        return None
