"""Active root of trust: converts any interference with trusted-software
execution, and any illegal program-memory write, into an immediate reset.
After every reset the trusted software is the first thing to run, so a
violation always ends in a report rather than in silence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .isa import Op
from .mcu import MemoryLayout, NMI_LINE, McuState, SignalBus, reset as mcu_reset
from .monitor import ResetReason

# An undelivered trigger may outlive at most this many cycles before the
# watchdog treats it as suppressed and forces a reset.
NMI_ACCEPT_BOUND = 3


class Mode(enum.Enum):
    APP = "app"
    TCB = "tcb"


@dataclass
class RotState:
    mode: Mode = Mode.TCB          # boot starts inside the trusted software
    heal_latch: bool = False       # set only while the heal phase may patch S
    reset_reason: ResetReason | None = None


def rot_check(bus: SignalBus, rot: RotState, layout: MemoryLayout) -> ResetReason | None:
    """Evaluate one bus record against the RoT rules; a reason means veto."""
    # (a) program memory is immutable at runtime; the one exception is the
    # heal window, which may rewrite application code but never the TCB.
    for en, addr in ((bus.w_en, bus.d_addr), (bus.dma_en, bus.dma_addr)):
        if not en or not layout.in_pmem(addr):
            continue
        if layout.in_tcb(addr):
            return ResetReason.TCB_PMEM_WRITE
        if not (rot.heal_latch and bus.w_en and layout.in_tcb(bus.pc)):
            return ResetReason.S_PMEM_WRITE

    if rot.mode is Mode.TCB:
        # (b) nothing may interleave with the trusted software
        if bus.irq_acc and bus.irq_line != NMI_LINE:
            return ResetReason.IRQ_IN_TCB
        if bus.dma_en:
            return ResetReason.DMA_IN_TCB
        if bus.inst is Op.EINT:
            return ResetReason.GIE_IN_TCB
        # (d) fixed exit point
        if layout.in_tcb(bus.pc) and not layout.in_tcb(bus.pc_next) \
                and bus.pc != layout.tcb_max:
            return ResetReason.ILLEGAL_TCB_EXIT

    # (c) fixed entry point, regardless of mode
    if not layout.in_tcb(bus.pc) and layout.in_tcb(bus.pc_next) \
            and bus.pc_next != layout.tcb_min:
        return ResetReason.ILLEGAL_TCB_ENTRY
    return None


def on_reset(state: McuState, rot: RotState, reason: ResetReason | None) -> McuState:
    """Reset the core, remembering why, so the next report can be labeled.
    Guarantees the first post-reset activity is the trusted software (the
    core restarts at its entry point with interrupts and DMA disabled)."""
    rot.reset_reason = reason
    rot.mode = Mode.TCB
    rot.heal_latch = False
    return mcu_reset(state)
