"""The prover device: TinyMCU core, hardware monitors, active root of trust
and the functional trusted-software model, driven cycle by cycle.

Every core cycle produces a bus record that is checked *before* its effects
commit; a veto becomes a reset, and every reset (like every trigger) leads
straight into the trusted software, which measures memory, ships the report,
and pauses execution until the verifier approves.

The trusted software itself is modeled functionally: entering it charges
simulated cycle costs per phase and emits only the few bus records that the
hardware rules care about (its metadata writes, the timer re-arm, the exit
jump, heal-time program-memory patches), all of which pass through the same
monitor pipeline as real instructions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .channel import Channel, PROVER, VERIFIER
from .isa import Op
from .mcu import (FaultError, MemoryLayout, NMI_LINE, ProgramImage,
                  SignalBus, acceptable_line, apply_acceptance, apply_instr,
                  _fetch, load_image, predict_acceptance, predict_bus, raise_irq)
from .monitor import (CfaMonitor, ResetReason, TriggerKind,
                      boundary_check, read_log_entries, read_metadata,
                      timer_write_check, write_metadata)
from .rot import Mode, NMI_ACCEPT_BOUND, RotState, on_reset, rot_check
from .tcb import (AUTH_CYCLES, HEAL_CYCLES, WAIT_POLL_CYCLES, DeviceKey,
                  HealAction, PolicyMode, WaitPolicy, authenticate_response,
                  tcb_att)
from .wire import CfaReport, WireError, decode_response, encode_report

TCB_EXIT_CYCLES = 8


class DeviceMode(enum.Enum):
    RUN = "run"
    WAIT = "wait"
    HALTED = "halted"       # application executed HALT
    SHUTDOWN = "shutdown"   # remediation shut the device down


@dataclass
class AttackEvent:
    """Externally injected adversarial hardware activity."""
    at_cycle: int
    kind: str               # "dma" or "force-irq"
    addr: int = 0
    count: int = 0
    value: int = 0
    line: int = 1


@dataclass
class DeviceEvents:
    irq_at_retire: dict[int, tuple[int, ...]] = field(default_factory=dict)
    attacks: list[AttackEvent] = field(default_factory=list)

    def __post_init__(self):
        self.attacks = sorted(self.attacks, key=lambda a: a.at_cycle)


@dataclass
class DeviceStats:
    n_t1: int = 0
    n_t2: int = 0
    n_t3: int = 0
    n_violation_resets: int = 0
    n_reports: int = 0
    n_retransmits: int = 0
    n_rejected_responses: int = 0
    cflog_bytes_total: int = 0
    att_cycles: int = 0
    wait_cycles: int = 0
    heal_cycles: int = 0
    app_cycles: int = 0

    @property
    def trigger_total(self) -> int:
        return self.n_t1 + self.n_t2 + self.n_t3 + self.n_violation_resets


class Device:
    """One prover instance with deterministic behavior under a fixed
    (image, event schedule, channel) triple."""

    def __init__(self, image: ProgramImage, layout: MemoryLayout, key: DeviceKey,
                 policy: WaitPolicy | None = None,
                 heal_action: HealAction = HealAction.SHUTDOWN,
                 update_image: ProgramImage | None = None,
                 timer_deadline: int = 0,
                 events: DeviceEvents | None = None,
                 keep_trace: bool = False):
        self.layout = layout
        self.key = key
        self.policy = policy or WaitPolicy()
        self.heal_action = heal_action
        self.update_image = update_image
        self.timer_deadline = timer_deadline
        self.events = events or DeviceEvents()
        self.state = load_image(image, layout)
        self.monitor = CfaMonitor(self.state.dmem, layout)
        self.rot = RotState()
        self.stats = DeviceStats()
        self.mode = DeviceMode.RUN
        self.trace: list[SignalBus] | None = [] if keep_trace else None
        self.reports: list[CfaReport] = []
        self.phase_log: list[str] = []
        self.last_reset: ResetReason | None = None

        self._pending_session: TriggerKind | None = TriggerKind.BOOT
        self._resume_ctx: tuple[int, bool, bool] = (layout.s_base, False, False)
        self._nmi_kind: TriggerKind | None = None
        self._nmi_raised_cycle: int | None = None
        self._attack_idx = 0
        self._report_frame: bytes | None = None
        self._wait_started = 0
        self._last_tx = 0
        self.retired_at_last_trigger = 0
        self.last_fault: str | None = None

    # ------------------------------------------------------------------
    # public driving surface
    # ------------------------------------------------------------------

    @property
    def cycle(self) -> int:
        return self.state.cycle

    @property
    def running(self) -> bool:
        return self.mode in (DeviceMode.RUN, DeviceMode.WAIT) \
            or self._pending_session is not None

    def tick(self, channel: Channel, burst: int = 64) -> None:
        """Advance the device: a pending trusted-software session, one wait
        poll, or up to ``burst`` application cycles."""
        if self._pending_session is not None:
            self._session(channel)
            return
        if self.mode is DeviceMode.WAIT:
            self._wait_poll(channel)
            return
        if self.mode is not DeviceMode.RUN:
            return
        for _ in range(burst):
            if self.mode is not DeviceMode.RUN or self._pending_session is not None:
                break
            self._run_cycle()

    # ------------------------------------------------------------------
    # application execution
    # ------------------------------------------------------------------

    def _emit(self, bus: SignalBus) -> None:
        if self.trace is not None:
            self.trace.append(bus)

    def _check(self, bus: SignalBus) -> ResetReason | None:
        return (boundary_check(bus, self.layout)
                or timer_write_check(bus, self.layout)
                or rot_check(bus, self.rot, self.layout))

    def _run_cycle(self) -> None:
        st = self.state
        self._apply_due_attacks()
        if self.mode is not DeviceMode.RUN or self._pending_session is not None:
            return

        line = acceptable_line(st)
        if line is not None and (line == NMI_LINE or not st.halted):
            self._accept(line)
            return
        if NMI_LINE in st.pending_irq and self._nmi_raised_cycle is not None \
                and st.cycle - self._nmi_raised_cycle > NMI_ACCEPT_BOUND:
            # watchdog: a trigger that failed to vector within its bound
            self._violation_reset(ResetReason.TRIGGER_SUPPRESSED)
            return
        if st.halted:
            # only a trigger (non-maskable) can take over a halted core
            self.mode = DeviceMode.HALTED
            return

        try:
            ins = _fetch(st)
            bus = predict_bus(st, ins)
        except FaultError as e:
            self.last_fault = e.reason
            self._violation_reset(ResetReason.MACHINE_FAULT)
            return
        reason = self._check(bus)
        if reason is not None:
            self._violation_reset(reason)
            return
        apply_instr(st, ins, bus)
        self.stats.app_cycles += 1
        ev = self.monitor.observe(bus)
        if ev.trigger is not None:
            self._raise_trigger(ev.trigger, bus)
        self._emit(bus)
        for irq_line in self.events.irq_at_retire.get(st.retired, ()):
            raise_irq(st, irq_line)

    def _accept(self, line: int) -> None:
        st = self.state
        try:
            bus = predict_acceptance(st, line)
        except FaultError as e:
            self.last_fault = e.reason
            self._violation_reset(ResetReason.MACHINE_FAULT)
            return
        reason = self._check(bus)
        if reason is not None:
            self._violation_reset(reason)
            return
        resume_ctx = (st.pc, st.gie, st.z)
        apply_acceptance(st, line)
        self.stats.app_cycles += 1
        ev = self.monitor.observe(bus)
        self._emit(bus)
        if line == NMI_LINE:
            kind = self._nmi_kind or TriggerKind.BOOT
            self._nmi_kind = None
            self._nmi_raised_cycle = None
            self._enter_tcb(kind, resume_ctx)
        elif ev.trigger is not None:
            self._raise_trigger(ev.trigger, bus)

    def _raise_trigger(self, kind: TriggerKind, bus: SignalBus) -> None:
        if self._nmi_kind is not None or NMI_LINE in self.state.pending_irq:
            return
        self._nmi_kind = kind
        self._nmi_raised_cycle = self.state.cycle
        bus.nmi = True
        # eligible on the very next cycle: the asserting instruction was the
        # in-flight one
        self.state.pending_irq[NMI_LINE] = self.state.retired - 1

    def _enter_tcb(self, kind: TriggerKind, resume_ctx: tuple[int, bool, bool]) -> None:
        self.rot.mode = Mode.TCB
        self._pending_session = kind
        self._resume_ctx = resume_ctx
        self.retired_at_last_trigger = self.state.retired

    def _violation_reset(self, reason: ResetReason) -> None:
        self.stats.n_violation_resets += 1
        self.last_reset = reason
        on_reset(self.state, self.rot, reason)
        self.monitor.hw_reset()
        self._nmi_kind = None
        self._nmi_raised_cycle = None
        self.mode = DeviceMode.RUN
        self._pending_session = TriggerKind.VIOLATION
        self._resume_ctx = (self.layout.s_base, False, False)
        self.retired_at_last_trigger = self.state.retired

    # ------------------------------------------------------------------
    # adversarial hardware events
    # ------------------------------------------------------------------

    def _apply_due_attacks(self) -> None:
        while self._attack_idx < len(self.events.attacks) and \
                self.events.attacks[self._attack_idx].at_cycle <= self.state.cycle:
            ev = self.events.attacks[self._attack_idx]
            self._attack_idx += 1
            in_tcb = self.rot.mode is Mode.TCB
            if ev.kind == "dma":
                bus = self._synthetic_bus(dma=True, dma_addr=ev.addr, in_tcb=in_tcb)
                reason = self._check(bus)
                if reason is not None:
                    self._violation_reset(reason)
                    return
                self.state.dma.enabled = True
                self.state.dma.next_addr = ev.addr
                self.state.dma.remaining = ev.count
                self.state.dma.value = ev.value
            elif ev.kind == "force-irq":
                # fault injection: an interrupt controller forcing acceptance
                st = self.state
                target = st.ivt_target(ev.line)
                pc = self.layout.tcb_min if in_tcb else st.pc
                bus = SignalBus(pc=pc, pc_prev=st.pc_prev, pc_next=target,
                                inst=None, irq=True, gie=st.gie, irq_acc=True,
                                irq_line=ev.line)
                reason = self._check(bus)
                if reason is not None:
                    self._violation_reset(reason)
                    return
                st.pending_irq.pop(ev.line, None)
                st.pc = target
                st.gie = False
                self.monitor.observe(bus)
                self._emit(bus)

    def _synthetic_bus(self, *, w_addr: int | None = None, dma: bool = False,
                       dma_addr: int = 0, in_tcb: bool = False,
                       inst: Op | None = Op.MOV) -> SignalBus:
        st = self.state
        pc = self.layout.tcb_min if in_tcb else st.pc
        bus = SignalBus(pc=pc, pc_prev=pc, pc_next=pc, inst=inst, gie=st.gie)
        if w_addr is not None:
            bus.w_en, bus.d_addr = True, w_addr
        if dma:
            bus.dma_en, bus.dma_addr = True, dma_addr
        return bus

    # ------------------------------------------------------------------
    # trusted-software session
    # ------------------------------------------------------------------

    def _session(self, channel: Channel) -> None:
        kind = self._pending_session
        self._pending_session = None
        st, lay = self.state, self.layout
        self.rot.mode = Mode.TCB
        if kind is TriggerKind.TIMER:
            self.stats.n_t1 += 1
        elif kind is TriggerKind.LOG_FULL:
            self.stats.n_t2 += 1
        elif kind is TriggerKind.VIOLATION:
            pass  # counted at reset time
        else:
            self.stats.n_t3 += 1

        self.phase_log.append("att")
        md = read_metadata(st.dmem, lay)
        entries = read_log_entries(st.dmem, lay, md.cf_size)
        h, cost = tcb_att(self.key, bytes(st.pmem), md, entries)
        st.cycle += cost
        self.stats.att_cycles += cost
        report = CfaReport(h, md, kind, tuple(entries))
        self.reports.append(report)
        self.stats.n_reports += 1
        self.stats.cflog_bytes_total += 4 * md.cf_size
        self._report_frame = encode_report(report)

        self.phase_log.append("wait")
        channel.send(VERIFIER, self._report_frame, st.cycle)
        self.mode = DeviceMode.WAIT
        self._wait_started = st.cycle
        self._last_tx = st.cycle

    def _wait_poll(self, channel: Channel) -> None:
        st = self.state
        st.cycle += WAIT_POLL_CYCLES
        self.stats.wait_cycles += WAIT_POLL_CYCLES
        self._apply_due_attacks()
        if self.mode is not DeviceMode.WAIT:
            return

        frame = channel.deliver(PROVER, st.cycle)
        if frame is not None:
            st.cycle += AUTH_CYCLES
            self.stats.wait_cycles += AUTH_CYCLES
            try:
                resp = decode_response(frame)
            except WireError:
                resp = None
            md = read_metadata(st.dmem, self.layout)
            if resp is not None and authenticate_response(self.key, resp, md.chal):
                self._complete_session(resp, channel)
                return
            self.stats.n_rejected_responses += 1

        pol = self.policy
        if st.cycle - self._last_tx >= pol.retransmit_every:
            channel.send(VERIFIER, self._report_frame, st.cycle)
            self.stats.n_retransmits += 1
            self._last_tx = st.cycle
        if pol.mode is not PolicyMode.STRICT and \
                st.cycle - self._wait_started >= pol.timeout_cycles:
            if pol.mode is PolicyMode.BEST_EFFORT_RESUME:
                self._exit_tcb()
            else:
                self._heal(channel)

    def _complete_session(self, resp, channel: Channel) -> None:
        self._tcb_write_metadata(resp.chal, resp.ar_min, resp.ar_max)
        if self.mode is not DeviceMode.WAIT:
            return  # a veto fired during the update (should not happen)
        if resp.app == 1:
            self._exit_tcb()
        else:
            self._heal(channel)

    def _tcb_write_metadata(self, chal: int, ar_min: int, ar_max: int) -> None:
        """The one legal metadata write path: performed by trusted software,
        visible to the monitors as in-TCB store records."""
        st, lay = self.state, self.layout
        for off in (0, 4, 6):
            bus = self._synthetic_bus(w_addr=lay.metadata_base + off, in_tcb=True)
            reason = self._check(bus)
            if reason is not None:
                self._violation_reset(reason)
                return
            st.cycle += 1
            self.monitor.observe(bus)
            self._emit(bus)
        md = read_metadata(st.dmem, lay)
        md.chal, md.ar_min, md.ar_max = chal, ar_min, ar_max
        write_metadata(st.dmem, lay, md)

    def _arm_timer(self) -> None:
        st, lay = self.state, self.layout
        if self.timer_deadline <= 0:
            return
        bus = self._synthetic_bus(w_addr=lay.timer_reg, in_tcb=True)
        reason = self._check(bus)
        if reason is not None:
            self._violation_reset(reason)
            return
        st.cycle += 1
        self.monitor.observe(bus)
        self._emit(bus)
        off = lay.timer_reg - lay.dmem_base
        st.dmem[off:off + 4] = self.timer_deadline.to_bytes(4, "little")
        self.monitor.arm_timer()

    def _exit_tcb(self) -> None:
        """Leave via the fixed exit point: clears the log for the next slice
        and logs the jump back into the attested region."""
        st, lay = self.state, self.layout
        self._arm_timer()
        if self.mode is not DeviceMode.WAIT:
            return
        resume, gie, z = self._resume_ctx
        bus = SignalBus(pc=lay.tcb_max, pc_prev=lay.tcb_max, pc_next=resume,
                        inst=Op.JMP, gie=False)
        reason = self._check(bus)
        if reason is not None:
            self._violation_reset(reason)
            return
        st.cycle += TCB_EXIT_CYCLES
        self.monitor.observe(bus)
        self._emit(bus)
        st.pc = resume
        st.pc_prev = lay.tcb_max
        st.gie, st.z = gie, z
        self.rot.mode = Mode.APP
        self.mode = DeviceMode.RUN

    def _clear_log_for_heal(self) -> None:
        # remediation completes the trusted sequence; the already-audited log
        # is not re-sent after the post-heal reset
        bus = SignalBus(pc=self.layout.tcb_max, pc_prev=self.layout.tcb_max,
                        pc_next=self.layout.tcb_min, inst=Op.JMP, gie=False)
        self.monitor.observe(bus)
        self._emit(bus)

    def _heal(self, channel: Channel) -> None:
        st, lay = self.state, self.layout
        self.phase_log.append("heal")
        st.cycle += HEAL_CYCLES
        self.stats.heal_cycles += HEAL_CYCLES
        action = self.heal_action

        if action is HealAction.UPDATE:
            img = self.update_image
            ok = img is not None and all(
                lay.s_base <= seg.base and seg.base + len(seg.data) <= lay.pmem_end
                for seg in img.segments)
            if not ok:
                action = HealAction.REBOOT   # oversized or missing patch
            else:
                self.rot.heal_latch = True
                # wipe the application region first so a shorter replacement
                # leaves no stale code behind, then write the new image
                writes = [(a, min(a + 256, lay.pmem_end) - a, b"")
                          for a in range(lay.s_base, lay.pmem_end, 256)]
                writes += [(seg.base, len(seg.data), seg.data)
                           for seg in img.segments]
                for base, length, data in writes:
                    bus = self._synthetic_bus(w_addr=base, in_tcb=True)
                    reason = self._check(bus)
                    if reason is not None:
                        self._violation_reset(reason)
                        return
                    st.cycle += 1
                    self.monitor.observe(bus)
                    self._emit(bus)
                    off = base - lay.pmem_base
                    st.pmem[off:off + length] = data if data else bytes(length)
                self.rot.heal_latch = False

        if action is HealAction.SHUTDOWN:
            self.mode = DeviceMode.SHUTDOWN
            return
        self._clear_log_for_heal()
        on_reset(st, self.rot, None)
        self.monitor.hw_reset()
        self._nmi_kind = None
        self.mode = DeviceMode.RUN
        self._pending_session = TriggerKind.BOOT
        self._resume_ctx = (lay.s_base, False, False)
