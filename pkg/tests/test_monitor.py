from cfasim.isa import Op
from cfasim.mcu import MemoryLayout, SignalBus
from cfasim.monitor import (FLUSH_RESERVE, BranchFsm, CfaMonitor, Metadata,
                            ResetReason, TriggerKind, boundary_check,
                            is_branch_record, read_log_entries, read_metadata,
                            timer_write_check, write_metadata)

LAY = MemoryLayout()


def rec(pc=0x9000, pc_next=None, inst=Op.NOP, **kw):
    if pc_next is None:
        pc_next = (pc + 4) & 0xFFFF
    return SignalBus(pc=pc, pc_prev=kw.pop("pc_prev", pc - 4), pc_next=pc_next,
                     inst=inst, **kw)


def fresh_monitor(ar=(0x9000, 0x9FFC), cflog_size=None):
    lay = LAY if cflog_size is None else MemoryLayout(cflog_size=cflog_size)
    dmem = bytearray(lay.dmem_size)
    write_metadata(dmem, lay, Metadata(0, ar[0], ar[1], 0))
    return CfaMonitor(dmem, lay), lay


class TestBoundary:
    def test_s_write_to_cflog_resets(self):
        bus = rec(pc=0x9000, inst=Op.MOV, w_en=True, d_addr=LAY.cflog_base)
        assert boundary_check(bus, LAY) is ResetReason.CFLOG_WRITE

    def test_tcb_write_to_cflog_still_resets(self):
        # the log is read-only to all software
        bus = rec(pc=LAY.tcb_min, inst=Op.MOV, w_en=True, d_addr=LAY.cflog_base)
        assert boundary_check(bus, LAY) is ResetReason.CFLOG_WRITE

    def test_tcb_may_write_metadata(self):
        bus = rec(pc=LAY.tcb_min, inst=Op.MOV, w_en=True, d_addr=LAY.metadata_base)
        assert boundary_check(bus, LAY) is None

    def test_s_write_to_metadata_resets(self):
        bus = rec(pc=0x9100, inst=Op.MOV, w_en=True, d_addr=LAY.metadata_base + 4)
        assert boundary_check(bus, LAY) is ResetReason.METADATA_WRITE

    def test_dma_to_metadata_resets_even_during_tcb(self):
        bus = rec(pc=LAY.tcb_min, inst=Op.MOV, dma_en=True,
                  dma_addr=LAY.metadata_base)
        assert boundary_check(bus, LAY) in (ResetReason.DMA_METADATA,
                                            ResetReason.METADATA_WRITE)

    def test_dma_to_cflog_resets(self):
        bus = rec(dma_en=True, dma_addr=LAY.cflog_base + 8)
        assert boundary_check(bus, LAY) is ResetReason.CFLOG_WRITE

    def test_benign_write_passes(self):
        bus = rec(inst=Op.MOV, w_en=True, d_addr=0x1000)
        assert boundary_check(bus, LAY) is None

    def test_timer_write_from_s_resets(self):
        bus = rec(pc=0x9000, inst=Op.MOV, w_en=True, d_addr=LAY.timer_reg)
        assert timer_write_check(bus, LAY) is ResetReason.TIMER_WRITE

    def test_timer_write_from_tcb_allowed(self):
        bus = rec(pc=LAY.tcb_min, inst=Op.MOV, w_en=True, d_addr=LAY.timer_reg)
        assert timer_write_check(bus, LAY) is None

    def test_dma_to_timer_register_resets(self):
        bus = rec(dma_en=True, dma_addr=LAY.timer_reg)
        assert timer_write_check(bus, LAY) is ResetReason.TIMER_WRITE


class TestBranchDetect:
    def test_jmp_detected(self):
        assert is_branch_record(rec(inst=Op.JMP, pc_next=0x9100), False)

    def test_mov_not_detected(self):
        assert not is_branch_record(rec(inst=Op.MOV), False)

    def test_not_taken_conditional_not_detected(self):
        assert not is_branch_record(rec(pc=0x9000, pc_next=0x9004, inst=Op.JZ), False)

    def test_taken_conditional_detected(self):
        assert is_branch_record(rec(pc=0x9000, pc_next=0x9100, inst=Op.JNZ), False)

    def test_call_irq_forces_detection(self):
        assert is_branch_record(rec(inst=None, pc_next=0x8000), True)

    def test_fsm_call_irq_exactly_at_acceptance(self):
        fsm = BranchFsm()
        t0 = fsm.step(rec(irq=True, gie=True))               # Wait -> Pend
        t1 = fsm.step(rec(irq=True, gie=True))               # holds Pend
        t2 = fsm.step(rec(inst=None, irq=True, irq_acc=True))  # Pend -> Acc
        t3 = fsm.step(rec())                                  # Acc -> Wait
        assert (t0, t1, t2, t3) == (False, False, True, False)


class TestLogMonitor:
    def test_entry_into_region_logged(self):
        mon, lay = fresh_monitor()
        ev = mon.observe(rec(pc=0x8FF0, pc_next=0x9000, inst=Op.CALL))
        assert ev.hw_en and ev.entry == (0x8FF0, 0x9000)
        assert mon.cf_size == 1

    def test_branch_inside_region_logged(self):
        mon, lay = fresh_monitor()
        ev = mon.observe(rec(pc=0x9100, pc_next=0x9200, inst=Op.JMP))
        assert ev.entry == (0x9100, 0x9200)

    def test_branch_outside_region_ignored(self):
        mon, lay = fresh_monitor(ar=(0x9800, 0x9FFC))
        ev = mon.observe(rec(pc=0x9000, pc_next=0x9100, inst=Op.JMP))
        assert not ev.hw_en and mon.cf_size == 0

    def test_exit_from_region_logged(self):
        # a branch whose source lies inside the region is recorded even when
        # it escapes the region
        mon, lay = fresh_monitor(ar=(0x9000, 0x90FC))
        ev = mon.observe(rec(pc=0x9010, pc_next=0x9800, inst=Op.JMP))
        assert ev.entry == (0x9010, 0x9800)

    def test_tcb_exit_clears_cf_size(self):
        mon, lay = fresh_monitor()
        mon.observe(rec(pc=0x9000, pc_next=0x9100, inst=Op.JMP))
        assert mon.cf_size == 1
        ev = mon.observe(rec(pc=lay.tcb_max, pc_next=0x9000, inst=Op.JMP))
        assert ev.cleared
        # the exit jump itself lands in the fresh slice
        assert mon.cf_size == 1
        assert read_log_entries(mon.dmem, lay, 1) == [(lay.tcb_max, 0x9000)]

    def test_flush_fires_with_reserve_margin(self):
        mon, lay = fresh_monitor(cflog_size=32)   # 8 entries
        trig = None
        for i in range(8):
            ev = mon.observe(rec(pc=0x9000 + 16 * i, pc_next=0x9008 + 16 * i,
                                 inst=Op.CALL))
            if ev.trigger:
                trig = (i, ev.trigger)
                break
        assert trig == (8 - FLUSH_RESERVE - 1, TriggerKind.LOG_FULL)

    def test_full_log_stops_accepting(self):
        mon, lay = fresh_monitor(cflog_size=16)   # 4 entries
        for i in range(6):
            mon.observe(rec(pc=0x9000 + 16 * i, pc_next=0x9008 + 16 * i,
                            inst=Op.CALL))
        assert mon.cf_size == 4   # fifth and sixth dropped at the brim

    def test_region_end_trigger(self):
        mon, lay = fresh_monitor(ar=(0x9000, 0x9100))
        ev = mon.observe(rec(pc=0x9100, inst=Op.NOP))
        assert ev.trigger is TriggerKind.REGION_END

    def test_region_end_precedes_log_full(self):
        mon, lay = fresh_monitor(ar=(0x9000, 0x9100), cflog_size=16)
        for i in range(3):
            mon.observe(rec(pc=0x9000 + 16 * i, pc_next=0x9008 + 16 * i,
                            inst=Op.CALL))
        ev = mon.observe(rec(pc=0x9100, pc_next=0x9104, inst=Op.CALL))
        assert ev.trigger is TriggerKind.REGION_END

    def test_timer_trigger_counts_app_cycles_only(self):
        mon, lay = fresh_monitor()
        off = lay.timer_reg - lay.dmem_base
        mon.dmem[off:off + 4] = (3).to_bytes(4, "little")
        mon.arm_timer()
        assert mon.observe(rec(pc=0x9000)).trigger is None
        assert mon.observe(rec(pc=lay.tcb_min)).trigger is None  # paused in TCB
        assert mon.observe(rec(pc=0x9004)).trigger is None
        assert mon.observe(rec(pc=0x9008)).trigger is TriggerKind.TIMER


def drive_loop(mon, src, dest, times, start=None):
    evs = []
    for _ in range(times):
        evs.append(mon.observe(rec(pc=src, pc_next=dest, inst=Op.JMP)))
    return evs


class TestLoopMonitor:
    def test_first_jump_latches_without_counter(self):
        mon, lay = fresh_monitor(ar=(0x9000, 0xA0FC))
        ev = drive_loop(mon, 0xA010, 0xA004, 1)[0]
        assert ev.entry is not None and ev.counter is None
        assert mon.loop.ctr == 1
        assert mon.loop.src_loop == 0xA010

    def test_repeated_backward_jump_counts(self):
        mon, lay = fresh_monitor(ar=(0x9000, 0xA0FC))
        evs = drive_loop(mon, 0xA010, 0xA004, 2)
        assert evs[0].entry == (0xA010, 0xA004)
        assert evs[1].counter == 2 and evs[1].entry is None
        assert mon.loop.active
        assert mon.cf_size == 1   # counter slot not yet committed

    def test_loop_exit_commits_counter_and_resets(self):
        mon, lay = fresh_monitor(ar=(0x9000, 0xA0FC))
        drive_loop(mon, 0xA010, 0xA004, 3)
        ev = mon.observe(rec(pc=0xA020, pc_next=0xA060, inst=Op.JMP))
        assert ev.committed_counter and ev.entry == (0xA020, 0xA060)
        assert not mon.loop.active and mon.loop.ctr == 1
        assert mon.cf_size == 3
        assert read_log_entries(mon.dmem, lay, 3) == [
            (0xA010, 0xA004), (0x0000, 0x0003), (0xA020, 0xA060)]

    def test_five_iterations_produce_jump_plus_counter(self):
        mon, lay = fresh_monitor(ar=(0x9000, 0xA0FC))
        drive_loop(mon, 0xA010, 0xA004, 5)
        mon.observe(rec(pc=0xA014, pc_next=0xA060, inst=Op.JMP))
        entries = read_log_entries(mon.dmem, lay, mon.cf_size)
        assert entries[:2] == [(0xA010, 0xA004), (0x0000, 0x0005)]


class TestReplayPurity:
    def test_trace_replay_reproduces_log(self):
        from cfasim.apps import FIXTURES
        from cfasim.asm import assemble
        from cfasim.device import Device
        from cfasim.tcb import DeviceKey

        lay = MemoryLayout()
        fx = FIXTURES["moderate"]
        built = assemble(fx.source, entry=lay.tcb_min)
        dev = Device(built.image, lay, DeviceKey(b"\x01" * 32), keep_trace=True)
        dmem0 = bytearray(dev.state.dmem)
        md = read_metadata(dmem0, lay)
        md.ar_min, md.ar_max = (built.symbols["main"], built.symbols["fin"])
        write_metadata(dev.state.dmem, lay, md)
        write_metadata(dmem0, lay, md)

        # drive the app directly (no protocol) for a window of cycles
        dev._pending_session = None
        dev.state.pc = built.symbols["main"]
        for _ in range(40):
            dev._run_cycle()

        mon2 = CfaMonitor(dmem0, lay)
        for bus in dev.trace:
            mon2.observe(bus)
        a, b = dev.state.dmem, dmem0
        lo = lay.cflog_base - lay.dmem_base
        assert a[lo:lo + lay.cflog_size] == b[lo:lo + lay.cflog_size]
        assert read_metadata(a, lay) == read_metadata(b, lay)
