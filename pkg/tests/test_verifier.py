import hashlib

import pytest

from cfasim.apps import PASSWORD
from cfasim.asm import assemble
from cfasim.mcu import MemoryLayout, render_pmem
from cfasim.scenario import ScenarioConfig, run_scenario
from cfasim.verifier import (Phase, SliceKind, VerifySession, Violation,
                             build_cfg, validate_slice)

LAY = MemoryLayout()


@pytest.fixture(scope="module")
def pw():
    res = assemble(PASSWORD, entry=LAY.tcb_min)
    ar = (res.symbols["app_main"], res.symbols["done"])
    cfg = build_cfg(render_pmem(res.image, LAY), ar)
    return res, ar, cfg


def session(ar, chal=1):
    s = VerifySession(b"", LAY)
    s.issued_ar = ar
    s.issued_chal = chal
    return s


def benign_single_slice(sym, loop_count=4):
    """Entries the hardware emits for a benign password run (count = input
    words copied)."""
    return [
        (0x9000 + 8, sym["app_main"]),        # CALL app_main from start
        (sym["app_main"], sym["getpw"]),      # CALL getpw
        (0x915C, sym["cploop"]),              # copy loop backward jump
        (0x0000, loop_count),                 # loop counter
        (0x9144, sym["cpdone"]),              # JZ cpdone
        (0x91A4, sym["gexit"]),               # all compares matched, JMP gexit
        (0x91CC, sym["app_main"] + 4),        # RET back to app_main
        (0x910C, sym["sense"]),               # JMP sense
        (0x91EC, sym["sloop"]),               # sense loop backward jump
        (0x0000, 5),                          # counter
        (sym["done"], LAY.tcb_min),           # region-end trigger jump
    ]


class TestSliceRules:
    def test_benign_single_slice_accepted(self, pw):
        res, ar, cfg = pw
        sym = dict(res.symbols, cpdone=res.symbols["cpdone"], sloop=res.symbols["sloop"])
        s = session(ar)
        assert validate_slice(SliceKind.SINGLE, benign_single_slice(sym), cfg, s) is None

    def test_first_entry_must_target_region_start(self, pw):
        res, ar, cfg = pw
        entries = benign_single_slice(res.symbols)
        entries[0] = (0x9008, res.symbols["getpw"])   # jumps past the entry
        v = validate_slice(SliceKind.SINGLE, entries, cfg, session(ar))
        assert v == Violation(0, "BadRegionEntry")

    def test_return_mismatch_detected_at_offending_index(self, pw):
        res, ar, cfg = pw
        sym = res.symbols
        entries = benign_single_slice(sym)
        entries[6] = (0x91CC, sym["sense"])   # hijacked return
        v = validate_slice(SliceKind.SINGLE, entries, cfg, session(ar))
        assert v is not None and v.reason == "ReturnMismatch" and v.index == 6

    def test_edge_absent_from_cfg_rejected(self, pw):
        res, ar, cfg = pw
        entries = benign_single_slice(res.symbols)
        entries[7] = (0x910C, res.symbols["nope"])   # JMP with the wrong target
        v = validate_slice(SliceKind.SINGLE, entries, cfg, session(ar))
        assert v is not None and v.index == 7 and v.reason == "BadJumpTarget"

    def test_single_slice_must_end_at_region_exit(self, pw):
        res, ar, cfg = pw
        entries = benign_single_slice(res.symbols)[:-1]
        v = validate_slice(SliceKind.SINGLE, entries, cfg, session(ar))
        assert v is not None and v.reason == "BadSliceEnd"

    def test_counter_requires_backward_jump(self, pw):
        res, ar, cfg = pw
        sym = res.symbols
        entries = [
            (0x9008, sym["app_main"]),
            (sym["app_main"], sym["getpw"]),
            (0x0000, 3),                      # counter without a loop before it
        ]
        v = validate_slice(SliceKind.FIRST, entries, cfg, session(ar))
        assert v is not None and v.index == 2

    def test_shadow_underflow_detected(self, pw):
        res, ar, cfg = pw
        sym = res.symbols
        s = session(ar)
        s.phase = Phase.EXPECT_NEXT
        s.cursor = sym["gexit"]
        s.pending_resume = None
        s.shadow = []
        # a return with nothing on the shadow: broken continuation
        v = validate_slice(SliceKind.INTERMEDIATE,
                           [(LAY.tcb_max, sym["gexit"]), (0x91CC, sym["app_main"] + 4)],
                           cfg, s)
        assert v is not None and v.reason in ("ShadowUnderflow", "ResumeMismatch")

    def test_violation_leaves_session_untouched(self, pw):
        res, ar, cfg = pw
        s = session(ar)
        before = (list(s.shadow), s.cursor, s.phase)
        entries = benign_single_slice(res.symbols)
        entries[6] = (0x91CC, res.symbols["sense"])
        validate_slice(SliceKind.SINGLE, entries, cfg, s)
        assert (list(s.shadow), s.cursor, s.phase) == before


class TestSliceComposability:
    def test_slicewise_equals_concatenated(self):
        """Validating slices one by one with carried state accepts exactly the
        concatenated trace (triggers only cut, never change content)."""
        res = run_scenario(ScenarioConfig(app="moderate", max_cflog_bytes=512))
        assert all(" app=1 " in line for line in res.audit)
        slices = [list(r.entries) for r in res.reports if r.entries]

        big = run_scenario(ScenarioConfig(app="moderate", max_cflog_bytes=4096))
        assert all(" app=1 " in line for line in big.audit)
        big_slices = [list(r.entries) for r in big.reports if r.entries]
        assert len(big_slices) < len(slices)

        from cfasim.scenario import decompress_entries
        lay = res.device.layout

        def app_entries(groups):
            out = []
            for g in groups:
                out.extend(e for e in decompress_entries(g)
                           if not (lay.in_tcb(e[0]) or lay.in_tcb(e[1])))
            return out

        assert app_entries(slices) == app_entries(big_slices)


class TestEndToEndVerdicts:
    def test_benign_run_all_slices_approved(self):
        res = run_scenario(ScenarioConfig(app="password", max_cflog_bytes=256))
        assert all(" app=1 " in line for line in res.audit)

    def test_overflow_detected_in_second_report(self):
        res = run_scenario(ScenarioConfig(app="password", max_cflog_bytes=256,
                                          input_kind="overflow"))
        assert " app=0 " in res.audit[1]
        assert "ReturnMismatch" in res.audit[1]

    def test_stale_challenge_report_dropped(self, pw):
        from cfasim.monitor import Metadata
        from cfasim.verifier import Verifier, VerifierConfig
        from cfasim.wire import CfaReport, attest_digest, encode_report
        from cfasim.monitor import TriggerKind

        res, ar, cfg = pw
        key = hashlib.sha256(b"vk").digest()
        pmem = render_pmem(res.image, LAY)
        ver = Verifier(VerifierConfig(key=key, expected_pmem=pmem, layout=LAY,
                                      target_ar=ar))
        md = Metadata(7, *ar, 0)     # challenge never issued
        rep = CfaReport(attest_digest(key, pmem, md, []), md, TriggerKind.TIMER)
        assert ver.handle_report(encode_report(rep)) is None
        assert "stale-chal" in ver.audit[-1]

    def test_bad_mac_report_dropped_without_response(self, pw):
        from cfasim.monitor import Metadata, TriggerKind
        from cfasim.verifier import Verifier, VerifierConfig
        from cfasim.wire import CfaReport, encode_report

        res, ar, cfg = pw
        key = hashlib.sha256(b"vk").digest()
        ver = Verifier(VerifierConfig(key=key, expected_pmem=render_pmem(res.image, LAY),
                                      layout=LAY, target_ar=ar))
        rep = CfaReport(b"\x00" * 32, Metadata(0, 0, 0, 0), TriggerKind.BOOT)
        assert ver.handle_report(encode_report(rep)) is None
        assert "bad-mac" in ver.audit[-1]

    def test_responses_have_increasing_challenges(self):
        res = run_scenario(ScenarioConfig(app="moderate", max_cflog_bytes=512))
        chals = []
        from cfasim.wire import decode_response
        for ep, frame in res.channel.captured:
            if ep == "prv" and len(frame) == 41:
                chals.append(decode_response(frame).chal)
        assert chals == sorted(chals)
        assert len(set(chals)) == len(chals)


class TestSliceEdgeRules:
    def test_entries_after_trigger_jump_rejected(self, pw):
        res, ar, cfg = pw
        sym = res.symbols
        entries = [
            (0x9008, sym["app_main"]),
            (sym["app_main"], sym["getpw"]),
            (0x9134, LAY.tcb_min),          # trigger acceptance mid-slice
            (0x915C, sym["cploop"]),        # nothing may follow it
        ]
        v = validate_slice(SliceKind.FIRST, entries, cfg, session(ar))
        assert v is not None and v.reason == "EntriesAfterTrigger" and v.index == 3

    def test_intermediate_resume_must_match_announced_point(self, pw):
        res, ar, cfg = pw
        sym = res.symbols
        s = session(ar)
        s.phase = Phase.EXPECT_NEXT
        s.pending_resume = frozenset({sym["sense"]})
        v = validate_slice(SliceKind.INTERMEDIATE,
                           [(LAY.tcb_max, sym["getpw"])], cfg, s)
        assert v is not None and v.reason == "ResumeMismatch"
        ok = validate_slice(SliceKind.INTERMEDIATE,
                            [(LAY.tcb_max, sym["sense"])], cfg, s)
        assert ok is None

    def test_counter_value_below_two_rejected(self, pw):
        res, ar, cfg = pw
        sym = res.symbols
        entries = [
            (0x9008, sym["app_main"]),
            (sym["app_main"], sym["getpw"]),
            (0x915C, sym["cploop"]),
            (0x0000, 1),                    # counters start at two
        ]
        v = validate_slice(SliceKind.FIRST, entries, cfg, session(ar))
        assert v is not None and v.index == 3
