"""Verifier endpoint: offline control-flow-graph construction from the
expected binary, online validation of log slices against that graph with a
shadow stack, approval decisions, and response generation.

Slice validation walks the logged (source, destination) pairs while tracking
a cursor (the address execution is expected to reach next by straight-line
flow), a shadow stack of expected return addresses, and the resume point
announced by a trusted-software entry.  Loop-counter entries are recognized
positionally: they follow a backward jump and their high half lies far below
program memory, so they cannot be confused with a real transfer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .isa import INSTR_SIZE, NO_FALLTHROUGH_OPS, DecodeError, Instr, Op, decode
from .mcu import MemoryLayout
from .monitor import TriggerKind
from .wire import (CfaResponse, WireError, attest_digest, decode_report,
                   encode_response, response_auth)

EXTERNAL = "<external>"   # cursor value while execution is outside the region

MASK16 = 0xFFFF


class CfgError(ValueError):
    pass


class EdgeType(enum.Enum):
    CALL = "call"
    JUMP = "jump"
    COND_TAKEN = "cond-taken"
    FALL_THROUGH = "fall-through"
    RETURN = "return"
    ISR_ENTRY = "isr-entry"
    ISR_RETURN = "isr-return"


@dataclass(frozen=True)
class BasicBlock:
    start: int
    end: int       # address of the last instruction in the block


@dataclass
class Cfg:
    ar_min: int
    ar_max: int
    instrs: dict[int, Instr]
    blocks: list[BasicBlock]
    edges: set[tuple[int, int | None, EdgeType]]   # (site, target, kind); None = dynamic
    call_targets: set[int]
    known_entries: set[int]
    isr_targets: set[int]

    def in_region(self, addr: int) -> bool:
        return self.ar_min <= addr <= self.ar_max

    def block_at(self, addr: int) -> BasicBlock | None:
        for b in self.blocks:
            if b.start <= addr <= b.end:
                return b
        return None


def build_cfg(binary: bytes, ar: tuple[int, int], ivt_targets: tuple[int, ...] = (),
              pmem_base: int = 0x8000, extra_entries: tuple[int, ...] = ()) -> Cfg:
    """Disassemble the attested region of the expected binary and split it
    into basic blocks with typed edges.  ``binary`` is full PMEM content."""
    ar_min, ar_max = ar
    instrs: dict[int, Instr] = {}
    for addr in range(ar_min, ar_max + 1, INSTR_SIZE):
        try:
            instrs[addr] = decode(binary, addr - pmem_base)
        except DecodeError as e:
            raise CfgError(f"undecodable instruction at {addr:#06x}: {e}") from None

    leaders = {ar_min}
    call_targets: set[int] = set()
    for addr, ins in instrs.items():
        op = ins.op
        if op in (Op.JMP, Op.JZ, Op.JNZ, Op.CALL) and ar_min <= ins.imm <= ar_max:
            leaders.add(ins.imm)
        if op is Op.CALL:
            call_targets.add(ins.imm)
        if op in (Op.JMP, Op.JZ, Op.JNZ, Op.CALL, Op.CALLI, Op.RET, Op.RETI, Op.HALT):
            if addr + INSTR_SIZE in instrs:
                leaders.add(addr + INSTR_SIZE)
    for t in ivt_targets:
        if ar_min <= t <= ar_max:
            leaders.add(t)
    leaders.update(extra_entries)

    starts = sorted(leaders)
    blocks = [BasicBlock(s, (starts[i + 1] - INSTR_SIZE) if i + 1 < len(starts) else ar_max)
              for i, s in enumerate(starts)]

    edges: set[tuple[int, int | None, EdgeType]] = set()
    for b in blocks:
        ins = instrs[b.end]
        op = ins.op
        nxt = b.end + INSTR_SIZE
        if op is Op.JMP:
            edges.add((b.end, ins.imm, EdgeType.JUMP))
        elif op in (Op.JZ, Op.JNZ):
            edges.add((b.end, ins.imm, EdgeType.COND_TAKEN))
            if nxt in instrs:
                edges.add((b.end, nxt, EdgeType.FALL_THROUGH))
        elif op is Op.CALL:
            edges.add((b.end, ins.imm, EdgeType.CALL))
        elif op is Op.CALLI:
            edges.add((b.end, None, EdgeType.CALL))
        elif op is Op.RET:
            edges.add((b.end, None, EdgeType.RETURN))
        elif op is Op.RETI:
            edges.add((b.end, None, EdgeType.ISR_RETURN))
        elif op is not Op.HALT and nxt in instrs:
            edges.add((b.end, nxt, EdgeType.FALL_THROUGH))

    known = call_targets | set(extra_entries) | {ar_min}
    return Cfg(ar_min, ar_max, instrs, blocks, edges, call_targets, known,
               set(ivt_targets))


# ---------------------------------------------------------------------------
# Online slice validation
# ---------------------------------------------------------------------------

class SliceKind(enum.Enum):
    FIRST = "first"
    INTERMEDIATE = "intermediate"
    LAST = "last"
    SINGLE = "single"


class Phase(enum.Enum):
    EXPECT_FIRST = "expect-first"
    EXPECT_NEXT = "expect-next"
    CLOSED = "closed"


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str

    def __str__(self):
        return f"{self.reason}@{self.index}"


@dataclass
class VerifySession:
    """Per-prover verifier state carried across reports."""
    expected_pmem: bytes
    layout: MemoryLayout
    issued_chal: int = 0
    confirmed_chal: int = 0
    issued_ar: tuple[int, int] = (0, 0)
    shadow: list = field(default_factory=list)    # ints, or candidate tuples
    cursor: int | str | None = None
    pending_resume: frozenset | None = None       # candidate resume points
    phase: Phase = Phase.EXPECT_FIRST
    last_src: int | None = None     # src of the previous transfer, for irq attribution
    seq: int = 0

    def fresh_run(self) -> None:
        """The device (re)starts executing from scratch."""
        self.shadow.clear()
        self.cursor = None
        self.pending_resume = None
        self.last_src = None


class _Walker:
    """Working state of one slice validation; committed only on success."""

    def __init__(self, cfg: Cfg, session: VerifySession):
        self.cfg = cfg
        self.lay = session.layout
        self.shadow = list(session.shadow)
        self.cursor = session.cursor
        self.pending = session.pending_resume
        self.last_src = session.last_src
        self.last_pair: tuple[int, int] | None = None
        self.entered_tcb = False

    def commit(self, session: VerifySession) -> None:
        session.shadow = self.shadow
        session.cursor = self.cursor
        session.pending_resume = self.pending
        session.last_src = self.last_src

    # -- helpers --

    def _loc(self, addr: int) -> int | str:
        return addr if self.cfg.in_region(addr) else EXTERNAL

    def _reachable(self, start, target: int) -> bool:
        """Straight-line flow from ``start`` to ``target``: conditionals may
        be crossed (not taken), unconditional transfers may not."""
        if not isinstance(start, int):
            return False
        addr = start
        while addr != target:
            ins = self.cfg.instrs.get(addr)
            if ins is None or ins.op in NO_FALLTHROUGH_OPS:
                return False
            addr += INSTR_SIZE
        return target in self.cfg.instrs

    def _enter_external(self, i: int, s: int, d: int) -> Violation | None:
        """Transfer from unaudited code into the region: a return to the
        shadow-tracked address, a call to a known entry, or a handler entry."""
        top = self.shadow[-1] if self.shadow else None
        if top is not None and (d == top if isinstance(top, int) else d in top):
            self.shadow.pop()
        elif d in self.cfg.known_entries or d in self.cfg.isr_targets:
            self.shadow.append((s + INSTR_SIZE) & MASK16)
        else:
            return Violation(i, "UnknownEdge")
        self.cursor = d
        return None

    def _accept_interrupt(self, i: int, d: int, resumes) -> Violation | None:
        """Jump into the trusted software or a handler at entry ``d``.
        ``resumes`` holds every resume point consistent with the log so far
        (an acceptance directly after a taken conditional is indistinguishable
        from one after the next not-taken pass; the eventual return or the
        next slice start disambiguates)."""
        cands = frozenset(self._loc(r) if isinstance(r, int) else r
                          for r in resumes)
        if d == self.lay.tcb_min:
            self.pending = cands
            self.cursor = None
            self.entered_tcb = True
            return None
        if d in self.cfg.isr_targets:
            ints = tuple(sorted(r for r in cands if isinstance(r, int)))
            if not ints:
                return Violation(i, "BrokenFlow")
            self.shadow.append(ints[0] if len(ints) == 1 else ints)
            self.cursor = self._loc(d)
            return None
        return Violation(i, "UnknownEdge")

    def _resume_candidates(self, i: int, s: int) -> list | Violation:
        """Possible interruption points for an acceptance whose attributed
        source is ``s`` (the last retired instruction)."""
        cfg = self.cfg
        if s == self.last_src and not self._reachable(self.cursor, s):
            # the previous logged transfer retired and the interrupt landed
            # on the very next cycle: execution stood at its destination
            return [self.cursor]
        if not self._reachable(self.cursor, s):
            return Violation(i, "BrokenFlow")
        ins = cfg.instrs.get(s)
        if ins is None:
            return Violation(i, "BrokenFlow")
        if ins.op in (Op.JZ, Op.JNZ):
            # a not-taken pass resumes past the conditional; if the previous
            # transfer was this same conditional taken, resuming at its
            # target is equally consistent
            cands = [(s + INSTR_SIZE) & MASK16]
            if s == self.last_src:
                cands.append(self.cursor)
            return cands
        if ins.op in NO_FALLTHROUGH_OPS:
            if s == self.last_src:
                return [self.cursor]   # retired and transferred, then the irq
            return Violation(i, "BrokenFlow")
        return [(s + INSTR_SIZE) & MASK16]

    # -- entry processing --

    def first_entry(self, kind: SliceKind, s: int, d: int,
                    issued_ar: tuple[int, int]) -> Violation | None:
        lay = self.lay
        if kind in (SliceKind.FIRST, SliceKind.SINGLE):
            if d != issued_ar[0]:
                return Violation(0, "BadRegionEntry")
            if s != lay.tcb_max:
                # function call into the region; remember where it returns
                self.shadow.append((s + INSTR_SIZE) & MASK16)
            self.pending = None
            self.cursor = d
            return None
        # intermediate/last: normally the trusted-software exit jump back to
        # the interruption point; a trigger that fired while execution was
        # outside the region instead surfaces as a fresh external entry
        if s == lay.tcb_max:
            if not self.cfg.in_region(d):
                return Violation(0, "BadSliceStart")
            if not (isinstance(self.pending, frozenset) and d in self.pending):
                return Violation(0, "ResumeMismatch")
            self.pending = None
            self.cursor = d
            return None
        if self.cursor == EXTERNAL or (isinstance(self.pending, frozenset)
                                       and EXTERNAL in self.pending):
            self.pending = None
            return self._enter_external(0, s, d)
        return Violation(0, "BadSliceStart")

    def counter_entry(self, i: int, s: int, d: int) -> Violation | None:
        count = (s << 16) | d
        ls, ld = self.last_pair
        if count < 2:
            return Violation(i, "BadCounter")
        if self.cursor != ld or not self._reachable(ld, ls):
            return Violation(i, "BadCounter")
        # iterations 2..count retrace the identical backward jump; one extra
        # traversal proves the loop body is straight-line, the rest repeat it
        self.cursor = ld
        return None

    def entry(self, i: int, s: int, d: int) -> Violation | None:
        cfg, lay = self.cfg, self.lay

        if self.cursor == EXTERNAL:
            if cfg.in_region(s):
                return Violation(i, "BrokenFlow")
            return self._enter_external(i, s, d)

        # a transfer into the trusted software or a handler entry is an
        # interrupt acceptance, except when it is the taken edge of the very
        # conditional sitting at the source
        if d == lay.tcb_min or d in cfg.isr_targets:
            ins = cfg.instrs.get(s)
            if not (ins is not None and ins.op in (Op.JMP, Op.JZ, Op.JNZ, Op.CALL)
                    and d == ins.imm and self._reachable(self.cursor, s)):
                cands = self._resume_candidates(i, s)
                if isinstance(cands, Violation):
                    return cands
                return self._accept_interrupt(i, d, cands)

        if s == self.last_src and not self._reachable(self.cursor, s):
            return Violation(i, "BrokenFlow")
        if not self._reachable(self.cursor, s):
            return Violation(i, "BrokenFlow")
        ins = cfg.instrs[s]
        op = ins.op

        if op is Op.CALL:
            if d != ins.imm:
                return Violation(i, "BadCallTarget")
            self.shadow.append((s + INSTR_SIZE) & MASK16)
        elif op is Op.CALLI:
            if d not in cfg.known_entries:
                return Violation(i, "IndirectTarget")
            self.shadow.append((s + INSTR_SIZE) & MASK16)
        elif op is Op.JMP:
            if d != ins.imm:
                return Violation(i, "BadJumpTarget")
        elif op in (Op.JZ, Op.JNZ):
            if d != ins.imm:
                return Violation(i, "BadJumpTarget")
        elif op in (Op.RET, Op.RETI):
            if not self.shadow:
                return Violation(i, "ShadowUnderflow")
            expect = self.shadow.pop()
            ok = d == expect if isinstance(expect, int) else d in expect
            if not ok:
                return Violation(i, "ReturnMismatch")
        else:
            return Violation(i, "UnknownEdge")
        self.cursor = self._loc(d)
        return None


def validate_slice(kind: SliceKind, entries: list[tuple[int, int]], cfg: Cfg,
                   session: VerifySession) -> Violation | None:
    """Validate one log slice; on success the session's traversal state is
    advanced, on violation it is left untouched."""
    w = _Walker(cfg, session)
    lay = session.layout

    for i, (s, d) in enumerate(entries):
        if w.entered_tcb:
            return Violation(i, "EntriesAfterTrigger")
        if w.last_pair is not None and w.last_pair[1] <= w.last_pair[0] \
                and s < lay.pmem_base:
            v = w.counter_entry(i, s, d)
            if v is not None:
                return v
            w.last_pair = None   # a counter cannot follow a counter
            continue
        if i == 0:
            v = w.first_entry(kind, s, d, session.issued_ar)
        else:
            v = w.entry(i, s, d)
        if v is not None:
            return v
        w.last_pair = (s, d)
        w.last_src = s

    if kind in (SliceKind.LAST, SliceKind.SINGLE):
        if not entries or entries[-1] != (session.issued_ar[1], lay.tcb_min):
            return Violation(max(0, len(entries) - 1), "BadSliceEnd")

    w.commit(session)
    return None


# ---------------------------------------------------------------------------
# Report handling
# ---------------------------------------------------------------------------

@dataclass
class VerifierConfig:
    key: bytes                       # pre-shared symmetric attestation key
    expected_pmem: bytes
    layout: MemoryLayout
    target_ar: tuple[int, int]       # region bounds issued in responses
    ivt_targets: tuple[int, ...] = ()
    extra_entries: tuple[int, ...] = ()
    patched_pmem: bytes | None = None   # expectation after a commanded update
    patched_ar: tuple[int, int] | None = None


class Verifier:
    """Drives one session per prover: authenticates reports, validates their
    log slices, and answers with authenticated approve/deny responses.

    Reports failing the measurement check are dropped without a response
    (indistinguishable from channel corruption; the prover retransmits), as
    are reports with out-of-window challenges (replays).  Authentic reports
    always get a response, approving or not.
    """

    def __init__(self, config: VerifierConfig):
        self.config = config
        self.session = VerifySession(config.expected_pmem, config.layout)
        self.graph = build_cfg(config.expected_pmem, config.target_ar,
                               config.ivt_targets, config.layout.pmem_base,
                               config.extra_entries)
        self.audit: list[str] = []
        self._cache: dict[tuple[int, bytes], bytes] = {}
        self._target_ar = config.target_ar

    # -- helpers --

    def _infer_kind(self, trigger) -> SliceKind:
        fresh = self.session.phase in (Phase.EXPECT_FIRST, Phase.CLOSED)
        if trigger == TriggerKind.REGION_END:
            return SliceKind.SINGLE if fresh else SliceKind.LAST
        return SliceKind.FIRST if fresh else SliceKind.INTERMEDIATE

    def _audit(self, kind: str, app: int, reason: str, entries: int) -> None:
        self.session.seq += 1
        self.audit.append(f"seq={self.session.seq} kind={kind} app={app} "
                          f"reason={reason} entries={entries}")

    def handle_report(self, frame: bytes) -> bytes | None:
        sess = self.session
        try:
            report = decode_report(frame)
        except WireError:
            self._audit("?", 0, "bad-frame", 0)
            return None
        md = report.metadata

        cache_key = (md.chal, report.h)
        if cache_key in self._cache:
            cached = self._cache[cache_key]
            self._audit("cached", cached[0], "resend", md.cf_size)
            return cached

        expect_h = attest_digest(self.config.key, sess.expected_pmem, md,
                                 list(report.entries))
        if expect_h != report.h:
            self._audit("?", 0, "bad-mac", md.cf_size)
            return None
        if md.chal not in (sess.confirmed_chal, sess.issued_chal):
            self._audit("?", 0, "stale-chal", md.cf_size)
            return None
        sess.confirmed_chal = md.chal

        kind = self._infer_kind(report.trigger)
        app, reason = 1, "ok"
        if (md.ar_min, md.ar_max) != sess.issued_ar:
            app, reason = 0, "bad-ar"
        else:
            violation = validate_slice(kind, list(report.entries), self.graph, sess)
            if violation is not None:
                app, reason = 0, str(violation)

        if app == 1:
            if report.trigger in (TriggerKind.BOOT, TriggerKind.VIOLATION):
                sess.fresh_run()
                sess.phase = Phase.EXPECT_FIRST
            elif kind in (SliceKind.LAST, SliceKind.SINGLE):
                sess.fresh_run()
                sess.phase = Phase.CLOSED
            elif report.entries:
                sess.phase = Phase.EXPECT_NEXT
        else:
            # the response commands remediation; the device restarts fresh
            sess.fresh_run()
            sess.phase = Phase.EXPECT_FIRST
            if self.config.patched_pmem is not None:
                sess.expected_pmem = self.config.patched_pmem
                if self.config.patched_ar is not None:
                    self._target_ar = self.config.patched_ar
                self.graph = build_cfg(sess.expected_pmem, self._target_ar,
                                       self.config.ivt_targets,
                                       self.config.layout.pmem_base,
                                       self.config.extra_entries)

        raw = self._respond(app)
        self._cache[cache_key] = raw
        self._audit(kind.value, app, reason, md.cf_size)
        return raw

    def _respond(self, app: int) -> bytes:
        sess = self.session
        sess.issued_chal += 1
        ar_min, ar_max = self._target_ar
        auth = response_auth(self.config.key, sess.issued_chal, ar_min, ar_max, app)
        sess.issued_ar = (ar_min, ar_max)
        return encode_response(CfaResponse(app, sess.issued_chal, ar_min, ar_max, auth))
