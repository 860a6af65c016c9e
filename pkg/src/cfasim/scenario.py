"""Scenario runner: wires a prover device, a verifier, and an adversarial
channel under one logical clock, runs to completion (halt, shutdown, or
budget), and reports runtime statistics plus the verifier's audit trail.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace

from .apps import FIXTURES, encode_input, overflow_input
from .asm import assemble
from .channel import Channel, ChannelPolicy, PROVER, VERIFIER
from .device import Device, DeviceEvents, DeviceMode, DeviceStats
from .mcu import MemoryLayout, ProgramImage, render_pmem
from .tcb import DeviceKey, HealAction, WaitPolicy
from .verifier import Verifier, VerifierConfig
from .wire import CfaReport

DEFAULT_BUDGET = 3_000_000


class Outcome(enum.Enum):
    COMPLETED = "completed"        # application ran to HALT
    SHUTDOWN = "shutdown"          # remediation shut the device down
    DEADLOCK = "deadlock"          # still awaiting approval at budget end
    BUDGET_EXHAUSTED = "budget-exhausted"


@dataclass
class ScenarioConfig:
    app: str = "few_branch"
    max_cflog_bytes: int = 512
    timer_deadline_cycles: int = 1_000_000
    policy: WaitPolicy = field(default_factory=WaitPolicy)
    channel: ChannelPolicy = field(default_factory=ChannelPolicy)
    input_kind: str = "benign"          # benign | overflow | none (password app)
    heal_action: HealAction = HealAction.SHUTDOWN
    seed: int = 0
    cycle_budget: int = DEFAULT_BUDGET
    events: DeviceEvents = field(default_factory=DeviceEvents)
    keep_trace: bool = False

    def __post_init__(self):
        if self.max_cflog_bytes % 4:
            raise ValueError("log size must be a multiple of 4")


@dataclass
class StatsReport:
    """Per-run statistics in the shape of the runtime-evaluation tables."""
    app: str
    max_cflog_bytes: int
    outcome: Outcome
    n_t1: int
    n_t2: int
    n_t3: int
    n_violation_resets: int
    n_reports: int
    cflog_bytes_total: int
    att_cycles: int
    wait_cycles: int
    heal_cycles: int
    app_cycles: int
    total_cycles: int

    @classmethod
    def collect(cls, app: str, log_size: int, outcome: Outcome,
                stats: DeviceStats, total_cycles: int) -> "StatsReport":
        return cls(app, log_size, outcome, stats.n_t1, stats.n_t2, stats.n_t3,
                   stats.n_violation_resets, stats.n_reports,
                   stats.cflog_bytes_total, stats.att_cycles, stats.wait_cycles,
                   stats.heal_cycles, stats.app_cycles, total_cycles)

    @property
    def trigger_total(self) -> int:
        return self.n_t1 + self.n_t2 + self.n_t3 + self.n_violation_resets

    def kv_lines(self) -> list[str]:
        keys = ("app", "max_cflog_bytes", "outcome", "n_t1", "n_t2", "n_t3",
                "n_violation_resets", "n_reports", "cflog_bytes_total",
                "att_cycles", "wait_cycles", "heal_cycles", "app_cycles",
                "total_cycles")
        vals = {k: getattr(self, k) for k in keys}
        vals["outcome"] = self.outcome.value
        return [f"{k}={vals[k]}" for k in keys]

    def table_row(self) -> str:
        return (f"{self.app:<12} {self.max_cflog_bytes:>6} {self.n_t1:>5} "
                f"{self.n_t2:>5} {self.n_t3:>5} {self.n_violation_resets:>5} "
                f"{self.n_reports:>8} {self.cflog_bytes_total:>10} "
                f"{self.outcome.value}")

    TABLE_HEADER = (f"{'app':<12} {'log':>6} {'#T1':>5} {'#T2':>5} {'#T3':>5} "
                    f"{'#vio':>5} {'#report':>8} {'log-bytes':>10} outcome")


@dataclass
class ScenarioResult:
    stats: StatsReport
    outcome: Outcome
    audit: list[str]
    reports: list[CfaReport]
    device: Device
    verifier: Verifier
    channel: Channel


def _derive_key(seed: int) -> bytes:
    return hashlib.sha256(b"device-key:%d" % seed).digest()


def run_image(image: ProgramImage, ar: tuple[int, int], layout: MemoryLayout,
              *, key_bytes: bytes, app_name: str = "custom",
              policy: WaitPolicy | None = None,
              heal_action: HealAction = HealAction.SHUTDOWN,
              update_image: ProgramImage | None = None,
              patched_ar: tuple[int, int] | None = None,
              channel_policy: ChannelPolicy | None = None,
              events: DeviceEvents | None = None,
              input_bytes: bytes = b"",
              ivt_targets: tuple[int, ...] = (),
              timer_deadline: int = 0,
              cycle_budget: int = DEFAULT_BUDGET,
              keep_trace: bool = False) -> ScenarioResult:
    """Run an arbitrary image against a matching verifier to completion."""
    channel = Channel(channel_policy or ChannelPolicy())
    device = Device(image, layout, DeviceKey(key_bytes), policy=policy,
                    heal_action=heal_action, update_image=update_image,
                    timer_deadline=timer_deadline, events=events,
                    keep_trace=keep_trace)
    if input_bytes:
        off = layout.input_base - layout.dmem_base
        device.state.dmem[off:off + len(input_bytes)] = input_bytes

    vconf = VerifierConfig(
        key=key_bytes,
        expected_pmem=render_pmem(image, layout),
        layout=layout,
        target_ar=ar,
        ivt_targets=ivt_targets,
        patched_pmem=(render_pmem(update_image, layout)
                      if update_image is not None else None),
        patched_ar=patched_ar,
    )
    verifier = Verifier(vconf)

    while device.running and device.cycle < cycle_budget:
        device.tick(channel)
        while (frame := channel.deliver(VERIFIER, device.cycle)) is not None:
            resp = verifier.handle_report(frame)
            if resp is not None:
                channel.send(PROVER, resp, device.cycle)

    if device.mode is DeviceMode.HALTED:
        outcome = Outcome.COMPLETED
    elif device.mode is DeviceMode.SHUTDOWN:
        outcome = Outcome.SHUTDOWN
    elif device.mode is DeviceMode.WAIT:
        outcome = Outcome.DEADLOCK
    else:
        outcome = Outcome.BUDGET_EXHAUSTED

    stats = StatsReport.collect(app_name, layout.cflog_size, outcome,
                                device.stats, device.cycle)
    return ScenarioResult(stats, outcome, list(verifier.audit),
                          list(device.reports), device, verifier, channel)


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Run one built-in fixture scenario to completion."""
    layout = MemoryLayout(cflog_size=cfg.max_cflog_bytes)
    fixture = FIXTURES[cfg.app]
    built = assemble(fixture.source, entry=layout.tcb_min)
    ar = (built.symbols[fixture.ar_labels[0]], built.symbols[fixture.ar_labels[1]])

    patched_image = None
    patched_ar = None
    if fixture.patched_source is not None and cfg.heal_action is HealAction.UPDATE:
        patched = assemble(fixture.patched_source, entry=layout.tcb_min)
        patched_image = patched.image
        patched_ar = (patched.symbols[fixture.ar_labels[0]],
                      patched.symbols[fixture.ar_labels[1]])

    input_bytes = b""
    if cfg.input_kind != "none" and fixture.input_words:
        words = fixture.input_words if cfg.input_kind == "benign" \
            else overflow_input(built.symbols)
        input_bytes = encode_input(words)

    chan_policy = replace(cfg.channel, seed=cfg.channel.seed or cfg.seed)
    return run_image(built.image, ar, layout,
                     key_bytes=_derive_key(cfg.seed), app_name=cfg.app,
                     policy=cfg.policy, heal_action=cfg.heal_action,
                     update_image=patched_image, patched_ar=patched_ar,
                     channel_policy=chan_policy, events=cfg.events,
                     input_bytes=input_bytes,
                     timer_deadline=cfg.timer_deadline_cycles,
                     cycle_budget=cfg.cycle_budget, keep_trace=cfg.keep_trace)


def decompress_entries(entries, pmem_base: int = 0x8000) -> list[tuple[int, int]]:
    """Expand loop-counter entries: a counter with value n stands for n
    occurrences of the backward jump logged immediately before it."""
    out: list[tuple[int, int]] = []
    prev_was_jump = False
    for src, dest in entries:
        if prev_was_jump and out and out[-1][1] <= out[-1][0] and src < pmem_base:
            count = (src << 16) | dest
            out.extend([out[-1]] * (count - 1))
            prev_was_jump = False
            continue
        out.append((src, dest))
        prev_was_jump = True
    return out
