"""Functional model of the trusted software: measurement (Att), report
transmission and response authentication (Wait), and remediation (Heal).

The model runs whenever the core reaches the trusted entry point.  It charges
simulated cycle costs per phase instead of executing real instructions; its
*observable* behavior (memory writes, wire messages, phase ordering) is what
the surrounding hardware model protects and what the tests pin down.

The device key lives only inside this module's closures; no operation returns
it and it is never written to simulated memory or the wire.
"""

from __future__ import annotations

import enum
import hmac
from dataclasses import dataclass

from .monitor import Metadata
from .wire import CfaResponse, attest_digest, response_auth

# Cycle-cost model.  Attestation is dominated by MAC-ing program memory, so
# its cost scales with the measured byte count; the rest are flat charges.
ATT_BASE_CYCLES = 2_000
ATT_CYCLES_PER_BYTE = 4
AUTH_CYCLES = 3_000
HEAL_CYCLES = 500
WAIT_POLL_CYCLES = 50      # granularity of the wait loop
DEFAULT_RETRANSMIT_EVERY = 10_000


class PolicyMode(enum.Enum):
    STRICT = "strict"
    BEST_EFFORT_RESUME = "resume"
    BEST_EFFORT_HEAL = "heal"


@dataclass(frozen=True)
class WaitPolicy:
    """How long the prover is willing to pause for verifier approval."""
    mode: PolicyMode = PolicyMode.STRICT
    timeout_cycles: int = 0
    retransmit_every: int = DEFAULT_RETRANSMIT_EVERY

    def __post_init__(self):
        if self.mode is not PolicyMode.STRICT and self.timeout_cycles <= 0:
            raise ValueError("best-effort policies need a positive timeout")


class HealAction(enum.Enum):
    SHUTDOWN = "shutdown"
    REBOOT = "reboot"
    UPDATE = "update"


class DeviceKey:
    """Symmetric attestation key.  Deliberately opaque: no repr leakage, no
    serialization; only the two MAC operations below can reach the bytes."""

    __slots__ = ("_k",)

    def __init__(self, k: bytes):
        if len(k) != 32:
            raise ValueError("key must be 32 bytes")
        self._k = bytes(k)

    def __repr__(self):
        return "DeviceKey(<hidden>)"


def tcb_att(key: DeviceKey, pmem: bytes, md: Metadata,
            entries: list[tuple[int, int]]) -> tuple[bytes, int]:
    """Measurement phase: returns (digest, charged cycles)."""
    h = attest_digest(key._k, pmem, md, entries)
    cost = ATT_BASE_CYCLES + ATT_CYCLES_PER_BYTE * (len(pmem) + 10 + 4 * len(entries))
    return h, cost


def authenticate_response(key: DeviceKey, resp: CfaResponse, stored_chal: int) -> bool:
    """out bit of the response check: fresh challenge and a valid tag."""
    if resp.chal <= stored_chal or resp.app not in (0, 1):
        return False
    expect = response_auth(key._k, resp.chal, resp.ar_min, resp.ar_max, resp.app)
    return hmac.compare_digest(expect, resp.auth)
