"""Simulated adversarial network between prover and verifier.

The adversary may drop, duplicate, or tamper with frames (Bernoulli per
frame, seeded and therefore reproducible), may black out whole cycle windows,
and may capture frames for later replay.  Frames are otherwise delivered in
FIFO order after a fixed latency; no cryptographic capability is modeled
because the endpoints rely on MACs alone.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

PROVER = "prv"
VERIFIER = "vrf"

DEFAULT_LATENCY = 200


@dataclass
class ChannelPolicy:
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    tamper_prob: float = 0.0
    drop_first: int = 0                      # deterministically drop the first n frames per direction
    blackout_windows: tuple[tuple[int, int], ...] = ()
    latency: int = DEFAULT_LATENCY
    seed: int = 0

    def __post_init__(self):
        for p in (self.drop_prob, self.dup_prob, self.tamper_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class _InFlight:
    deliver_at: int
    frame: bytes
    seq: int


@dataclass
class Channel:
    policy: ChannelPolicy = field(default_factory=ChannelPolicy)

    def __post_init__(self):
        self._rng = random.Random(self.policy.seed)
        self._queues: dict[str, list[_InFlight]] = {PROVER: [], VERIFIER: []}
        self._sent: dict[str, int] = {PROVER: 0, VERIFIER: 0}
        self._seq = 0
        self.captured: list[tuple[str, bytes]] = []   # adversary's replay buffer
        self.trace: list[str] = []                     # optional hex trace

    def _blacked_out(self, cycle: int) -> bool:
        return any(a <= cycle < b for a, b in self.policy.blackout_windows)

    def send(self, endpoint: str, frame: bytes, at_cycle: int) -> None:
        """Enqueue ``frame`` toward ``endpoint``, subject to the adversary."""
        if not frame:
            raise ValueError("empty frame")
        pol = self.policy
        self.captured.append((endpoint, bytes(frame)))
        self.trace.append(f"{at_cycle} ->{endpoint} {frame.hex()}")
        self._sent[endpoint] += 1
        if self._sent[endpoint] <= pol.drop_first:
            return
        if self._blacked_out(at_cycle):
            return
        if self._rng.random() < pol.drop_prob:
            return
        out = bytearray(frame)
        if self._rng.random() < pol.tamper_prob:
            pos = self._rng.randrange(len(out))
            out[pos] ^= 1 + self._rng.randrange(255)
        copies = 2 if self._rng.random() < pol.dup_prob else 1
        for i in range(copies):
            self._seq += 1
            self._queues[endpoint].append(
                _InFlight(at_cycle + pol.latency + i, bytes(out), self._seq))

    def inject(self, endpoint: str, frame: bytes, at_cycle: int) -> None:
        """Adversarial injection/replay: bypasses drop/tamper policy."""
        self._seq += 1
        self._queues[endpoint].append(
            _InFlight(at_cycle + self.policy.latency, bytes(frame), self._seq))
        self.trace.append(f"{at_cycle} =>{endpoint} {frame.hex()} (injected)")

    def deliver(self, endpoint: str, at_cycle: int) -> bytes | None:
        """At most one frame, FIFO among frames whose latency has elapsed."""
        q = self._queues[endpoint]
        ready = [f for f in q if f.deliver_at <= at_cycle]
        if not ready:
            return None
        first = min(ready, key=lambda f: (f.deliver_at, f.seq))
        q.remove(first)
        return first.frame
