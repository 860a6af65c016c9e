"""Bit-exact wire formats shared by prover and verifier.

Report frame (43 + 4*cf_size bytes):

    offset  0   h            32  HMAC-SHA-256 over pmem || metadata || entries
    offset 32   metadata     10  chal u32 | ar_min u16 | ar_max u16 | cf_size u16
    offset 42   trigger       1  simulator annotation, excluded from h
    offset 43   entries       4*cf_size  (src u16 || dest u16 each)

Response frame (41 bytes):

    offset  0   app           1
    offset  1   chal'         4
    offset  5   ar_min        2
    offset  7   ar_max        2
    offset  9   auth         32  HMAC-SHA-256 over chal' || ar_min || ar_max || app

All integers are big-endian.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import struct
from dataclasses import dataclass, field

from .monitor import Metadata, TriggerKind

MAC_LEN = 32
REPORT_FIXED = 43
RESPONSE_LEN = 41


class WireError(ValueError):
    pass


def mac(key: bytes, message: bytes) -> bytes:
    """HMAC-SHA-256 of ``message`` under ``key``."""
    return _hmac.new(key, message, hashlib.sha256).digest()


def attest_digest(key: bytes, pmem: bytes, md: Metadata,
                  entries: list[tuple[int, int]]) -> bytes:
    """The report measurement: pmem, metadata and the used log slice, in wire
    byte order.  The trigger annotation byte is deliberately not included."""
    return mac(key, pmem + md.pack() + pack_entries(entries))


def response_auth(key: bytes, chal: int, ar_min: int, ar_max: int, app: int) -> bytes:
    return mac(key, struct.pack(">IHHB", chal, ar_min, ar_max, app))


def pack_entries(entries: list[tuple[int, int]]) -> bytes:
    out = bytearray()
    for src, dest in entries:
        out += struct.pack(">HH", src, dest)
    return bytes(out)


@dataclass(frozen=True)
class CfaReport:
    h: bytes
    metadata: Metadata
    trigger: TriggerKind
    entries: tuple[tuple[int, int], ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class CfaResponse:
    app: int
    chal: int
    ar_min: int
    ar_max: int
    auth: bytes


def encode_report(r: CfaReport) -> bytes:
    if len(r.h) != MAC_LEN:
        raise WireError("bad digest length")
    if r.metadata.cf_size != len(r.entries):
        raise WireError("cf_size does not match entry count")
    return (r.h + r.metadata.pack() + bytes([r.trigger])
            + pack_entries(list(r.entries)))


def decode_report(raw: bytes) -> CfaReport:
    if len(raw) < REPORT_FIXED:
        raise WireError("report too short")
    h = raw[:MAC_LEN]
    md = Metadata.unpack(raw[MAC_LEN:MAC_LEN + 10])
    try:
        trigger = TriggerKind(raw[42])
    except ValueError:
        raise WireError(f"bad trigger byte {raw[42]}") from None
    if len(raw) != REPORT_FIXED + 4 * md.cf_size:
        raise WireError("report length does not match cf_size")
    entries = tuple(struct.unpack_from(">HH", raw, REPORT_FIXED + 4 * i)
                    for i in range(md.cf_size))
    return CfaReport(h, md, trigger, entries)


def encode_response(r: CfaResponse) -> bytes:
    if r.app not in (0, 1):
        raise WireError("app must be 0 or 1")
    if len(r.auth) != MAC_LEN:
        raise WireError("bad auth length")
    return struct.pack(">BIHH", r.app, r.chal, r.ar_min, r.ar_max) + r.auth


def decode_response(raw: bytes) -> CfaResponse:
    if len(raw) != RESPONSE_LEN:
        raise WireError("response must be 41 bytes")
    app, chal, ar_min, ar_max = struct.unpack_from(">BIHH", raw)
    return CfaResponse(app, chal, ar_min, ar_max, raw[9:])
