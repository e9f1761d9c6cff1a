"""Shared domain types, energy arithmetic and the hash-chained ledger.

The ledger is an append-only chain of blocks where every block hash covers the
block's samples and the hash of its predecessor. There is no consensus: the
aggregator writing the chain is trusted, so integrity is checked purely by
recomputation.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

DeviceId = int
NetworkAddress = str
SimTime = int  # microseconds since simulation start

US_PER_S = 1_000_000
HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)
U64_MAX = 2**64 - 1

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")
_SAMPLE = struct.Struct(">QQQQQ")
_HEAD = struct.Struct(">Q32sI")  # index, prev_hash, payload_count


class LedgerFormatError(ValueError):
    """Raised when ledger bytes cannot be framed or decoded."""


def seconds(t: float) -> SimTime:
    """Convert seconds to integer microseconds."""
    return int(round(t * US_PER_S))


def compute_energy(current: float, voltage: float, duration: float) -> float:
    """Energy in joules drawn at ``current`` amperes and ``voltage`` volts for ``duration`` seconds."""
    if current < 0 or voltage < 0 or duration < 0:
        raise ValueError(
            f"energy inputs must be non-negative (current={current}, voltage={voltage}, duration={duration})"
        )
    return voltage * current * duration


def to_microjoules(energy: float) -> int:
    uj = int(round(energy * 1e6))
    if uj < 0 or uj > U64_MAX:
        raise ValueError(f"energy {energy} J is outside the u64 microjoule range")
    return uj


@dataclass(frozen=True)
class MeterSample:
    """One per-device energy measurement over ``[window_start, window_end)``."""

    device: DeviceId
    seq: int
    window_start: SimTime
    window_end: SimTime
    energy: float

    def __post_init__(self) -> None:
        if self.window_start >= self.window_end:
            raise ValueError(f"empty or inverted sample window {self.window_start}..{self.window_end}")
        if self.energy < 0:
            raise ValueError(f"negative sample energy {self.energy}")
        if self.seq < 0:
            raise ValueError(f"negative sequence number {self.seq}")

    @property
    def duration(self) -> SimTime:
        return self.window_end - self.window_start

    def overlap(self, start: SimTime, end: SimTime) -> float:
        """Energy attributed to ``[start, end)`` assuming constant draw within the sample."""
        lo = max(start, self.window_start)
        hi = min(end, self.window_end)
        if hi <= lo:
            return 0.0
        if lo == self.window_start and hi == self.window_end:
            return self.energy
        return self.energy * (hi - lo) / self.duration


def canonical_serialize(
    index: int,
    prev_hash: bytes,
    payload: Sequence[MeterSample],
    created_at: SimTime,
    aggregator: NetworkAddress,
) -> bytes:
    """Big-endian, length-prefixed block encoding used as the hash input.

    Layout: index u64, prev_hash 32 B, payload_count u32, then per sample
    device/seq/window_start/window_end/energy_microjoule as u64, created_at
    u64, addr_len u16, addr bytes (UTF-8).
    """
    if len(prev_hash) != HASH_SIZE:
        raise ValueError(f"prev_hash must be {HASH_SIZE} bytes, got {len(prev_hash)}")
    addr = str(aggregator).encode("utf-8")
    parts = [_HEAD.pack(index, prev_hash, len(payload))]
    for s in payload:
        parts.append(_SAMPLE.pack(s.device, s.seq, s.window_start, s.window_end, to_microjoules(s.energy)))
    parts.append(_U64.pack(created_at))
    parts.append(_U16.pack(len(addr)))
    parts.append(addr)
    return b"".join(parts)


def block_hash(body: bytes) -> bytes:
    return hashlib.sha256(body).digest()


@dataclass(frozen=True)
class LedgerBlock:
    index: int
    prev_hash: bytes
    payload: tuple[MeterSample, ...]
    created_at: SimTime
    aggregator: NetworkAddress
    hash: bytes

    def body(self) -> bytes:
        return canonical_serialize(self.index, self.prev_hash, self.payload, self.created_at, self.aggregator)


def make_block(
    index: int,
    prev_hash: bytes,
    payload: Iterable[MeterSample],
    created_at: SimTime,
    aggregator: NetworkAddress,
) -> LedgerBlock:
    payload = tuple(payload)
    digest = block_hash(canonical_serialize(index, prev_hash, payload, created_at, aggregator))
    return LedgerBlock(index, prev_hash, payload, created_at, aggregator, digest)


def genesis_block(aggregator: NetworkAddress, created_at: SimTime = 0) -> LedgerBlock:
    return make_block(0, ZERO_HASH, (), created_at, aggregator)


@dataclass(frozen=True)
class Ledger:
    blocks: tuple[LedgerBlock, ...] = ()

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> LedgerBlock | None:
        return self.blocks[-1] if self.blocks else None

    def samples(self) -> list[MeterSample]:
        return [s for b in self.blocks for s in b.payload]


@dataclass(frozen=True)
class Valid:
    def __bool__(self) -> bool:
        return True

    def __str__(self) -> str:
        return "Valid"


@dataclass(frozen=True)
class Invalid:
    first_bad_index: int
    reason: str = field(default="", compare=False)

    def __bool__(self) -> bool:
        return False

    def __str__(self) -> str:
        return f"Invalid({self.first_bad_index})"


Verification = Union[Valid, Invalid]


def append_block(
    ledger: Ledger,
    payload: Iterable[MeterSample],
    created_at: SimTime,
    aggregator: NetworkAddress,
) -> Ledger:
    """Return a new ledger with one more block; an empty ledger gets a genesis block first."""
    blocks = ledger.blocks
    if not blocks:
        blocks = (genesis_block(aggregator, created_at),)
    tip = blocks[-1]
    block = make_block(tip.index + 1, tip.hash, payload, created_at, aggregator)
    return Ledger(blocks + (block,))


def verify_chain(ledger: Ledger) -> Verification:
    prev = ZERO_HASH
    for k, block in enumerate(ledger.blocks):
        if block.index != k:
            return Invalid(k, f"index field {block.index} at position {k}")
        if block.prev_hash != prev:
            return Invalid(k, "prev_hash does not match predecessor")
        if k == 0 and block.payload:
            return Invalid(0, "genesis block carries a payload")
        try:
            recomputed = block_hash(block.body())
        except (ValueError, struct.error) as exc:
            return Invalid(k, f"unencodable block: {exc}")
        if recomputed != block.hash:
            return Invalid(k, "hash mismatch")
        prev = block.hash
    return Valid()


# -- ledger files -------------------------------------------------------------
#
# A ledger file is the concatenation of records ``u32 record_len || body ||
# hash`` where ``body`` is the canonical block layout and ``hash`` its stored
# 32-byte digest. ``record_len`` covers body and hash.


def decode_block(body: bytes, stored_hash: bytes) -> LedgerBlock:
    try:
        index, prev_hash, count = _HEAD.unpack_from(body, 0)
        off = _HEAD.size
        payload = []
        for _ in range(count):
            dev, seq, ws, we, uj = _SAMPLE.unpack_from(body, off)
            off += _SAMPLE.size
            payload.append(MeterSample(dev, seq, ws, we, uj / 1e6))
        (created_at,) = _U64.unpack_from(body, off)
        off += _U64.size
        (addr_len,) = _U16.unpack_from(body, off)
        off += _U16.size
        addr = body[off : off + addr_len]
        off += addr_len
        if len(addr) != addr_len or off != len(body):
            raise LedgerFormatError("block body length does not match its fields")
        return LedgerBlock(index, prev_hash, tuple(payload), created_at, addr.decode("utf-8"), stored_hash)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise LedgerFormatError(str(exc)) from exc


def ledger_to_bytes(ledger: Ledger) -> bytes:
    out = []
    for block in ledger.blocks:
        body = block.body()
        out.append(_U32.pack(len(body) + HASH_SIZE))
        out.append(body)
        out.append(block.hash)
    return b"".join(out)


def split_records(data: bytes) -> list[tuple[bytes, bytes]]:
    """Frame a ledger file into ``(body, stored_hash)`` pairs."""
    records = []
    off = 0
    while off < len(data):
        if off + _U32.size > len(data):
            raise LedgerFormatError(f"truncated record header at byte {off}")
        (n,) = _U32.unpack_from(data, off)
        off += _U32.size
        if n < HASH_SIZE or off + n > len(data):
            raise LedgerFormatError(f"record at byte {off - _U32.size} overruns the file")
        records.append((data[off : off + n - HASH_SIZE], data[off + n - HASH_SIZE : off + n]))
        off += n
    return records


def ledger_from_bytes(data: bytes) -> Ledger:
    return Ledger(tuple(decode_block(body, h) for body, h in split_records(data)))


def verify_bytes(data: bytes) -> Verification:
    """Verify a serialized ledger at the byte level.

    Works even when a tampered body no longer decodes into fields, which is
    what a hex editor tends to produce. Framing errors raise LedgerFormatError.
    """
    prev = ZERO_HASH
    for k, (body, stored) in enumerate(split_records(data)):
        if block_hash(body) != stored:
            return Invalid(k, "hash mismatch")
        try:
            block = decode_block(body, stored)
        except LedgerFormatError as exc:
            return Invalid(k, f"undecodable body: {exc}")
        if block.index != k:
            return Invalid(k, f"index field {block.index} at position {k}")
        if block.prev_hash != prev:
            return Invalid(k, "prev_hash does not match predecessor")
        if k == 0 and block.payload:
            return Invalid(0, "genesis block carries a payload")
        prev = stored
    return Valid()


def merge_ledgers(ledgers: Iterable[Ledger]) -> list[LedgerBlock]:
    """Deterministic export of several per-aggregator chains as one sequence.

    Blocks are ordered by creation time, then aggregator address, then index.
    Genesis blocks are skipped.
    """
    blocks = [b for led in ledgers for b in led.blocks if b.index > 0]
    return sorted(blocks, key=lambda b: (b.created_at, b.aggregator, b.index))
