"""Aggregator state machine.

Handles permanent and temporary membership, slot admission, Ack/Nack for
reports, backhaul verification and forwarding, the network-level ground-truth
comparison, ledger sealing and billing at the home network.

Transitions return a new :class:`AggregatorState` and the messages to send.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Protocol

from .core import (
    US_PER_S,
    DeviceId,
    Ledger,
    MeterSample,
    NetworkAddress,
    SimTime,
    append_block,
    genesis_block,
    seconds,
)
from .messages import (
    Ack,
    ForwardAck,
    ForwardConsumption,
    Message,
    Nack,
    RegisterReject,
    RegisterRequest,
    RegisterResponse,
    RemoveMembership,
    Report,
    VerifyDeviceRequest,
    VerifyDeviceResponse,
)

SENSOR_OFFSET_A = 0.5e-3  # current-sensor offset error bound


class MembershipError(Exception):
    pass


class Membership(enum.Enum):
    PERMANENT = "Permanent"
    TEMPORARY = "Temporary"


@dataclass(frozen=True)
class MembershipRecord:
    device: DeviceId
    kind: Membership
    master: NetworkAddress
    slot: int
    registered_at: SimTime
    active: bool = False  # set once the first report is accepted


@dataclass(frozen=True)
class PendingRegistration:
    request_id: int
    master: NetworkAddress
    requested_at: SimTime


@dataclass(frozen=True)
class AggregatorConfig:
    window: SimTime = seconds(1.0)
    expected_gap_fraction: float = 0.0
    sensor_offset_a: float = SENSOR_OFFSET_A
    nominal_voltage: float = 5.0
    slack_j: float = 1e-6
    temp_timeout: SimTime = 3 * seconds(0.1)


@dataclass(frozen=True)
class AnomalyVerdict:
    window: tuple[SimTime, SimTime]
    reported_sum: float
    ground_truth: float
    expected_gap_fraction: float
    tolerance: float
    flagged: bool
    n_devices: int

    @property
    def gap_pct(self) -> Optional[float]:
        if self.reported_sum <= 0:
            return None
        return (self.ground_truth - self.reported_sum) / self.reported_sum * 100.0


class ElectricalModel(Protocol):
    """What the aggregator's own meter can observe on its network."""

    loss_fraction: float

    def consumption(self, device: DeviceId, t0: SimTime, t1: SimTime) -> float:
        """True energy drawn by ``device`` on this network over ``[t0, t1)``."""

    def sensor_error(self, t0: SimTime, t1: SimTime) -> float:
        """Error of the aggregator's current sensor over ``[t0, t1)``, in joules."""


@dataclass(frozen=True)
class AggregatorState:
    addr: NetworkAddress
    slot_capacity: int
    config: AggregatorConfig = field(default_factory=AggregatorConfig)
    members: Mapping[DeviceId, MembershipRecord] = field(default_factory=dict)
    ledger: Ledger = field(default_factory=Ledger)
    batch: tuple[MeterSample, ...] = ()
    pending_verifications: Mapping[DeviceId, PendingRegistration] = field(default_factory=dict)
    reported: Mapping[int, float] = field(default_factory=dict)
    window_devices: Mapping[int, frozenset] = field(default_factory=dict)
    own_meter: Mapping[int, float] = field(default_factory=dict)
    billing: Mapping[DeviceId, float] = field(default_factory=dict)
    billing_records: Mapping[DeviceId, tuple[MeterSample, ...]] = field(default_factory=dict)
    acked: Mapping[DeviceId, int] = field(default_factory=dict)
    seen: Mapping[DeviceId, frozenset] = field(default_factory=dict)
    outbox: Mapping[DeviceId, tuple[NetworkAddress, tuple[MeterSample, ...]]] = field(default_factory=dict)
    last_seen: Mapping[DeviceId, SimTime] = field(default_factory=dict)
    verdicts: tuple[AnomalyVerdict, ...] = ()
    counters: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.members) > self.slot_capacity:
            raise ValueError("membership exceeds slot capacity")


def new_aggregator(addr: NetworkAddress, slot_capacity: int, config: AggregatorConfig | None = None) -> AggregatorState:
    return AggregatorState(
        addr=addr,
        slot_capacity=slot_capacity,
        config=config or AggregatorConfig(),
        ledger=Ledger((genesis_block(addr, 0),)),
    )


def _bump(agg: AggregatorState, key: str, n: int = 1) -> AggregatorState:
    counters = dict(agg.counters)
    counters[key] = counters.get(key, 0) + n
    return replace(agg, counters=counters)


def _with(mapping: Mapping, key, value) -> dict:
    out = dict(mapping)
    out[key] = value
    return out


def _without(mapping: Mapping, key) -> dict:
    out = dict(mapping)
    out.pop(key, None)
    return out


def _free_slot(agg: AggregatorState) -> Optional[int]:
    used = {r.slot for r in agg.members.values()}
    if len(used) + len(agg.pending_verifications) >= agg.slot_capacity:
        return None
    return next(i for i in range(agg.slot_capacity) if i not in used)


def _respond(agg: AggregatorState, device: DeviceId, reply_to: Optional[int], temporary: bool = False) -> RegisterResponse:
    return RegisterResponse(src=agg.addr, dst=device, addr=agg.addr, temporary=temporary, reply_to=reply_to)


def on_register_request(agg: AggregatorState, req: RegisterRequest, now: SimTime) -> tuple[AggregatorState, list[Message]]:
    dev = req.device
    rec = agg.members.get(dev)
    if req.master is None or req.master == agg.addr:
        if rec is not None:
            if rec.kind is Membership.TEMPORARY and req.master is None:
                # the device lost its home; this network becomes the new one
                rec = replace(rec, kind=Membership.PERMANENT, master=agg.addr)
                agg = replace(agg, members=_with(agg.members, dev, rec))
            return _bump(agg, "duplicate_registrations"), [_respond(agg, dev, req.msg_id, rec.kind is Membership.TEMPORARY)]
        slot = _free_slot(agg)
        if slot is None:
            return _bump(agg, "rejected_full"), [RegisterReject(src=agg.addr, dst=dev, reason="no free slot", reply_to=req.msg_id)]
        rec = MembershipRecord(dev, Membership.PERMANENT, agg.addr, slot, now)
        return replace(agg, members=_with(agg.members, dev, rec)), [_respond(agg, dev, req.msg_id)]

    if rec is not None:
        return _bump(agg, "duplicate_registrations"), [_respond(agg, dev, req.msg_id, rec.kind is Membership.TEMPORARY)]
    if dev not in agg.pending_verifications and _free_slot(agg) is None:
        return _bump(agg, "rejected_full"), [RegisterReject(src=agg.addr, dst=dev, reason="no free slot", reply_to=req.msg_id)]
    pending = PendingRegistration(req.msg_id, req.master, now)
    agg = replace(agg, pending_verifications=_with(agg.pending_verifications, dev, pending))
    return agg, [VerifyDeviceRequest(src=agg.addr, dst=req.master, device=dev, reply_to=req.msg_id)]


def _window_range(agg: AggregatorState, s: MeterSample) -> range:
    w = agg.config.window
    return range(s.window_start // w, (s.window_end - 1) // w + 1)


def _account(agg: AggregatorState, samples: list[MeterSample]) -> AggregatorState:
    """Add accepted direct-report samples to the per-window reported sums."""
    if not samples:
        return agg
    reported = dict(agg.reported)
    devices = dict(agg.window_devices)
    w = agg.config.window
    for s in samples:
        for k in _window_range(agg, s):
            reported[k] = reported.get(k, 0.0) + s.overlap(k * w, (k + 1) * w)
            devices[k] = devices.get(k, frozenset()) | {s.device}
    return replace(agg, reported=reported, window_devices=devices)


def _bill_home(agg: AggregatorState, dev: DeviceId, samples: tuple[MeterSample, ...]) -> tuple[AggregatorState, int]:
    """Ledger and bill samples not seen before; returns the duplicate count."""
    seen = agg.seen.get(dev, frozenset())
    new = [s for s in samples if s.seq not in seen]
    dups = len(samples) - len(new)
    if new:
        agg = replace(
            agg,
            batch=agg.batch + tuple(new),
            seen=_with(agg.seen, dev, seen | {s.seq for s in new}),
            billing=_with(agg.billing, dev, agg.billing.get(dev, 0.0) + sum(s.energy for s in new)),
            billing_records=_with(agg.billing_records, dev, agg.billing_records.get(dev, ()) + tuple(new)),
        )
    return agg, dups


def _well_formed(report: Report) -> bool:
    samples = report.samples
    if not samples or any(s.device != report.device for s in samples):
        return False
    return all(b.seq > a.seq and b.window_start >= a.window_end for a, b in zip(samples, samples[1:]))


def on_report(agg: AggregatorState, report: Report, now: SimTime) -> tuple[AggregatorState, list[Message]]:
    dev = report.device
    rec = agg.members.get(dev)
    if rec is None:
        return _bump(agg, "nacks"), [Nack(src=agg.addr, dst=dev, reply_to=report.msg_id)]
    if not _well_formed(report):
        return _bump(agg, "rejected_reports"), []

    through = max(s.seq for s in report.samples)
    prev_acked = agg.acked.get(dev, -1)
    agg = replace(
        agg,
        members=_with(agg.members, dev, replace(rec, active=True)) if not rec.active else agg.members,
        last_seen=_with(agg.last_seen, dev, now),
        acked=_with(agg.acked, dev, max(prev_acked, through)),
    )
    msgs: list[Message] = []
    if rec.kind is Membership.PERMANENT:
        seen = agg.seen.get(dev, frozenset())
        fresh = [s for s in report.samples if s.seq not in seen]
        agg, dups = _bill_home(agg, dev, report.samples)
    else:
        fresh = [s for s in report.samples if s.seq > prev_acked]
        dups = len(report.samples) - len(fresh)
        _, queued = agg.outbox.get(dev, (rec.master, ()))
        queued = queued + tuple(fresh)
        if queued:
            agg = replace(agg, outbox=_with(agg.outbox, dev, (rec.master, queued)))
            msgs.append(ForwardConsumption(src=agg.addr, dst=rec.master, device=dev, samples=queued, reply_to=report.msg_id))
    if dups:
        agg = _bump(agg, "duplicate_samples", dups)
    agg = _account(agg, fresh)
    msgs.insert(0, Ack(src=agg.addr, dst=dev, through_seq=through, reply_to=report.msg_id))
    return agg, msgs


def on_backhaul(agg: AggregatorState, msg: Message, now: SimTime) -> tuple[AggregatorState, list[Message]]:
    if isinstance(msg, VerifyDeviceRequest):
        rec = agg.members.get(msg.device)
        known = rec is not None and rec.kind is Membership.PERMANENT
        return agg, [VerifyDeviceResponse(src=agg.addr, dst=msg.src, device=msg.device, known=known, reply_to=msg.msg_id)]

    if isinstance(msg, VerifyDeviceResponse):
        dev = msg.device
        pending = agg.pending_verifications.get(dev)
        if pending is None:
            return _bump(agg, "stray_verifications"), []
        agg = replace(agg, pending_verifications=_without(agg.pending_verifications, dev))
        if not msg.known:
            return _bump(agg, "rejected_unknown"), [RegisterReject(src=agg.addr, dst=dev, reason="unknown at master", reply_to=msg.msg_id)]
        slot = _free_slot(agg)
        if slot is None:
            return _bump(agg, "rejected_full"), [RegisterReject(src=agg.addr, dst=dev, reason="no free slot", reply_to=msg.msg_id)]
        rec = MembershipRecord(dev, Membership.TEMPORARY, pending.master, slot, now)
        agg = replace(agg, members=_with(agg.members, dev, rec), last_seen=_with(agg.last_seen, dev, now))
        return agg, [_respond(agg, dev, msg.msg_id, temporary=True)]

    if isinstance(msg, ForwardConsumption):
        dev = msg.device
        ack = ForwardAck(src=agg.addr, dst=msg.src, device=dev, through_seq=max(s.seq for s in msg.samples), reply_to=msg.msg_id)
        rec = agg.members.get(dev)
        if rec is None or rec.kind is not Membership.PERMANENT:
            return _bump(agg, "orphan_forwards"), [ack]
        agg, dups = _bill_home(agg, dev, msg.samples)
        if dups:
            agg = _bump(agg, "duplicate_samples", dups)
        return agg, [ack]

    if isinstance(msg, ForwardAck):
        entry = agg.outbox.get(msg.device)
        if entry is None:
            return agg, []
        master, queued = entry
        rest = tuple(s for s in queued if s.seq > msg.through_seq)
        outbox = _with(agg.outbox, msg.device, (master, rest)) if rest else _without(agg.outbox, msg.device)
        return replace(agg, outbox=outbox), []

    if isinstance(msg, RemoveMembership):
        if msg.device not in agg.members:
            return agg, []
        return replace(
            agg,
            members=_without(agg.members, msg.device),
            pending_verifications=_without(agg.pending_verifications, msg.device),
        ), []

    return _bump(agg, "unknown_messages"), []


def on_device_departed(agg: AggregatorState, device: DeviceId, now: SimTime) -> AggregatorState:
    """A device left this network: temporary membership ends at once, home membership stays."""
    rec = agg.members.get(device)
    agg = replace(agg, pending_verifications=_without(agg.pending_verifications, device))
    if rec is not None and rec.kind is Membership.TEMPORARY:
        agg = replace(agg, members=_without(agg.members, device))
    return agg


def expire_temporary(agg: AggregatorState, now: SimTime) -> AggregatorState:
    """Fallback discard of temporary members that stopped reporting.

    Only members that have reported at least once are considered: the
    membership grant may still be travelling to the device.
    """
    stale = [
        d
        for d, rec in agg.members.items()
        if rec.kind is Membership.TEMPORARY and rec.active and now - agg.last_seen[d] > agg.config.temp_timeout
    ]
    if not stale:
        return agg
    members = {d: r for d, r in agg.members.items() if d not in stale}
    return _bump(replace(agg, members=members), "expired_temporary", len(stale))


def pending_forwards(agg: AggregatorState) -> list[Message]:
    """Re-send every unacknowledged forward queue to its home aggregator."""
    return [
        ForwardConsumption(src=agg.addr, dst=master, device=dev, samples=queued)
        for dev, (master, queued) in sorted(agg.outbox.items())
    ]


def accounted_devices(agg: AggregatorState, window_index: int) -> frozenset:
    active = {d for d, r in agg.members.items() if r.active}
    return frozenset(active) | agg.window_devices.get(window_index, frozenset())


def measure_ground_truth(agg: AggregatorState, window: tuple[SimTime, SimTime], electrical: ElectricalModel) -> float:
    """Network-level reading: accounted devices' true draw plus line losses plus sensor error."""
    t0, t1 = window
    if t1 <= t0:
        raise ValueError(f"malformed window {window}")
    devices = accounted_devices(agg, t0 // agg.config.window)
    true_sum = sum(electrical.consumption(d, t0, t1) for d in sorted(devices))
    return true_sum * (1.0 + electrical.loss_fraction) + electrical.sensor_error(t0, t1)


def tolerance(config: AggregatorConfig, n_devices: int, window: tuple[SimTime, SimTime]) -> float:
    per_window = config.sensor_offset_a * config.nominal_voltage * (window[1] - window[0]) / US_PER_S
    return (1.0 + config.expected_gap_fraction) * n_devices * per_window + per_window + config.slack_j


def detect_anomaly(agg: AggregatorState, window: tuple[SimTime, SimTime], ground_truth: float) -> AnomalyVerdict:
    k = window[0] // agg.config.window
    reported = agg.reported.get(k, 0.0)
    n = len(accounted_devices(agg, k))
    g = agg.config.expected_gap_fraction
    tol = tolerance(agg.config, n, window)
    flagged = abs(ground_truth - reported * (1.0 + g)) > tol
    return AnomalyVerdict(window, reported, ground_truth, g, tol, flagged, n)


def seal_block(agg: AggregatorState, now: SimTime) -> AggregatorState:
    if not agg.batch:
        return agg
    return replace(agg, ledger=append_block(agg.ledger, agg.batch, now, agg.addr), batch=())


def close_window(
    agg: AggregatorState, window: tuple[SimTime, SimTime], electrical: ElectricalModel, now: SimTime
) -> tuple[AggregatorState, AnomalyVerdict]:
    """Measure, validate against the ground truth, then seal the pending batch."""
    gt = measure_ground_truth(agg, window, electrical)
    verdict = detect_anomaly(agg, window, gt)
    agg = replace(
        agg,
        own_meter=_with(agg.own_meter, window[0] // agg.config.window, gt),
        verdicts=agg.verdicts + (verdict,),
    )
    return seal_block(agg, now), verdict


def bill(agg: AggregatorState, device: DeviceId, period: tuple[SimTime, SimTime]) -> float:
    rec = agg.members.get(device)
    if rec is None or rec.kind is not Membership.PERMANENT:
        raise MembershipError(f"device {device} is not a home member of {agg.addr}")
    t0, t1 = period
    return sum(s.overlap(t0, t1) for s in agg.billing_records.get(device, ()))
