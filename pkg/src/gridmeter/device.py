"""Device-side protocol state machine.

Every transition takes the current :class:`DeviceState` plus one event and
returns a new state together with the messages to transmit. States are never
mutated in place, so an instance only needs its own events serialized.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .core import US_PER_S, DeviceId, MeterSample, NetworkAddress, SimTime, compute_energy, seconds
from .messages import Ack, Message, Nack, RegisterReject, RegisterRequest, RegisterResponse, RemoveMembership, Report

DEFAULT_T_MEASURE = seconds(0.1)
DEFAULT_REGISTRATION_RETRY = seconds(10.0)


class Phase(enum.Enum):
    UNREGISTERED = "Unregistered"
    REGISTERING = "Registering"
    REGISTERED = "Registered"
    AWAITING_TEMP_MEMBERSHIP = "AwaitingTempMembership"


@dataclass(frozen=True)
class ConsumptionProfile:
    """Piecewise-constant draw: ``(start, current_a, voltage_v)`` segments.

    A segment holds until the next one starts; the last one holds forever.
    Before the first segment the device draws nothing.
    """

    segments: tuple[tuple[SimTime, float, float], ...] = ()

    def __post_init__(self) -> None:
        starts = [s[0] for s in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("profile segment starts must be strictly increasing")
        for start, current, voltage in self.segments:
            if start < 0 or current < 0 or voltage < 0:
                raise ValueError(f"invalid profile segment {(start, current, voltage)}")

    @classmethod
    def constant(cls, current: float, voltage: float) -> "ConsumptionProfile":
        return cls(((0, current, voltage),))

    def _pieces(self, t0: SimTime, t1: SimTime):
        if t1 <= t0 or not self.segments:
            return
        starts = [s[0] for s in self.segments]
        i = max(bisect.bisect_right(starts, t0) - 1, 0)
        for j in range(i, len(self.segments)):
            seg_start, current, voltage = self.segments[j]
            seg_end = self.segments[j + 1][0] if j + 1 < len(self.segments) else t1
            lo, hi = max(t0, seg_start), min(t1, seg_end)
            if hi > lo:
                yield hi - lo, current, voltage
            if seg_end >= t1:
                break

    def energy(self, t0: SimTime, t1: SimTime, current_offset: float = 0.0) -> float:
        """Energy over ``[t0, t1)`` with an additive current offset (sensor bias), clamped at 0 A."""
        total = 0.0
        for dt, current, voltage in self._pieces(t0, t1):
            total += compute_energy(max(current + current_offset, 0.0), voltage, dt / US_PER_S)
        return total

    def voltage_seconds(self, t0: SimTime, t1: SimTime) -> float:
        """Integral of voltage over ``[t0, t1)``; multiplied by a current bound it bounds sensor error."""
        return sum(voltage * dt / US_PER_S for dt, _, voltage in self._pieces(t0, t1))


@dataclass(frozen=True)
class Tamper:
    """Adds ``delta_j`` to every sample whose window starts in ``[start, end)``."""

    start: SimTime
    end: SimTime
    delta_j: float


@dataclass(frozen=True)
class DeviceState:
    id: DeviceId
    phase: Phase = Phase.UNREGISTERED
    master: Optional[NetworkAddress] = None
    current_aggregator: Optional[NetworkAddress] = None
    buffer: tuple[MeterSample, ...] = ()
    next_seq: int = 0
    t_measure: SimTime = DEFAULT_T_MEASURE
    connected: bool = False
    last_sample_at: SimTime = 0
    metering: bool = True
    sensor_bias_a: float = 0.0
    tamper: tuple[Tamper, ...] = ()
    buffer_cap: Optional[int] = None
    registration_retry: SimTime = DEFAULT_REGISTRATION_RETRY
    registration_sent_at: Optional[SimTime] = None
    acked_through: int = -1
    overflow_dropped: int = 0
    unknown_messages: int = 0

    def __post_init__(self) -> None:
        if self.t_measure <= 0:
            raise ValueError("t_measure must be positive")
        if self.phase is Phase.REGISTERED and self.current_aggregator is None:
            raise ValueError("a registered device needs a current aggregator")


def _request(state: DeviceState, now: SimTime, reply_to: Optional[int] = None):
    msg = RegisterRequest(src=state.id, device=state.id, master=state.master, reply_to=reply_to)
    return replace(state, registration_sent_at=now), msg


def _report(state: DeviceState) -> Report:
    return Report(src=state.id, device=state.id, samples=state.buffer)


def _buffered(state: DeviceState, new: Sequence[MeterSample]) -> DeviceState:
    buf = state.buffer + tuple(new)
    dropped = 0
    if state.buffer_cap is not None and len(buf) > state.buffer_cap:
        dropped = len(buf) - state.buffer_cap
        buf = buf[dropped:]
    return replace(state, buffer=buf, overflow_dropped=state.overflow_dropped + dropped)


def measure(state: DeviceState, profile: ConsumptionProfile, seq: int, t0: SimTime, t1: SimTime) -> MeterSample:
    """Sample the device's own sensor over ``[t0, t1)``."""
    energy = profile.energy(t0, t1, state.sensor_bias_a)
    for tamper in state.tamper:
        if tamper.start <= t0 < tamper.end:
            energy += tamper.delta_j
    return MeterSample(state.id, seq, t0, t1, max(energy, 0.0))


def begin_registration(state: DeviceState, now: SimTime) -> tuple[DeviceState, list[Message]]:
    if state.phase is not Phase.UNREGISTERED or not state.connected:
        return state, []
    state, msg = _request(replace(state, phase=Phase.REGISTERING), now)
    return state, [msg]


def on_connect(state: DeviceState, now: SimTime) -> tuple[DeviceState, list[Message]]:
    state = replace(state, connected=True, last_sample_at=now)
    if state.phase is Phase.UNREGISTERED:
        return begin_registration(state, now)
    return state, []


def on_disconnect(state: DeviceState, profile: ConsumptionProfile, now: SimTime) -> DeviceState:
    """Close the partial measurement window and stop metering until the next connect.

    The closing sample goes to local storage; the device is already off the
    network, so nothing is sent.
    """
    if now < state.last_sample_at:
        raise ValueError("time went backwards")
    if state.connected and state.metering and now > state.last_sample_at:
        sample = measure(state, profile, state.next_seq, state.last_sample_at, now)
        state = replace(_buffered(state, [sample]), next_seq=state.next_seq + 1)
    return replace(state, connected=False, last_sample_at=now)


def stop_metering(state: DeviceState, profile: ConsumptionProfile, now: SimTime) -> tuple[DeviceState, list[Message]]:
    """End of the metered period: close the partial window, keep flushing on later ticks."""
    closed = state.connected and state.metering and now > state.last_sample_at
    if closed:
        sample = measure(state, profile, state.next_seq, state.last_sample_at, now)
        state = replace(_buffered(state, [sample]), next_seq=state.next_seq + 1)
    state = replace(state, metering=False, last_sample_at=max(now, state.last_sample_at))
    if closed and state.phase is Phase.REGISTERED:
        return state, [_report(state)]
    return state, []


def on_tick(state: DeviceState, profile: ConsumptionProfile, now: SimTime) -> tuple[DeviceState, list[Message]]:
    if now < state.last_sample_at:
        raise ValueError(f"tick at {now} precedes last sample boundary {state.last_sample_at}")
    msgs: list[Message] = []
    generated = False
    if state.connected and state.metering and now - state.last_sample_at >= state.t_measure:
        n = (now - state.last_sample_at) // state.t_measure
        t0 = state.last_sample_at
        new = [
            measure(state, profile, state.next_seq + i, t0 + i * state.t_measure, t0 + (i + 1) * state.t_measure)
            for i in range(n)
        ]
        state = replace(_buffered(state, new), next_seq=state.next_seq + n, last_sample_at=t0 + n * state.t_measure)
        generated = True

    if not state.connected:
        return state, msgs
    if state.phase is Phase.REGISTERED:
        if state.buffer and (generated or not state.metering):
            msgs.append(_report(state))
    elif state.phase is Phase.UNREGISTERED:
        if state.registration_sent_at is None or now - state.registration_sent_at >= state.registration_retry:
            state, msgs = begin_registration(state, now)
    elif now - (state.registration_sent_at or 0) >= state.registration_retry:
        state, msg = _request(state, now)
        msgs.append(msg)
    return state, msgs


def on_message(state: DeviceState, msg: Message, now: SimTime) -> tuple[DeviceState, list[Message]]:
    if isinstance(msg, RegisterResponse):
        state = replace(
            state,
            phase=Phase.REGISTERED,
            current_aggregator=msg.addr,
            master=state.master if state.master is not None else msg.addr,
            registration_sent_at=None,
        )
        # Stored data goes out as soon as the membership exists.
        if state.connected and state.buffer:
            return state, [_report(state)]
        return state, []
    if isinstance(msg, Ack):
        through = max(state.acked_through, msg.through_seq)
        return replace(state, acked_through=through, buffer=tuple(s for s in state.buffer if s.seq > through)), []
    if isinstance(msg, Nack):
        if state.phase is not Phase.REGISTERED:
            return state, []
        state, req = _request(replace(state, phase=Phase.AWAITING_TEMP_MEMBERSHIP), now, reply_to=msg.msg_id)
        return state, [req]
    if isinstance(msg, RegisterReject):
        return replace(state, phase=Phase.UNREGISTERED), []
    if isinstance(msg, RemoveMembership):
        return replace(state, phase=Phase.UNREGISTERED, master=None, current_aggregator=None, registration_sent_at=None), []
    return replace(state, unknown_messages=state.unknown_messages + 1), []
