"""Deterministic discrete-event engine for devices, aggregators and their links.

Two connectivity layers are modelled. The electrical layer decides which WAN a
device draws power from (or none, while in transit). The communication layer
delivers messages over per-WAN device links and the inter-aggregator backhaul
with sampled latencies. Events run in ``(time, insertion order)`` order and all
randomness comes from one seeded generator, so a run is a pure function of its
inputs and seed.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

from . import aggregator as agg_ops
from . import device as dev_ops
from .core import DeviceId, NetworkAddress, SimTime, US_PER_S, seconds
from .messages import (
    HANDSHAKE_KINDS,
    Message,
    RegisterRequest,
    RegisterResponse,
    RemoveMembership,
    Report,
)

BACKHAUL = "backhaul"
OPERATOR = "operator"


class SimulationError(RuntimeError):
    pass


def wan_link(wan: str) -> str:
    return f"wan:{wan}"


@dataclass(frozen=True)
class Latency:
    """Fixed latency, or uniform over ``[lo, hi]`` microseconds when ``hi > lo``."""

    lo: SimTime
    hi: SimTime

    def __post_init__(self) -> None:
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError(f"bad latency range [{self.lo}, {self.hi}]")

    @classmethod
    def fixed(cls, t: SimTime) -> "Latency":
        return cls(t, t)

    def sample(self, rng: np.random.Generator) -> SimTime:
        if self.hi == self.lo:
            return self.lo
        return int(rng.integers(self.lo, self.hi, endpoint=True))


@dataclass(frozen=True)
class LinkModel:
    device: Latency = Latency.fixed(seconds(0.01))
    backhaul: Latency = Latency.fixed(seconds(0.001))
    handshake: Optional[Latency] = None  # overrides ``device`` for registration control traffic

    def for_message(self, msg: Message, backhaul: bool) -> Latency:
        if backhaul:
            return self.backhaul
        if self.handshake is not None and msg.kind in HANDSHAKE_KINDS:
            return self.handshake
        return self.device


class EventKind(enum.Enum):
    DELIVER = "deliver"
    TICK = "tick"
    CONNECT = "connect"
    DISCONNECT = "disconnect"
    MOVE = "move"
    FAULT = "fault"
    SEAL = "seal"
    REMOVE = "remove"
    STOP = "stop"


@dataclass(frozen=True)
class Event:
    at: SimTime
    kind: EventKind
    target: Any = None
    data: Any = None


@dataclass(frozen=True)
class TraceRecord:
    t: SimTime
    node: str
    kind: str
    detail: dict

    def to_json(self) -> str:
        return json.dumps(
            {"t": self.t, "node": self.node, "kind": self.kind, "detail": self.detail},
            sort_keys=False,
            separators=(",", ":"),
            default=str,
        )


@dataclass
class Trace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_kind(self, kind: str) -> list[TraceRecord]:
        return [r for r in self.records if r.kind == kind]

    def to_ndjson(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


@dataclass(frozen=True)
class Handshake:
    device: DeviceId
    aggregator: NetworkAddress
    start: SimTime
    end: SimTime
    legs: tuple[tuple[str, SimTime], ...]  # (message kind, sampled latency) from first to last

    @property
    def duration(self) -> SimTime:
        return self.end - self.start


@dataclass
class Wan:
    id: str
    aggregator: NetworkAddress
    loss_fraction: float = 0.0
    voltage: float = 5.0
    sensor_bias_a: float = 0.0


@dataclass
class NetworkMeter:
    """The aggregator's view of its own network's electrical draw."""

    engine: "Engine"
    wan: str
    loss_fraction: float
    voltage: float
    sensor_bias_a: float

    def consumption(self, device: DeviceId, t0: SimTime, t1: SimTime) -> float:
        return self.engine.true_energy(device, t0, t1, wan=self.wan)

    def sensor_error(self, t0: SimTime, t1: SimTime) -> float:
        if self.engine.horizon is not None:
            t1 = min(t1, self.engine.horizon)
        if t1 <= t0:
            return 0.0
        return self.sensor_bias_a * self.voltage * (t1 - t0) / US_PER_S


def _node(x) -> str:
    return f"dev:{x}" if isinstance(x, int) else f"agg:{x}"


class Engine:
    """Single-threaded event loop owning all node states and the RNG."""

    def __init__(
        self,
        seed: int = 0,
        links: LinkModel | None = None,
        horizon: Optional[SimTime] = None,
        seal_grace: SimTime = seconds(0.5),
    ) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.links = links or LinkModel()
        self.horizon = horizon
        self.seal_grace = seal_grace
        self.now: SimTime = 0
        self.trace = Trace()
        self.counters: dict[str, int] = {}
        self.link_up: dict[str, bool] = {BACKHAUL: True}
        self.devices: dict[DeviceId, dev_ops.DeviceState] = {}
        self.profiles: dict[DeviceId, dev_ops.ConsumptionProfile] = {}
        self.aggregators: dict[NetworkAddress, agg_ops.AggregatorState] = {}
        self.wans: dict[str, Wan] = {}
        self.wan_of_agg: dict[NetworkAddress, str] = {}
        self.location: dict[DeviceId, Optional[str]] = {}
        self.connectivity: dict[DeviceId, list[list]] = {}  # [wan, t_on, t_off | None]
        self.handshakes: list[Handshake] = []
        self.sent: dict[int, tuple[Message, SimTime, SimTime]] = {}
        self.observers: list[Callable[["Engine", Event], None]] = []
        self._queue: list[tuple[SimTime, int, Event]] = []
        self._order = itertools.count()
        self._msg_ids = itertools.count(1)
        self._tick_gen: dict[DeviceId, int] = {}
        self._stopped = False

    # -- setup ------------------------------------------------------------------

    def add_wan(self, wan: Wan, agg: agg_ops.AggregatorState) -> None:
        if wan.id in self.wans or agg.addr in self.aggregators:
            raise SimulationError(f"duplicate WAN or aggregator address: {wan.id}/{agg.addr}")
        if agg.addr == OPERATOR:
            raise SimulationError(f"'{OPERATOR}' is reserved")
        self.wans[wan.id] = wan
        self.aggregators[agg.addr] = agg
        self.wan_of_agg[agg.addr] = wan.id
        self.link_up[wan_link(wan.id)] = True
        first = agg.config.window + self.seal_grace
        self.schedule(Event(first, EventKind.SEAL, agg.addr, 0))

    def add_device(self, state: dev_ops.DeviceState, profile: dev_ops.ConsumptionProfile, wan: Optional[str] = None, at: SimTime = 0) -> None:
        if state.id in self.devices:
            raise SimulationError(f"duplicate device id {state.id}")
        self.devices[state.id] = state
        self.profiles[state.id] = profile
        self.location[state.id] = None
        self.connectivity[state.id] = []
        self._tick_gen[state.id] = 0
        if wan is not None:
            self._check_wan(wan)
            self.schedule(Event(at, EventKind.CONNECT, state.id, wan))

    def meter(self, addr: NetworkAddress) -> NetworkMeter:
        wan = self.wans[self.wan_of_agg[addr]]
        return NetworkMeter(self, wan.id, wan.loss_fraction, wan.voltage, wan.sensor_bias_a)

    # -- bookkeeping ------------------------------------------------------------

    def _check_wan(self, wan: str) -> None:
        if wan not in self.wans:
            raise SimulationError(f"unknown WAN {wan!r}")

    def _count(self, key: str) -> None:
        self.counters[key] = self.counters.get(key, 0) + 1

    def _record(self, node: str, kind: str, **detail) -> None:
        self.trace.records.append(TraceRecord(self.now, node, kind, dict(sorted(detail.items()))))

    def true_energy(self, device: DeviceId, t0: SimTime, t1: SimTime, wan: Optional[str] = None) -> float:
        """Actual draw over ``[t0, t1)`` while attached (to ``wan``, if given), within the horizon."""
        if self.horizon is not None:
            t1 = min(t1, self.horizon)
        profile = self.profiles[device]
        total = 0.0
        for w, on, off in self.connectivity[device]:
            if wan is not None and w != wan:
                continue
            lo = max(t0, on)
            hi = t1 if off is None else min(t1, off)
            if hi > lo:
                total += profile.energy(lo, hi)
        return total

    def connected_time(self, device: DeviceId, t0: SimTime, t1: SimTime) -> SimTime:
        if self.horizon is not None:
            t1 = min(t1, self.horizon)
        total = 0
        for _, on, off in self.connectivity[device]:
            lo, hi = max(t0, on), t1 if off is None else min(t1, off)
            total += max(hi - lo, 0)
        return total

    # -- core operations ----------------------------------------------------------

    def schedule(self, event: Event) -> None:
        if event.at < self.now:
            raise SimulationError(f"cannot schedule {event.kind.value} at {event.at} < now {self.now}")
        heapq.heappush(self._queue, (event.at, next(self._order), event))

    def send(self, msg: Message) -> None:
        msg = replace(msg, msg_id=next(self._msg_ids))
        backhaul = False
        if isinstance(msg.src, int):
            wan = self.location.get(msg.src)
            if wan is None:
                return self._drop(msg, "in_transit")
            link, dest = wan_link(wan), self.wans[wan].aggregator
        elif isinstance(msg.dst, int):
            wan = self.wan_of_agg[msg.src]
            if self.location.get(msg.dst) != wan:
                return self._drop(msg, "unreachable")
            link, dest = wan_link(wan), msg.dst
        else:
            if msg.dst not in self.aggregators:
                return self._drop(msg, "unknown_destination")
            link, dest, backhaul = BACKHAUL, msg.dst, True
        if not self.link_up[link]:
            return self._drop(msg, "partition")
        latency = self.links.for_message(msg, backhaul).sample(self.rng)
        self.sent[msg.msg_id] = (msg, self.now, latency)
        self._record(_node(msg.src), "send", id=msg.msg_id, msg=msg.kind, to=_node(dest), latency=latency,
                     reply_to=msg.reply_to, **msg.summary())
        self.schedule(Event(self.now + latency, EventKind.DELIVER, dest, (msg, link)))

    def _drop(self, msg: Message, reason: str) -> None:
        self._count(f"drop_{reason}")
        self._record(_node(msg.src), "drop", id=msg.msg_id, msg=msg.kind, reason=reason)

    def _send_all(self, msgs) -> None:
        for m in msgs:
            self.send(m)

    def move_device(self, device: DeviceId, to_wan: str, transit: SimTime) -> None:
        self._check_wan(to_wan)
        if device not in self.devices or self.location.get(device) is None:
            raise SimulationError(f"device {device} is not attached to any WAN")
        if transit < 0:
            raise SimulationError("negative transit duration")
        self.schedule(Event(self.now, EventKind.DISCONNECT, device))
        self.schedule(Event(self.now + transit, EventKind.CONNECT, device, to_wan))

    def run_until(self, t_end: SimTime) -> Trace:
        if t_end < self.now:
            raise SimulationError(f"t_end {t_end} is before now {self.now}")
        while self._queue and self._queue[0][0] <= t_end:
            at, _, event = heapq.heappop(self._queue)
            self.now = at
            self._dispatch(event)
            for observer in self.observers:
                observer(self, event)
        self.now = t_end
        return self.trace

    def finalize(self) -> None:
        """Seal whatever is still pending in every aggregator batch."""
        for addr in sorted(self.aggregators):
            self._seal(addr)

    # -- event handlers -------------------------------------------------------------

    def _dispatch(self, event: Event) -> None:
        handler = getattr(self, f"_on_{event.kind.value}")
        handler(event)

    def _schedule_tick(self, dev: DeviceId) -> None:
        state = self.devices[dev]
        at = state.last_sample_at + state.t_measure if state.metering else self.now + state.t_measure
        self.schedule(Event(max(at, self.now), EventKind.TICK, dev, self._tick_gen[dev]))

    def _apply_device(self, dev: DeviceId, new_state: dev_ops.DeviceState) -> None:
        old = self.devices[dev]
        for s in new_state.buffer[len(new_state.buffer) - (new_state.next_seq - old.next_seq):] if new_state.next_seq > old.next_seq else ():
            self._record(_node(dev), "sample", seq=s.seq, start=s.window_start, end=s.window_end, energy=s.energy)
        if new_state.overflow_dropped > old.overflow_dropped:
            self.counters["buffer_overflow"] = self.counters.get("buffer_overflow", 0) + new_state.overflow_dropped - old.overflow_dropped
        if new_state.phase is not old.phase:
            self._record(_node(dev), "phase", phase=new_state.phase.value, aggregator=new_state.current_aggregator, master=new_state.master)
        self.devices[dev] = new_state

    def _due_tick(self, dev: DeviceId) -> None:
        state = self.devices[dev]
        if state.connected and state.metering and self.now - state.last_sample_at >= state.t_measure:
            new_state, msgs = dev_ops.on_tick(state, self.profiles[dev], self.now)
            self._apply_device(dev, new_state)
            self._send_all(msgs)

    def _on_tick(self, event: Event) -> None:
        dev = event.target
        if event.data != self._tick_gen[dev]:
            return
        state = self.devices[dev]
        new_state, msgs = dev_ops.on_tick(state, self.profiles[dev], self.now)
        self._apply_device(dev, new_state)
        self._send_all(msgs)
        if new_state.connected:
            self._schedule_tick(dev)

    def _on_connect(self, event: Event) -> None:
        dev, wan = event.target, event.data
        if self.location[dev] is not None:
            raise SimulationError(f"device {dev} connected twice")
        self.location[dev] = wan
        self.connectivity[dev].append([wan, self.now, None])
        self._record(_node(dev), "connect", wan=wan)
        state = self.devices[dev]
        if not state.metering:
            state = replace(state, connected=True, last_sample_at=self.now)
            self._apply_device(dev, state)
        else:
            new_state, msgs = dev_ops.on_connect(state, self.now)
            self._apply_device(dev, new_state)
            self._send_all(msgs)
        self._tick_gen[dev] += 1
        self._schedule_tick(dev)

    def _on_disconnect(self, event: Event) -> None:
        dev = event.target
        wan = self.location[dev]
        if wan is None:
            return
        self._due_tick(dev)
        self._apply_device(dev, dev_ops.on_disconnect(self.devices[dev], self.profiles[dev], self.now))
        self.location[dev] = None
        self.connectivity[dev][-1][2] = self.now
        self._tick_gen[dev] += 1
        self._record(_node(dev), "disconnect", wan=wan)
        addr = self.wans[wan].aggregator
        self.aggregators[addr] = agg_ops.on_device_departed(self.aggregators[addr], dev, self.now)

    def _on_move(self, event: Event) -> None:
        to_wan, transit = event.data
        self._record(_node(event.target), "move", to=to_wan, transit=transit)
        self.move_device(event.target, to_wan, transit)

    def _on_fault(self, event: Event) -> None:
        link, up = event.target, event.data
        if link not in self.link_up:
            raise SimulationError(f"unknown link {link!r}")
        self.link_up[link] = up
        self._record("engine", "fault", link=link, up=up)

    def _on_remove(self, event: Event) -> None:
        dev = event.target
        state = self.devices[dev]
        master = state.master
        self._record(_node(dev), "remove", master=master)
        notice = RemoveMembership(src=OPERATOR, dst=dev, device=dev)
        new_state, msgs = dev_ops.on_message(state, notice, self.now)
        self._apply_device(dev, new_state)
        self._send_all(msgs)
        if master is not None:
            self.send(RemoveMembership(src=OPERATOR, dst=master, device=dev))

    def _on_stop(self, event: Event) -> None:
        self._stopped = True
        self._record("engine", "stop")
        for dev in sorted(self.devices):
            self._due_tick(dev)
            new_state, msgs = dev_ops.stop_metering(self.devices[dev], self.profiles[dev], self.now)
            self._apply_device(dev, new_state)
            self._send_all(msgs)
            if new_state.connected:
                self._tick_gen[dev] += 1
                self._schedule_tick(dev)

    def _commit(self, addr: NetworkAddress, state: agg_ops.AggregatorState) -> None:
        """Store a new aggregator state, tracing any block it appended."""
        if len(state.ledger) != len(self.aggregators[addr].ledger):
            tip = state.ledger.tip
            self._record(_node(addr), "block", index=tip.index, hash=tip.hash.hex(), n=len(tip.payload))
        self.aggregators[addr] = state

    def _seal(self, addr: NetworkAddress) -> None:
        self._commit(addr, agg_ops.seal_block(self.aggregators[addr], self.now))

    def _on_seal(self, event: Event) -> None:
        addr, k = event.target, event.data
        state = self.aggregators[addr]
        w = state.config.window
        window = (k * w, (k + 1) * w)
        if self.horizon is None or window[0] < self.horizon:
            if self.horizon is not None:
                window = (window[0], min(window[1], self.horizon))
            state, verdict = agg_ops.close_window(state, window, self.meter(addr), self.now)
            self._record(_node(addr), "verdict", start=window[0], end=window[1], reported=verdict.reported_sum,
                         ground_truth=verdict.ground_truth, tolerance=verdict.tolerance, flagged=verdict.flagged)
            self._commit(addr, state)
        self._seal(addr)
        self.aggregators[addr] = agg_ops.expire_temporary(self.aggregators[addr], self.now)
        self._send_all(agg_ops.pending_forwards(self.aggregators[addr]))
        self.schedule(Event((k + 2) * w + self.seal_grace, EventKind.SEAL, addr, k + 1))

    def _on_deliver(self, event: Event) -> None:
        msg, link = event.data
        dest = event.target
        if not self.link_up[link]:
            return self._drop(msg, "partition")
        if isinstance(dest, int) and self.location.get(dest) != self.wan_of_agg.get(msg.src):
            return self._drop(msg, "unreachable")
        self._record(_node(dest), "deliver", id=msg.msg_id, msg=msg.kind)
        if isinstance(dest, int):
            self._deliver_to_device(dest, msg)
        else:
            self._deliver_to_aggregator(dest, msg)

    def _deliver_to_device(self, dev: DeviceId, msg: Message) -> None:
        new_state, msgs = dev_ops.on_message(self.devices[dev], msg, self.now)
        self._apply_device(dev, new_state)
        if isinstance(msg, RegisterResponse) and msg.temporary:
            self._record_handshake(dev, msg)
        self._send_all(msgs)

    def _deliver_to_aggregator(self, addr: NetworkAddress, msg: Message) -> None:
        state = self.aggregators[addr]
        if isinstance(msg, RegisterRequest):
            state, msgs = agg_ops.on_register_request(state, msg, self.now)
        elif isinstance(msg, Report):
            state, msgs = agg_ops.on_report(state, msg, self.now)
        else:
            state, msgs = agg_ops.on_backhaul(state, msg, self.now)
        self.aggregators[addr] = state
        self._send_all(msgs)

    def _record_handshake(self, dev: DeviceId, final: Message) -> None:
        legs = []
        msg_id: Optional[int] = final.msg_id
        start = self.now
        while msg_id is not None and msg_id in self.sent:
            msg, sent_at, latency = self.sent[msg_id]
            legs.append((msg.kind, latency))
            start = sent_at
            msg_id = msg.reply_to
        legs.reverse()
        hs = Handshake(dev, final.src, start, self.now, tuple(legs))
        self.handshakes.append(hs)
        self._record(_node(dev), "handshake", aggregator=final.src, start=start, duration=hs.duration,
                     legs=[f"{k}:{lat}" for k, lat in legs])
