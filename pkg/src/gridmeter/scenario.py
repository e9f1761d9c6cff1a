"""Scenario files, simulation driving and metrics export.

A scenario is a JSON document (``"schema": "gridmeter.scenario/1"``) that
declares the WANs, devices and their consumption profiles, link latencies,
mobility, faults, membership removals and report tampering. Durations are
given in seconds (``*_s``) or microseconds (``*_us``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from . import aggregator as agg_ops
from . import device as dev_ops
from .core import DeviceId, NetworkAddress, SimTime, US_PER_S, ledger_to_bytes, seconds, to_microjoules
from .simnet import BACKHAUL, OPERATOR, Engine, Event, EventKind, Handshake, Latency, LinkModel, Trace, Wan, wan_link

SCHEMA = "gridmeter.scenario/1"
BUNDLED = ("fig4", "fig5", "registration", "removal", "anomaly", "partition")


class ScenarioError(ValueError):
    """Invalid scenario; the message names the offending field path."""


@dataclass(frozen=True)
class WanSpec:
    id: str
    aggregator: NetworkAddress
    slot_capacity: int = 16
    loss_fraction: float = 0.0
    voltage: float = 5.0


@dataclass(frozen=True)
class DeviceSpec:
    id: DeviceId
    home_wan: str
    profile: dev_ops.ConsumptionProfile
    t_measure: SimTime = dev_ops.DEFAULT_T_MEASURE
    buffer_cap: Optional[int] = None
    connect_at: SimTime = 0


@dataclass(frozen=True)
class Mobility:
    device: DeviceId
    at: SimTime
    to_wan: str
    transit: SimTime


@dataclass(frozen=True)
class Fault:
    link: str
    at: SimTime
    up: bool


@dataclass(frozen=True)
class Removal:
    device: DeviceId
    at: SimTime


@dataclass(frozen=True)
class Injection:
    device: DeviceId
    at: SimTime
    until: SimTime
    delta_j: float


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration: SimTime
    wans: tuple[WanSpec, ...] = ()
    devices: tuple[DeviceSpec, ...] = ()
    links: LinkModel = field(default_factory=LinkModel)
    mobility: tuple[Mobility, ...] = ()
    faults: tuple[Fault, ...] = ()
    removals: tuple[Removal, ...] = ()
    anomaly_injections: tuple[Injection, ...] = ()
    sensor_offset_a: float = agg_ops.SENSOR_OFFSET_A
    sensor_noise: bool = False
    window: SimTime = seconds(1.0)
    seal_grace: SimTime = seconds(0.5)
    slack_j: float = 1e-6
    drain: SimTime = seconds(15.0)
    registration_retry: SimTime = dev_ops.DEFAULT_REGISTRATION_RETRY
    temp_timeout: SimTime = 3 * dev_ops.DEFAULT_T_MEASURE

    def __post_init__(self) -> None:
        validate(self)

    def with_loss(self, loss_fraction: float) -> "Scenario":
        return replace(self, wans=tuple(replace(w, loss_fraction=loss_fraction) for w in self.wans))


# -- parsing ----------------------------------------------------------------------


def _get(obj: dict, key: str, path: str, default: Any = ...) -> Any:
    if not isinstance(obj, dict):
        raise ScenarioError(f"{path}: expected an object")
    if key in obj:
        return obj[key]
    if default is ...:
        raise ScenarioError(f"{path}.{key}: required field missing")
    return default


def _time(obj: dict, stem: str, path: str, default: Any = ...) -> SimTime:
    """Read ``<stem>_s`` (seconds) or ``<stem>_us`` (microseconds)."""
    if f"{stem}_us" in obj:
        value = obj[f"{stem}_us"]
        if not isinstance(value, int) or isinstance(value, bool):
            raise ScenarioError(f"{path}.{stem}_us: expected an integer")
        return value
    if f"{stem}_s" in obj:
        value = obj[f"{stem}_s"]
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ScenarioError(f"{path}.{stem}_s: expected a number")
        return seconds(value)
    if default is ...:
        raise ScenarioError(f"{path}.{stem}_s: required field missing")
    return default


def _number(value: Any, path: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ScenarioError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _latency(obj: Any, path: str, default: Optional[Latency]) -> Optional[Latency]:
    if obj is None:
        return default
    if not isinstance(obj, dict):
        raise ScenarioError(f"{path}: expected an object")
    try:
        if "uniform_us" in obj or "uniform_s" in obj:
            lo, hi = obj.get("uniform_us") or [seconds(_number(x, path)) for x in obj["uniform_s"]]
            return Latency(int(lo), int(hi))
        return Latency.fixed(_time(obj, "fixed", path))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def parse_scenario(doc: dict, name: str = "scenario") -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("top level: expected an object")
    schema = doc.get("schema")
    if schema != SCHEMA:
        raise ScenarioError(f"schema: expected {SCHEMA!r}, got {schema!r}")

    wans = []
    for i, w in enumerate(_get(doc, "wans", "$", [])):
        p = f"wans[{i}]"
        wans.append(
            WanSpec(
                id=str(_get(w, "id", p)),
                aggregator=str(_get(w, "aggregator", p)),
                slot_capacity=int(_get(w, "slot_capacity", p, 16)),
                loss_fraction=_number(_get(w, "loss_fraction", p, 0.0), f"{p}.loss_fraction"),
                voltage=_number(_get(w, "voltage", p, 5.0), f"{p}.voltage"),
            )
        )

    devices = []
    for i, d in enumerate(_get(doc, "devices", "$", [])):
        p = f"devices[{i}]"
        segs = []
        for j, seg in enumerate(_get(d, "profile", p)):
            if not isinstance(seg, list) or len(seg) != 3:
                raise ScenarioError(f"{p}.profile[{j}]: expected [start_s, current_a, voltage_v]")
            segs.append((seconds(_number(seg[0], f"{p}.profile[{j}][0]")), _number(seg[1], f"{p}.profile[{j}][1]"), _number(seg[2], f"{p}.profile[{j}][2]")))
        try:
            profile = dev_ops.ConsumptionProfile(tuple(segs))
        except ValueError as exc:
            raise ScenarioError(f"{p}.profile: {exc}") from exc
        dev_id = _get(d, "id", p)
        if not isinstance(dev_id, int) or isinstance(dev_id, bool) or dev_id < 0:
            raise ScenarioError(f"{p}.id: expected a non-negative integer")
        cap = _get(d, "buffer_cap", p, None)
        devices.append(
            DeviceSpec(
                id=dev_id,
                home_wan=str(_get(d, "home_wan", p)),
                profile=profile,
                t_measure=_time(d, "t_measure", p, dev_ops.DEFAULT_T_MEASURE),
                buffer_cap=None if cap is None else int(cap),
                connect_at=_time(d, "connect_at", p, 0),
            )
        )

    links_doc = _get(doc, "links", "$", {})
    default = LinkModel()
    links = LinkModel(
        device=_latency(links_doc.get("device"), "links.device", default.device),
        backhaul=_latency(links_doc.get("backhaul"), "links.backhaul", default.backhaul),
        handshake=_latency(links_doc.get("handshake"), "links.handshake", None),
    )

    def items(key):
        return list(enumerate(_get(doc, key, "$", [])))

    mobility = tuple(
        Mobility(_get(m, "device", f"mobility[{i}]"), _time(m, "at", f"mobility[{i}]"), str(_get(m, "to_wan", f"mobility[{i}]")),
                 _time(m, "transit", f"mobility[{i}]", 0))
        for i, m in items("mobility")
    )
    faults = tuple(
        Fault(str(_get(f, "link", f"faults[{i}]")), _time(f, "at", f"faults[{i}]"), bool(_get(f, "up", f"faults[{i}]")))
        for i, f in items("faults")
    )
    removals = tuple(Removal(_get(r, "device", f"removals[{i}]"), _time(r, "at", f"removals[{i}]")) for i, r in items("removals"))
    injections = tuple(
        Injection(_get(a, "device", f"anomaly_injections[{i}]"), _time(a, "at", f"anomaly_injections[{i}]"),
                  _time(a, "until", f"anomaly_injections[{i}]"), _number(_get(a, "delta_j", f"anomaly_injections[{i}]"), f"anomaly_injections[{i}].delta_j"))
        for i, a in items("anomaly_injections")
    )

    sensor = _get(doc, "sensor", "$", {})
    anomaly = _get(doc, "anomaly", "$", {})
    seed = _get(doc, "seed", "$", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ScenarioError("seed: expected a non-negative integer")
    return Scenario(
        name=str(doc.get("name", name)),
        seed=seed,
        duration=_time(doc, "duration", "$"),
        wans=tuple(wans),
        devices=tuple(devices),
        links=links,
        mobility=mobility,
        faults=faults,
        removals=removals,
        anomaly_injections=injections,
        sensor_offset_a=_number(sensor.get("offset_a", agg_ops.SENSOR_OFFSET_A), "sensor.offset_a"),
        sensor_noise=bool(sensor.get("noise", False)),
        window=_time(anomaly, "window", "anomaly", seconds(1.0)),
        seal_grace=_time(anomaly, "grace", "anomaly", seconds(0.5)),
        slack_j=_number(anomaly.get("slack_j", 1e-6), "anomaly.slack_j"),
        drain=_time(doc, "drain", "$", seconds(15.0)),
        registration_retry=_time(doc, "registration_retry", "$", dev_ops.DEFAULT_REGISTRATION_RETRY),
        temp_timeout=_time(doc, "temp_timeout", "$", 3 * dev_ops.DEFAULT_T_MEASURE),
    )


def validate(s: Scenario) -> None:
    if s.duration < 0:
        raise ScenarioError(f"duration: must be non-negative, got {s.duration}")
    if s.drain < 0:
        raise ScenarioError("drain: must be non-negative")
    if s.window <= 0:
        raise ScenarioError("anomaly.window: must be positive")
    if s.sensor_offset_a < 0:
        raise ScenarioError("sensor.offset_a: must be non-negative")
    wan_ids = [w.id for w in s.wans]
    addrs = [w.aggregator for w in s.wans]
    if len(set(wan_ids)) != len(wan_ids):
        raise ScenarioError("wans: duplicate WAN id")
    if len(set(addrs)) != len(addrs) or OPERATOR in addrs:
        raise ScenarioError("wans: aggregator addresses must be unique and not 'operator'")
    for i, w in enumerate(s.wans):
        if w.slot_capacity < 0 or w.loss_fraction < 0 or w.voltage < 0:
            raise ScenarioError(f"wans[{i}]: slot_capacity, loss_fraction and voltage must be non-negative")
    dev_ids = [d.id for d in s.devices]
    if len(set(dev_ids)) != len(dev_ids):
        raise ScenarioError("devices: duplicate device id")
    devs = {d.id: d for d in s.devices}
    for i, d in enumerate(s.devices):
        if d.home_wan not in wan_ids:
            raise ScenarioError(f"devices[{i}].home_wan: unknown WAN {d.home_wan!r}")
        if d.t_measure <= 0:
            raise ScenarioError(f"devices[{i}].t_measure: must be positive")
        if not 0 <= d.connect_at <= s.duration:
            raise ScenarioError(f"devices[{i}].connect_at: outside [0, duration]")
        if d.buffer_cap is not None and d.buffer_cap < 1:
            raise ScenarioError(f"devices[{i}].buffer_cap: must be at least 1")

    def check_device(path, dev):
        if dev not in devs:
            raise ScenarioError(f"{path}.device: unknown device {dev!r}")

    free_at: dict[DeviceId, SimTime] = {d.id: d.connect_at for d in s.devices}
    for i, m in sorted(enumerate(s.mobility), key=lambda x: (x[1].at, x[0])):
        p = f"mobility[{i}]"
        check_device(p, m.device)
        if m.to_wan not in wan_ids:
            raise ScenarioError(f"{p}.to_wan: unknown WAN {m.to_wan!r}")
        if m.transit < 0:
            raise ScenarioError(f"{p}.transit: must be non-negative")
        if m.at < free_at[m.device]:
            raise ScenarioError(f"{p}.at: device is not attached to a WAN at that time")
        if m.at + m.transit > s.duration:
            raise ScenarioError(f"{p}: arrival after the end of the run")
        free_at[m.device] = m.at + m.transit
    links = {BACKHAUL} | {wan_link(w) for w in wan_ids}
    for i, f in enumerate(s.faults):
        if f.link not in links:
            raise ScenarioError(f"faults[{i}].link: unknown link {f.link!r} (expected one of {sorted(links)})")
        if not 0 <= f.at <= s.duration:
            raise ScenarioError(f"faults[{i}].at: outside [0, duration]")
    for i, r in enumerate(s.removals):
        check_device(f"removals[{i}]", r.device)
        if not 0 <= r.at <= s.duration:
            raise ScenarioError(f"removals[{i}].at: outside [0, duration]")
    for i, a in enumerate(s.anomaly_injections):
        check_device(f"anomaly_injections[{i}]", a.device)
        if not 0 <= a.at < a.until <= s.duration:
            raise ScenarioError(f"anomaly_injections[{i}]: need 0 <= at < until <= duration")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return parse_scenario(doc, name=path.name.split(".")[0])
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("gridmeter") / "scenarios" / f"{name}.scenario"))


def bundled_scenario(name: str) -> Scenario:
    if name not in BUNDLED:
        raise ScenarioError(f"no bundled scenario {name!r}; choose from {', '.join(BUNDLED)}")
    return load_scenario(bundled_path(name))


# -- running ----------------------------------------------------------------------


def build_engine(s: Scenario) -> Engine:
    engine = Engine(seed=s.seed, links=s.links, horizon=s.duration, seal_grace=s.seal_grace)
    biases: dict[Any, float] = {}
    if s.sensor_noise and s.sensor_offset_a > 0:
        for d in sorted(s.devices, key=lambda d: d.id):
            biases[d.id] = float(engine.rng.uniform(-s.sensor_offset_a, s.sensor_offset_a))
        for w in sorted(s.wans, key=lambda w: w.id):
            biases[w.id] = float(engine.rng.uniform(-s.sensor_offset_a, s.sensor_offset_a))
    for w in s.wans:
        config = agg_ops.AggregatorConfig(
            window=s.window,
            expected_gap_fraction=w.loss_fraction,
            sensor_offset_a=s.sensor_offset_a,
            nominal_voltage=w.voltage,
            slack_j=s.slack_j,
            temp_timeout=s.temp_timeout,
        )
        engine.add_wan(
            Wan(w.id, w.aggregator, w.loss_fraction, w.voltage, biases.get(w.id, 0.0)),
            agg_ops.new_aggregator(w.aggregator, w.slot_capacity, config),
        )
    for d in s.devices:
        tamper = tuple(dev_ops.Tamper(a.at, a.until, a.delta_j) for a in s.anomaly_injections if a.device == d.id)
        state = dev_ops.DeviceState(
            id=d.id,
            t_measure=d.t_measure,
            sensor_bias_a=biases.get(d.id, 0.0),
            tamper=tamper,
            buffer_cap=d.buffer_cap,
            registration_retry=s.registration_retry,
        )
        engine.add_device(state, d.profile, wan=d.home_wan, at=d.connect_at)
    for m in s.mobility:
        engine.schedule(Event(m.at, EventKind.MOVE, m.device, (m.to_wan, m.transit)))
    for f in s.faults:
        engine.schedule(Event(f.at, EventKind.FAULT, f.link, f.up))
    for r in s.removals:
        engine.schedule(Event(r.at, EventKind.REMOVE, r.device))
    engine.schedule(Event(s.duration, EventKind.STOP))
    return engine


@dataclass(frozen=True)
class WindowMetric:
    aggregator: NetworkAddress
    start: SimTime
    end: SimTime
    reported_j: float
    ground_truth_j: float
    gap_pct: Optional[float]
    expected_gap_pct: float
    tolerance_j: float
    flagged: bool
    n_devices: int


@dataclass(frozen=True)
class DeviceMetric:
    device: DeviceId
    home_aggregator: Optional[NetworkAddress]
    samples: int
    reported_j: float
    true_j: float
    billed_j: Optional[float]
    sensor_bound_j: float


@dataclass(frozen=True)
class BillingRow:
    device: DeviceId
    period_start: SimTime
    period_end: SimTime
    energy_uj: int
    home_aggregator: NetworkAddress


@dataclass
class MetricsReport:
    windows: list[WindowMetric] = field(default_factory=list)
    devices: list[DeviceMetric] = field(default_factory=list)
    ground_truth_totals: dict[NetworkAddress, float] = field(default_factory=dict)
    handshakes: list[Handshake] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)
    billing: list[BillingRow] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.windows and not self.handshakes and not self.billing

    def gap_percentages(self, aggregator: Optional[NetworkAddress] = None) -> list[float]:
        return [w.gap_pct for w in self.windows if w.gap_pct is not None and aggregator in (None, w.aggregator)]

    # CSV column order is fixed; golden-file tests depend on it.
    WINDOW_COLUMNS = ("aggregator", "window_start_us", "window_end_us", "reported_j", "ground_truth_j", "gap_pct",
                      "expected_gap_pct", "tolerance_j", "flagged", "n_devices")
    DEVICE_COLUMNS = ("device_id", "home_aggregator", "samples", "reported_j", "true_j", "billed_j", "sensor_bound_j")
    BILLING_COLUMNS = ("device_id", "period_start", "period_end", "energy_microjoule", "home_aggregator")
    HANDSHAKE_COLUMNS = ("device_id", "aggregator", "start_us", "end_us", "duration_us", "legs")

    def windows_csv(self) -> str:
        return _csv(self.WINDOW_COLUMNS, [
            (w.aggregator, w.start, w.end, repr(w.reported_j), repr(w.ground_truth_j),
             "" if w.gap_pct is None else repr(w.gap_pct), repr(w.expected_gap_pct), repr(w.tolerance_j),
             int(w.flagged), w.n_devices)
            for w in self.windows
        ])

    def devices_csv(self) -> str:
        return _csv(self.DEVICE_COLUMNS, [
            (d.device, d.home_aggregator or "", d.samples, repr(d.reported_j), repr(d.true_j),
             "" if d.billed_j is None else repr(d.billed_j), repr(d.sensor_bound_j))
            for d in self.devices
        ])

    def billing_csv(self) -> str:
        return _csv(self.BILLING_COLUMNS, [(b.device, b.period_start, b.period_end, b.energy_uj, b.home_aggregator) for b in self.billing])

    def handshakes_csv(self) -> str:
        return _csv(self.HANDSHAKE_COLUMNS, [
            (h.device, h.aggregator, h.start, h.end, h.duration, ";".join(f"{k}:{lat}" for k, lat in h.legs))
            for h in self.handshakes
        ])

    def counters_csv(self) -> str:
        return _csv(("name", "value"), sorted(self.counters.items()))

    def summary(self) -> str:
        lines = [f"windows evaluated: {len(self.windows)}  flagged: {sum(w.flagged for w in self.windows)}"]
        for addr in sorted(self.ground_truth_totals):
            gaps = self.gap_percentages(addr)
            band = f"gap% min {min(gaps):.3f} max {max(gaps):.3f}" if gaps else "gap% n/a"
            lines.append(f"aggregator {addr}: ground truth {self.ground_truth_totals[addr]:.6f} J, {band}")
        for d in self.devices:
            billed = "n/a" if d.billed_j is None else f"{d.billed_j:.6f} J"
            lines.append(f"device {d.device} (home {d.home_aggregator}): samples {d.samples}, reported {d.reported_j:.6f} J, "
                         f"true {d.true_j:.6f} J, billed {billed}")
        if self.handshakes:
            durations = [h.duration / US_PER_S for h in self.handshakes]
            lines.append(f"handshakes: {len(durations)}, mean {sum(durations) / len(durations):.3f} s, "
                         f"min {min(durations):.3f} s, max {max(durations):.3f} s")
        for name, value in sorted(self.counters.items()):
            lines.append(f"counter {name}: {value}")
        return "\n".join(lines) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def collect_metrics(engine: Engine, s: Scenario) -> MetricsReport:
    report = MetricsReport()
    for addr in sorted(engine.aggregators):
        agg = engine.aggregators[addr]
        for v in agg.verdicts:
            report.windows.append(WindowMetric(addr, v.window[0], v.window[1], v.reported_sum, v.ground_truth, v.gap_pct,
                                               v.expected_gap_fraction * 100.0, v.tolerance, v.flagged, v.n_devices))
        report.ground_truth_totals[addr] = sum(v.ground_truth for v in agg.verdicts)
        for key, value in agg.counters.items():
            report.counters[f"{addr}.{key}"] = value
    report.counters.update(engine.counters)

    reported: dict[DeviceId, float] = {}
    counts: dict[DeviceId, int] = {}
    bound: dict[DeviceId, float] = {}
    for r in engine.trace.of_kind("sample"):
        dev = int(r.node.split(":", 1)[1])
        reported[dev] = reported.get(dev, 0.0) + r.detail["energy"]
        counts[dev] = counts.get(dev, 0) + 1
        bound[dev] = bound.get(dev, 0.0) + s.sensor_offset_a * engine.profiles[dev].voltage_seconds(r.detail["start"], r.detail["end"])

    period = (0, s.duration)
    for dev in sorted(engine.devices):
        home = engine.devices[dev].master
        billed = None
        if home is not None and home in engine.aggregators:
            try:
                billed = agg_ops.bill(engine.aggregators[home], dev, period)
            except agg_ops.MembershipError:
                billed = None
        if billed is not None:
            report.billing.append(BillingRow(dev, period[0], period[1], to_microjoules(billed), home))
        report.devices.append(DeviceMetric(dev, home, counts.get(dev, 0), reported.get(dev, 0.0),
                                           engine.true_energy(dev, *period), billed, bound.get(dev, 0.0)))
    report.handshakes = list(engine.handshakes)
    return report


@dataclass
class RunResult:
    trace: Trace
    metrics: MetricsReport
    ledgers: dict[NetworkAddress, bytes]
    engine: Engine

    def files(self) -> dict[str, bytes]:
        out = {
            "trace.ndjson": self.trace.to_ndjson().encode(),
            "windows.csv": self.metrics.windows_csv().encode(),
            "devices.csv": self.metrics.devices_csv().encode(),
            "billing.csv": self.metrics.billing_csv().encode(),
            "handshakes.csv": self.metrics.handshakes_csv().encode(),
            "counters.csv": self.metrics.counters_csv().encode(),
            "summary.txt": self.metrics.summary().encode(),
        }
        for addr, data in sorted(self.ledgers.items()):
            out[f"ledger_{addr}.bin"] = data
        return out

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, data in self.files().items():
            path = out_dir / name
            path.write_bytes(data)
            paths.append(path)
        return paths


def run_scenario(
    s: Scenario,
    out_dir: str | Path | None = None,
    seed: Optional[int] = None,
    observers: Sequence[Callable[[Engine, Event], None]] = (),
) -> RunResult:
    """Run ``s`` to the end of its drain period; ``observers`` see the engine after every event."""
    if seed is not None:
        s = replace(s, seed=seed)
    engine = build_engine(s)
    engine.observers.extend(observers)
    t_end = s.duration + s.drain if s.duration > 0 else 0
    trace = engine.run_until(t_end)
    engine.finalize()
    ledgers = {addr: ledger_to_bytes(agg.ledger) for addr, agg in sorted(engine.aggregators.items())}
    result = RunResult(trace, collect_metrics(engine, s), ledgers, engine)
    if out_dir is not None:
        result.write(out_dir)
    return result
