from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmeter.core import MeterSample
from gridmeter.device import (
    ConsumptionProfile,
    DeviceState,
    Phase,
    Tamper,
    begin_registration,
    on_connect,
    on_disconnect,
    on_message,
    on_tick,
    stop_metering,
)
from gridmeter.messages import Ack, Nack, RegisterReject, RegisterRequest, RegisterResponse, RemoveMembership, Report, VerifyDeviceResponse

MS = 1000
FLAT = ConsumptionProfile.constant(0.1, 5.0)


def registered(dev=1, at="A1", **kw):
    return DeviceState(dev, phase=Phase.REGISTERED, master=kw.pop("master", at), current_aggregator=at, connected=True, **kw)


def sample(seq, dev=1):
    return MeterSample(dev, seq, seq * 100 * MS, (seq + 1) * 100 * MS, 0.05)


# -- registration ----------------------------------------------------------------


def test_fresh_device_broadcasts_request():
    state, msgs = begin_registration(DeviceState(1, connected=True), 0)
    assert state.phase is Phase.REGISTERING
    assert msgs == [RegisterRequest(src=1, device=1, master=None)]
    assert msgs[0].dst is None


def test_roaming_device_names_its_master():
    state = DeviceState(1, connected=True, master="A1")
    _, msgs = begin_registration(state, 0)
    assert msgs[0].master == "A1"


def test_registration_needs_connection():
    state = DeviceState(1)
    assert begin_registration(state, 0) == (state, [])


def test_registration_noop_when_registered():
    state = registered()
    assert begin_registration(state, 0) == (state, [])


def test_connect_starts_registration():
    state, msgs = on_connect(DeviceState(1), 5)
    assert state.connected and state.last_sample_at == 5
    assert [m.kind for m in msgs] == ["RegisterRequest"]


def test_register_response_sets_master():
    state, _ = begin_registration(DeviceState(1, connected=True), 0)
    state, msgs = on_message(state, RegisterResponse(src="A1", dst=1, addr="A1"), 10)
    assert state.phase is Phase.REGISTERED
    assert state.master == "A1" and state.current_aggregator == "A1"
    assert msgs == []


def test_temporary_response_keeps_master():
    state = replace(registered(at="A2", master="A1"), phase=Phase.AWAITING_TEMP_MEMBERSHIP)
    state, _ = on_message(state, RegisterResponse(src="A2", dst=1, addr="A2", temporary=True), 10)
    assert state.master == "A1" and state.current_aggregator == "A2"


def test_response_flushes_buffer_at_once():
    state = DeviceState(1, phase=Phase.REGISTERING, connected=True, buffer=(sample(0), sample(1)), next_seq=2)
    state, msgs = on_message(state, RegisterResponse(src="A1", dst=1, addr="A1"), 10)
    assert [m.kind for m in msgs] == ["Report"]
    assert [s.seq for s in msgs[0].samples] == [0, 1]


def test_registration_retry_after_interval():
    state, _ = on_connect(DeviceState(1, registration_retry=2000 * MS), 0)
    _, msgs = on_tick(state, FLAT, 1900 * MS)
    assert not any(m.kind == "RegisterRequest" for m in msgs)
    _, msgs = on_tick(state, FLAT, 2000 * MS)
    assert any(m.kind == "RegisterRequest" for m in msgs)


def test_reject_returns_to_unregistered():
    state = DeviceState(1, phase=Phase.REGISTERING, connected=True)
    state, _ = on_message(state, RegisterReject(src="A1", dst=1), 0)
    assert state.phase is Phase.UNREGISTERED


def test_remove_membership_clears_master():
    state, _ = on_message(registered(), RemoveMembership(src="operator", dst=1, device=1), 0)
    assert state.phase is Phase.UNREGISTERED
    assert state.master is None and state.current_aggregator is None


def test_unknown_message_counted():
    state, msgs = on_message(registered(), VerifyDeviceResponse(src="A1", device=1, known=True), 0)
    assert msgs == [] and state.unknown_messages == 1


# -- measuring and reporting ------------------------------------------------------------


def test_registered_tick_reports_one_sample():
    state, msgs = on_tick(registered(), FLAT, 100 * MS)
    assert len(msgs) == 1 and isinstance(msgs[0], Report)
    (s,) = msgs[0].samples
    assert (s.seq, s.window_start, s.window_end) == (0, 0, 100 * MS)
    assert s.energy == pytest.approx(0.05, rel=1e-12)


def test_unregistered_buffers_without_sending():
    state = DeviceState(1, phase=Phase.REGISTERING, connected=True, registration_sent_at=0)
    state, msgs = on_tick(state, FLAT, 300 * MS)
    assert msgs == []
    assert [s.seq for s in state.buffer] == [0, 1, 2]


def test_disconnected_device_is_idle():
    state = replace(registered(), connected=False)
    new, msgs = on_tick(state, FLAT, 500 * MS)
    assert msgs == [] and new.buffer == () and new.next_seq == 0


def test_tick_before_interval_is_quiet():
    state, msgs = on_tick(registered(), FLAT, 99 * MS)
    assert msgs == [] and state.next_seq == 0


def test_report_carries_whole_buffer():
    state = registered(buffer=(sample(0),), next_seq=1, last_sample_at=100 * MS)
    _, msgs = on_tick(state, FLAT, 200 * MS)
    assert [s.seq for s in msgs[0].samples] == [0, 1]


def test_tick_rejects_time_travel():
    with pytest.raises(ValueError):
        on_tick(registered(last_sample_at=200), FLAT, 100)


def test_sensor_bias_shifts_current():
    state = registered(sensor_bias_a=0.5e-3)
    _, msgs = on_tick(state, FLAT, 100 * MS)
    assert msgs[0].samples[0].energy == pytest.approx(0.05 + 2.5e-4, rel=1e-12)


def test_tamper_adds_to_windows_in_range():
    state = registered(tamper=(Tamper(100 * MS, 200 * MS, 1.0),))
    state, _ = on_tick(state, FLAT, 300 * MS)
    assert [round(s.energy, 9) for s in state.buffer] == [0.05, 1.05, 0.05]


def test_buffer_cap_drops_oldest():
    state = DeviceState(1, phase=Phase.REGISTERING, connected=True, buffer_cap=2, registration_sent_at=0)
    state, _ = on_tick(state, FLAT, 500 * MS)
    assert [s.seq for s in state.buffer] == [3, 4]
    assert state.overflow_dropped == 3


# -- acks and handover -------------------------------------------------------------------


def test_ack_filters_buffer():
    state = registered(buffer=(sample(6), sample(7), sample(8)), next_seq=9)
    state, msgs = on_message(state, Ack(src="A1", dst=1, through_seq=7), 0)
    assert [s.seq for s in state.buffer] == [8]
    assert msgs == []


def test_stale_ack_keeps_newer_progress():
    state = registered(buffer=(sample(8),), next_seq=9, acked_through=7)
    state, _ = on_message(state, Ack(src="A1", dst=1, through_seq=3), 0)
    assert state.acked_through == 7 and [s.seq for s in state.buffer] == [8]


def test_nack_requests_temporary_membership():
    state = registered(at="A2", master="A1")
    state, msgs = on_message(state, Nack(src="A2", dst=1, msg_id=41), 0)
    assert state.phase is Phase.AWAITING_TEMP_MEMBERSHIP
    assert msgs == [RegisterRequest(src=1, device=1, master="A1", reply_to=41)]


def test_nack_ignored_while_awaiting():
    state = replace(registered(at="A2", master="A1"), phase=Phase.AWAITING_TEMP_MEMBERSHIP)
    assert on_message(state, Nack(src="A2", dst=1), 0) == (state, [])


def test_disconnect_closes_partial_window():
    state = registered(last_sample_at=100 * MS, next_seq=1)
    state = on_disconnect(state, FLAT, 150 * MS)
    (s,) = state.buffer
    assert (s.window_start, s.window_end) == (100 * MS, 150 * MS)
    assert s.energy == pytest.approx(0.025)
    assert not state.connected


def test_stop_metering_reports_only_new_sample():
    state = registered(last_sample_at=100 * MS, next_seq=1)
    state, msgs = stop_metering(state, FLAT, 150 * MS)
    assert len(msgs) == 1 and not state.metering
    state, msgs = stop_metering(state, FLAT, 150 * MS)
    assert msgs == []


def test_profile_energy_across_segments():
    profile = ConsumptionProfile(((0, 1.0, 5.0), (1_000_000, 2.0, 5.0)))
    assert profile.energy(500_000, 1_500_000) == pytest.approx(2.5 + 5.0)
    assert profile.voltage_seconds(0, 2_000_000) == pytest.approx(10.0)
    assert ConsumptionProfile(((1_000_000, 1.0, 5.0),)).energy(0, 1_000_000) == 0.0


def test_profile_validation():
    with pytest.raises(ValueError):
        ConsumptionProfile(((0, 1.0, 5.0), (0, 2.0, 5.0)))
    with pytest.raises(ValueError):
        ConsumptionProfile(((0, -1.0, 5.0),))


# -- properties -----------------------------------------------------------------------------

events = st.lists(
    st.one_of(
        st.tuples(st.just("tick"), st.integers(0, 400 * MS)),
        st.tuples(st.just("disconnect"), st.integers(0, 400 * MS)),
        st.tuples(st.just("connect"), st.integers(0, 400 * MS)),
        st.tuples(st.just("ack"), st.integers(0, 3)),
    ),
    max_size=40,
)


@settings(max_examples=150)
@given(events, st.floats(-0.5e-3, 0.5e-3))
def test_device_trace_invariants(evs, bias):
    """Gapless seqs, idle silence, no sample loss and energy within the sensor bound."""
    profile = ConsumptionProfile(((0, 0.2, 5.0), (700 * MS, 0.05, 5.0)))
    state = registered(sensor_bias_a=bias)
    now = 0
    generated: list[MeterSample] = []
    acked: set[int] = set()
    connected_us = 0
    last_connect = 0

    def absorb(old, new):
        generated.extend(new.buffer[len(new.buffer) - (new.next_seq - old.next_seq):] if new.next_seq > old.next_seq else ())

    for kind, arg in evs:
        if kind == "ack":
            unacked = [s.seq for s in state.buffer]
            if unacked:
                through = unacked[min(arg, len(unacked) - 1)]
                acked.update(s for s in unacked if s <= through)
                state, _ = on_message(state, Ack(src="A1", dst=1, through_seq=through), now)
            continue
        now += arg
        old = state
        if kind == "tick":
            state, _ = on_tick(state, profile, now)
            if not old.connected:
                assert state.next_seq == old.next_seq
        elif kind == "disconnect" and state.connected:
            state = on_disconnect(state, profile, now)
            connected_us += now - last_connect
        elif kind == "connect" and not state.connected:
            state, _ = on_connect(state, now)
            last_connect = now
        absorb(old, state)
        assert {s.seq for s in state.buffer} | acked == set(range(state.next_seq))
        assert [s.seq for s in state.buffer] == sorted({s.seq for s in state.buffer})

    assert [s.seq for s in generated] == list(range(state.next_seq))
    # every generated window lies inside a connected interval; sum matches the profile integral
    true = sum(profile.energy(s.window_start, s.window_end) for s in generated)
    measured = sum(s.energy for s in generated)
    bound = sum(0.5e-3 * profile.voltage_seconds(s.window_start, s.window_end) for s in generated)
    assert abs(measured - true) <= bound + 1e-12
    assert sum(s.duration for s in generated) <= connected_us + (now - last_connect if state.connected else 0)
