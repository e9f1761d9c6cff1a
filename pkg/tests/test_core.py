import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ledgers, oracle_first_bad, samples
from gridmeter.core import (
    Invalid,
    Ledger,
    LedgerFormatError,
    MeterSample,
    Valid,
    ZERO_HASH,
    append_block,
    block_hash,
    canonical_serialize,
    compute_energy,
    genesis_block,
    ledger_from_bytes,
    ledger_to_bytes,
    make_block,
    merge_ledgers,
    split_records,
    to_microjoules,
    verify_bytes,
    verify_chain,
)

# Frozen from a byte string assembled by hand and hashed with sha256sum.
GENESIS_A1_BYTES = bytes(52) + b"\x00\x02A1"
GENESIS_A1_SHA256 = "d7cb4e85e8e1ddf4b6473b05ae624212fa960ded8e5b404844a6e015c85a4810"
# index 1, prev 0x11*32, one sample (7, 3, 100000, 200000, 50000 uJ), created 1 s, "A1"; hashed with openssl.
BLOCK1_SHA256 = "7773449c067a3b668c3bf262d2c5685daaf435875e5191e55051c779fa74588d"


def chain(n, addr="A1"):
    ledger = Ledger()
    for k in range(n):
        ledger = append_block(ledger, [MeterSample(1, k, k * 100_000, (k + 1) * 100_000, 0.05)], (k + 1) * 100_000, addr)
    return ledger


# -- compute_energy -------------------------------------------------------------


def test_energy_examples():
    assert compute_energy(0.1, 5.0, 0.1) == pytest.approx(0.05, rel=1e-12)
    assert compute_energy(0.0, 5.0, 0.1) == 0.0
    assert compute_energy(0.5e-3, 5.0, 0.1) == pytest.approx(2.5e-4, rel=1e-12)


@pytest.mark.parametrize("args", [(-0.1, 5, 1), (0.1, -5, 1), (0.1, 5, -1)])
def test_energy_rejects_negative(args):
    with pytest.raises(ValueError):
        compute_energy(*args)


finite = st.floats(0, 1e3, allow_nan=False)


@given(finite, finite, finite, st.floats(0, 10))
def test_energy_linear_in_each_argument(i, v, t, k):
    base = compute_energy(i, v, t)
    for scaled in (compute_energy(k * i, v, t), compute_energy(i, k * v, t), compute_energy(i, v, k * t)):
        assert math.isclose(scaled, k * base, rel_tol=1e-9, abs_tol=1e-12)


@given(finite, finite)
def test_energy_zero_when_any_argument_zero(a, b):
    assert compute_energy(0, a, b) == compute_energy(a, 0, b) == compute_energy(a, b, 0) == 0


def test_microjoule_conversion():
    assert to_microjoules(0.05) == 50_000
    assert to_microjoules(2.5e-4) == 250
    with pytest.raises(ValueError):
        to_microjoules(-1.0)


def test_sample_validation():
    with pytest.raises(ValueError):
        MeterSample(1, 0, 10, 10, 0.0)
    with pytest.raises(ValueError):
        MeterSample(1, 0, 0, 10, -1e-9)


def test_sample_overlap_prorates():
    s = MeterSample(1, 0, 0, 100, 1.0)
    assert s.overlap(0, 100) == 1.0
    assert s.overlap(50, 200) == pytest.approx(0.5)
    assert s.overlap(100, 200) == 0.0


# -- canonical serialization -----------------------------------------------------


def test_genesis_layout_is_fixed():
    body = canonical_serialize(0, ZERO_HASH, [], 0, "A1")
    assert body == GENESIS_A1_BYTES
    assert genesis_block("A1").hash.hex() == GENESIS_A1_SHA256


def test_one_sample_block_hash():
    block = make_block(1, b"\x11" * 32, [MeterSample(7, 3, 100_000, 200_000, 0.05)], 1_000_000, "A1")
    assert len(block.body()) == 96
    assert block.hash.hex() == BLOCK1_SHA256


def test_serialization_is_deterministic():
    payload = [MeterSample(1, 0, 0, 100_000, 0.05), MeterSample(2, 0, 0, 100_000, 0.04)]
    assert canonical_serialize(4, b"\x01" * 32, payload, 9, "A2") == canonical_serialize(4, b"\x01" * 32, list(payload), 9, "A2")


def test_one_microjoule_difference_changes_bytes():
    a = canonical_serialize(1, ZERO_HASH, [MeterSample(1, 0, 0, 10, 0.000100)], 0, "A1")
    b = canonical_serialize(1, ZERO_HASH, [MeterSample(1, 0, 0, 10, 0.000101)], 0, "A1")
    assert a != b
    diff = [i for i in range(len(a)) if a[i] != b[i]]
    # only the last byte of the energy field differs
    assert diff == [44 + 4 * 8 + 7]


def test_prev_hash_length_checked():
    with pytest.raises(ValueError):
        canonical_serialize(0, b"\x00" * 31, [], 0, "A1")


block_fields = st.tuples(
    st.integers(0, 2**64 - 1),
    st.binary(min_size=32, max_size=32),
    st.lists(samples(), max_size=3),
    st.integers(0, 2**64 - 1),
    st.text(max_size=6),
)


@given(block_fields, block_fields)
def test_serialization_injective(x, y):
    if x != y:
        assert canonical_serialize(*x) != canonical_serialize(*y)
    else:
        assert canonical_serialize(*x) == canonical_serialize(*y)


# -- ledger ----------------------------------------------------------------------


def test_append_to_empty_creates_genesis():
    ledger = append_block(Ledger(), [MeterSample(1, 0, 0, 10, 1.0)], 5, "A1")
    assert len(ledger) == 2
    g, b = ledger.blocks
    assert g.index == 0 and g.prev_hash == ZERO_HASH and g.payload == ()
    assert b.prev_hash == g.hash and b.index == 1
    assert b.hash == block_hash(b.body())
    assert verify_chain(ledger) == Valid()


def test_empty_ledger_is_valid():
    assert verify_chain(Ledger()) == Valid()


def test_block3_energy_mutation_detected():
    ledger = chain(6)
    b3 = ledger.blocks[3]
    tampered = replace(b3, payload=(replace(b3.payload[0], energy=b3.payload[0].energy + 1e-6),))
    blocks = list(ledger.blocks)
    blocks[3] = tampered
    assert verify_chain(Ledger(tuple(blocks))) == Invalid(3)


def test_swapped_blocks_detected():
    ledger = chain(6)
    blocks = list(ledger.blocks)
    blocks[2], blocks[3] = blocks[3], blocks[2]
    assert verify_chain(Ledger(tuple(blocks))) == Invalid(2)


def test_thousand_blocks_flip_in_500():
    ledger = chain(1000)
    assert len(ledger) == 1001
    data = bytearray(ledger_to_bytes(ledger))
    records = split_records(bytes(data))
    # locate block 500's energy field: 4-byte length prefix per record
    offset = sum(4 + len(body) + 32 for body, _ in records[:500]) + 4 + 44 + 4 * 8 + 7
    data[offset] ^= 0x01
    expected = oracle_first_bad(split_records(bytes(data)))
    assert expected == 500
    assert verify_bytes(bytes(data)) == Invalid(500)
    assert verify_chain(ledger_from_bytes(bytes(data))) == Invalid(500)


def test_genesis_with_payload_rejected():
    bad = make_block(0, ZERO_HASH, [MeterSample(1, 0, 0, 10, 1.0)], 0, "A1")
    assert verify_chain(Ledger((bad,))) == Invalid(0)


def test_round_trip_bytes():
    ledger = chain(5)
    data = ledger_to_bytes(ledger)
    assert ledger_from_bytes(data) == ledger
    assert verify_bytes(data) == Valid()


@pytest.mark.parametrize("cut", [1, 3, 40])
def test_truncated_file_is_format_error(cut):
    data = ledger_to_bytes(chain(3))
    with pytest.raises(LedgerFormatError):
        verify_bytes(data[:-cut])


def test_merge_orders_by_time_then_address():
    a = append_block(append_block(Ledger(), [], 10, "A1"), [], 30, "A1")
    b = append_block(Ledger(), [], 10, "A0")
    merged = merge_ledgers([a, b])
    assert [(m.created_at, m.aggregator, m.index) for m in merged] == [(10, "A0", 1), (10, "A1", 1), (30, "A1", 2)]


@given(ledgers())
def test_built_ledgers_verify(ledger):
    assert verify_chain(ledger) == Valid()
    assert verify_bytes(ledger_to_bytes(ledger)) == Valid()


def _mutations(block):
    """Every serialized field of a block, changed by the smallest step."""
    yield replace(block, index=block.index + 1)
    yield replace(block, prev_hash=bytes([block.prev_hash[0] ^ 1]) + block.prev_hash[1:])
    yield replace(block, created_at=block.created_at + 1)
    yield replace(block, aggregator=block.aggregator + "x")
    yield replace(block, hash=bytes([block.hash[0] ^ 1]) + block.hash[1:])
    for i, s in enumerate(block.payload):
        for field, delta in (("device", 1), ("seq", 1), ("window_start", -1), ("window_end", 1), ("energy", 1e-6)):
            value = getattr(s, field) + delta
            if field == "window_start" and value < 0:
                continue
            payload = list(block.payload)
            payload[i] = replace(s, **{field: value})
            yield replace(block, payload=tuple(payload))
    if block.payload:
        yield replace(block, payload=block.payload[:-1])


@settings(max_examples=60)
@given(ledgers(min_blocks=1, max_blocks=5), st.data())
def test_any_field_mutation_detected(ledger, data):
    k = data.draw(st.integers(0, len(ledger) - 1))
    for mutated in _mutations(ledger.blocks[k]):
        blocks = list(ledger.blocks)
        blocks[k] = mutated
        verdict = verify_chain(Ledger(tuple(blocks)))
        assert isinstance(verdict, Invalid)
        assert verdict.first_bad_index <= k
