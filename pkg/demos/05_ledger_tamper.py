"""
Tamper-evident ledger
=====================

Each sealed window becomes a block whose hash covers the previous block.
Flipping a single byte anywhere in an exported ledger is caught, and the
verifier points at the first block that no longer checks out.
"""

from gridmeter import bundled_scenario, run_scenario, verify_bytes
from gridmeter.core import split_records

data = run_scenario(bundled_scenario("fig4")).ledgers["A1"]
records = split_records(data)
print(f"ledger A1: {len(records)} blocks, {len(data)} bytes, {verify_bytes(data)}")

for k in (1, len(records) // 2, len(records) - 1):
    edited = bytearray(data)
    offset = sum(4 + len(body) + 32 for body, _ in records[:k]) + 4 + 20
    edited[offset] ^= 0x01
    print(f"flip one bit in block {k}: {verify_bytes(bytes(edited))}")
