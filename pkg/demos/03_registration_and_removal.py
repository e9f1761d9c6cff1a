"""
Slot admission and ownership transfer
=====================================

An aggregator with two slots and three devices: the third is rejected and
keeps retrying until a slot frees up. A second run moves a device for good
and hands its ownership to the new aggregator.
"""

from gridmeter import bundled_scenario, run_scenario

result = run_scenario(bundled_scenario("registration"))
for r in result.trace.of_kind("send"):
    if r.detail["msg"] in ("RegisterResponse", "RegisterReject"):
        print(f"{r.t / 1e6:7.3f} s  {r.detail['msg']:16s} -> {r.detail['to']}")
print("members of A1 at the end:", sorted(result.engine.aggregators["A1"].members))

result = run_scenario(bundled_scenario("removal"))
dev = result.engine.devices[1]
print(f"\nafter removal device 1 belongs to {dev.master}")
