"""
Roaming handover
================

A device leaves its home WAN, spends time in transit and joins a foreign
WAN. The foreign aggregator asks the home aggregator to vouch for it before
granting a temporary slot, then forwards the consumption back home.
"""

from gridmeter import bundled_scenario, run_scenario

durations = []
for seed in range(1, 16):
    (hs,) = run_scenario(bundled_scenario("fig5"), seed=seed).engine.handshakes
    durations.append(hs.duration / 1e6)
print(f"handshake over 15 seeds: mean {sum(durations) / 15:.3f} s, min {min(durations):.3f} s, max {max(durations):.3f} s")

# the legs of one handshake, each a single message latency
result = run_scenario(bundled_scenario("fig5"))
(hs,) = result.engine.handshakes
for kind, latency in hs.legs:
    print(f"  {kind:22s} {latency / 1000:9.3f} ms")

# nothing is lost: the home bill matches what the device measured
for d in result.metrics.devices:
    print(f"device {d.device}: reported {d.reported_j:.4f} J, billed at {d.home_aggregator} {d.billed_j:.4f} J")
