"""
Anomalies and network partitions
================================

Injected misreports push a window's gap beyond the sensor tolerance, so
the aggregator flags it. A partition delays reports but buffering means
every sample is still billed once the link heals.
"""

from gridmeter import bundled_scenario, run_scenario

result = run_scenario(bundled_scenario("anomaly"))
for w in result.metrics.windows:
    if w.flagged:
        print(f"flagged window {w.start / 1e6:5.1f} s: gap {w.gap_pct:6.2f} % (expected {w.expected_gap_pct:.2f} %)")

result = run_scenario(bundled_scenario("partition"))
print(f"\nmessages dropped by the partition: {result.engine.counters['drop_partition']}")
for d in result.metrics.devices:
    print(f"device {d.device}: reported {d.reported_j:.4f} J, billed {d.billed_j:.4f} J")
