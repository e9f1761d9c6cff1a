"""Decentralized per-device energy metering: protocol state machines, a
deterministic network simulator and a hash-chained ledger."""

from .core import (
    Invalid,
    Ledger,
    LedgerBlock,
    MeterSample,
    Valid,
    append_block,
    canonical_serialize,
    compute_energy,
    ledger_from_bytes,
    ledger_to_bytes,
    verify_bytes,
    verify_chain,
)
from .scenario import Scenario, bundled_scenario, load_scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "Invalid",
    "Ledger",
    "LedgerBlock",
    "MeterSample",
    "Scenario",
    "Valid",
    "append_block",
    "bundled_scenario",
    "canonical_serialize",
    "compute_energy",
    "ledger_from_bytes",
    "ledger_to_bytes",
    "load_scenario",
    "run_scenario",
    "verify_bytes",
    "verify_chain",
]
