"""Command line entry point: ``run``, ``verify-ledger`` and ``summarize``.

Exit codes: 0 success, 1 verification failure, 2 I/O or parse error.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from .core import LedgerFormatError, US_PER_S, verify_bytes
from .scenario import BUNDLED, ScenarioError, bundled_scenario, load_scenario, run_scenario

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def verify_ledger_cmd(path: str | Path, out=None) -> int:
    out = out or sys.stdout
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc.strerror}", file=out)
        return EXIT_IO
    try:
        result = verify_bytes(data)
    except LedgerFormatError as exc:
        print(f"error: {path} is not a readable ledger: {exc}", file=out)
        return EXIT_IO
    print(str(result) if result else f"{result} {result.reason}", file=out)
    return EXIT_OK if result else EXIT_INVALID


def summarize_cmd(path: str | Path, out=None) -> int:
    out = out or sys.stdout
    kinds: Counter = Counter()
    nodes: Counter = Counter()
    handshakes = []
    flagged = 0
    last_t = 0
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    kind, node, t = rec["kind"], rec["node"], rec["t"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    print(f"error: {path}:{lineno}: malformed trace record ({exc})", file=out)
                    return EXIT_IO
                kinds[kind] += 1
                nodes[node] += 1
                last_t = t
                if kind == "handshake":
                    handshakes.append(rec["detail"]["duration"] / US_PER_S)
                elif kind == "verdict" and rec["detail"].get("flagged"):
                    flagged += 1
    except OSError as exc:
        print(f"error: cannot read {path}: {exc.strerror}", file=out)
        return EXIT_IO
    print(f"records: {sum(kinds.values())}, last event at {last_t / US_PER_S:.6f} s", file=out)
    for kind, n in sorted(kinds.items()):
        print(f"  {kind}: {n}", file=out)
    print(f"nodes: {', '.join(sorted(nodes))}", file=out)
    print(f"flagged windows: {flagged}", file=out)
    if handshakes:
        print(f"handshakes: {len(handshakes)} mean {sum(handshakes) / len(handshakes):.3f} s "
              f"min {min(handshakes):.3f} s max {max(handshakes):.3f} s", file=out)
    return EXIT_OK


def run_cmd(scenario: str, out_dir: str, seed: Optional[int], out=None) -> int:
    out = out or sys.stdout
    try:
        s = bundled_scenario(scenario) if scenario in BUNDLED and not Path(scenario).exists() else load_scenario(scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_IO
    result = run_scenario(s, seed=seed)
    try:
        paths = result.write(out_dir)
    except OSError as exc:
        print(f"error: cannot write to {out_dir}: {exc.strerror}", file=out)
        return EXIT_IO
    out.write(result.metrics.summary())
    print(f"wrote {len(paths)} files to {out_dir}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridmeter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and export trace, metrics and ledgers")
    run.add_argument("scenario", help=f"scenario file, or a bundled name ({', '.join(BUNDLED)})")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    verify = sub.add_parser("verify-ledger", help="check a ledger file's hash chain")
    verify.add_argument("file")
    summarize = sub.add_parser("summarize", help="print statistics of a trace file")
    summarize.add_argument("trace")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run_cmd(args.scenario, args.out, args.seed)
    if args.command == "verify-ledger":
        return verify_ledger_cmd(args.file)
    return summarize_cmd(args.trace)


if __name__ == "__main__":
    sys.exit(main())
