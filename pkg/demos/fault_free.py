"""Four honest nodes, one message every other tick: everything commits.

Run: python3 demos/fault_free.py [out_dir]
"""

import sys
from fractions import Fraction

from wchain.config import ScenarioConfig
from wchain.harness import run_scenario
from wchain.oracle import format_verdicts


def main() -> None:
    cfg = ScenarioConfig(n=4, f=1, seed=7, arrival_rate=Fraction(1, 2), duration_ticks=200)
    out_dir = sys.argv[1] if len(sys.argv) > 1 else None
    result = run_scenario(cfg, out_dir)
    m = result.metrics
    print(f"injected {m.injected} messages over {m.duration_ticks} ticks")
    print(f"committed {m.committed_count}, latency p50={m.latency_p50} p95={m.latency_p95} ticks")
    print(f"nominal throughput {m.tps:.0f} tx/s at one tick per millisecond")
    print(f"every state reached all honest peers within {m.coverage_time} ticks")
    for node, ledger in sorted(result.ledgers.items()):
        local, remote = ledger.disk_usage()
        print(f"node {node}: own chain {len(ledger.chain)} states, {local} B local, {remote} B remote")
    print()
    print(format_verdicts(result.verdicts), end="")
    if out_dir:
        print(f"\nartifacts written to {out_dir}; check them with: wchain verify --trace {out_dir}/trace.wct --ledgers {out_dir}")


if __name__ == "__main__":
    main()
