"""Scenario runner, metrics and the ``wchain`` command line.

``wchain run --config <file> --out <dir> [--repeat k] [--seed s] [--jobs j]``
``wchain verify --trace <file> --ledgers <dir>``
``wchain metrics --trace <file>``

Exit codes: 0 ok, 1 property violation, 2 config error, 3 I/O or input error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence

from .config import ConfigInvalid, ConstraintViolation, ParseError, ScenarioConfig, parse_config, parse_text
from .ledger import CorruptFile, IoFailure, Ledger
from .oracle import Verdict, check_all, format_verdicts, load_ledgers
from .simnet import SimResult, run
from .trace import CLIENT_NODE, MalformedTrace, TraceEvent, format_trace, read_trace, start_config

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
OUTCOMES = ("committed", "failure", "timeout")

__all__ = [
    "ScenarioConfig", "ParseError", "ConstraintViolation", "parse_config", "parse_text",
    "MetricsReport", "compute_metrics", "ScenarioResult", "run_scenario", "run_many",
    "replay", "main",
]


# -- metrics ---------------------------------------------------------------------------

def percentile(sorted_values: Sequence[int], p: float) -> int:
    """Nearest-rank percentile of an ascending sequence; 0 when empty."""
    if not sorted_values:
        return 0
    rank = max(1, math.ceil(p / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass
class MetricsReport:
    duration_ticks: int = 0
    interval_ticks: int = 0
    committed_count: int = 0
    tps: float = 0.0
    latency_p50: int = 0
    latency_p95: int = 0
    latency_max: int = 0
    coverage_time: int = 0
    coverage_mean: float = 0.0
    local_bytes: Dict[int, int] = field(default_factory=dict)
    remote_bytes: Dict[int, int] = field(default_factory=dict)
    outcomes: Dict[str, int] = field(default_factory=lambda: {o: 0 for o in OUTCOMES})
    injected: int = 0

    def to_tsv(self) -> str:
        # ticks are reported raw; one tick maps nominally to one millisecond
        rows = [
            ("duration_ticks", self.duration_ticks),
            ("interval_ticks", self.interval_ticks),
            ("injected", self.injected),
            ("committed_count", self.committed_count),
            ("tps_nominal", f"{self.tps:.3f}"),
            ("latency_p50_ticks", self.latency_p50),
            ("latency_p95_ticks", self.latency_p95),
            ("latency_max_ticks", self.latency_max),
            ("latency_p50_ms_nominal", self.latency_p50),
            ("coverage_time_ticks", self.coverage_time),
            ("coverage_mean_ticks", f"{self.coverage_mean:.3f}"),
        ]
        rows += [(f"outcome.{k}", v) for k, v in self.outcomes.items()]
        rows += [(f"local_bytes.{k}", v) for k, v in sorted(self.local_bytes.items())]
        rows += [(f"remote_bytes.{k}", v) for k, v in sorted(self.remote_bytes.items())]
        return "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows)


def compute_metrics(events: Sequence[TraceEvent]) -> MetricsReport:
    """Everything is recomputed from trace events alone."""
    report = MetricsReport()
    if not events:
        return report
    if events[0].tag != "START":
        raise MalformedTrace("trace must begin with a START event")
    cfg = start_config(events)
    try:
        duration = int(cfg.get("duration_ticks", "0"))
        byz = {int(x) for x in cfg.get("byzantine_nodes", "").split(",") if x}
    except ValueError:
        raise MalformedTrace("bad START fields") from None
    report.duration_ticks = duration

    submitted: Dict[str, int] = {}
    first_reply: Dict[str, tuple] = {}
    coverage: Dict[int, int] = {}
    try:
        for ev in events:
            fields = dict(ev.fields)  # first value per key; replies are scanned separately
            if ev.tag == "CLIENT":
                submitted.setdefault(fields["msg"], ev.tick)
            elif ev.tag == "FINAL":
                report.local_bytes[ev.node] = int(fields["local_bytes"])
                report.remote_bytes[ev.node] = int(fields["remote_bytes"])
            elif "bid" in fields and ev.node not in byz:
                src = int(fields["from"])
                if src not in byz and src != CLIENT_NODE:
                    bid = int(fields["bid"])
                    lat = int(fields["arr"]) - int(fields["sent"])
                    if lat > coverage.get(bid, -1):
                        coverage[bid] = lat
            if "reply" in fields:
                for value in ev.all("reply"):
                    msg_id, outcome = value.split(":")[:2]
                    if outcome in OUTCOMES and msg_id not in first_reply:
                        first_reply[msg_id] = (ev.tick, outcome)
    except (KeyError, TypeError, ValueError):
        raise MalformedTrace(f"bad fields near tick {ev.tick}") from None

    report.injected = len(submitted)
    latencies = []
    last_commit = -1
    for msg_id, (tick, outcome) in first_reply.items():
        report.outcomes[outcome] += 1
        if outcome == "committed":
            last_commit = max(last_commit, tick)
            if msg_id in submitted:
                latencies.append(tick - submitted[msg_id])
    report.committed_count = report.outcomes["committed"]
    # confirmation interval: the injection window, stretched if commits lag past it
    interval = max(duration, last_commit + 1)
    report.interval_ticks = interval
    report.tps = report.committed_count / interval * 1000 if interval > 0 else 0.0
    latencies.sort()
    report.latency_p50 = percentile(latencies, 50)
    report.latency_p95 = percentile(latencies, 95)
    report.latency_max = latencies[-1] if latencies else 0
    if coverage:
        report.coverage_time = max(coverage.values())
        report.coverage_mean = sum(coverage.values()) / len(coverage)
    return report


# -- scenarios ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    config: ScenarioConfig
    events: List[TraceEvent]
    metrics: MetricsReport
    verdicts: List[Verdict]
    ledgers: Dict[int, Ledger]
    sim: Optional[SimResult] = None

    @property
    def ok(self) -> bool:
        return all(v.holds for v in self.verdicts)

    @cached_property
    def trace_text(self) -> str:
        return format_trace(self.events)

    @cached_property
    def ledger_bytes(self) -> Dict[int, bytes]:
        return {node: ledger.serialize() for node, ledger in sorted(self.ledgers.items())}

    def write(self, out_dir) -> None:
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "trace.wct"), "w", encoding="ascii") as fh:
                fh.write(self.trace_text)
            with open(os.path.join(out_dir, "metrics.tsv"), "w", encoding="ascii") as fh:
                fh.write(self.metrics.to_tsv())
            with open(os.path.join(out_dir, "verdicts.tsv"), "w", encoding="ascii") as fh:
                fh.write(format_verdicts(self.verdicts))
            for node, data in sorted(self.ledger_bytes.items()):
                with open(os.path.join(out_dir, f"node{node}.wledger"), "wb") as fh:
                    fh.write(data)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc


def run_scenario(config: ScenarioConfig, out_dir=None, keep_sim: bool = False) -> ScenarioResult:
    """Simulate, then compute metrics and verdicts from the trace events and ledgers.

    The events are the same records that ``trace.wct`` serializes, so a later
    ``replay`` of the written files reaches the same verdicts.
    """
    sim = run(config)
    events = sim.events
    ledgers = {e.id: e.ledger for e in sim.engines}
    result = ScenarioResult(
        config, events, compute_metrics(events), check_all(events, ledgers), ledgers,
        sim if keep_sim else None,
    )
    if out_dir is not None:
        result.write(out_dir)
    return result


def run_many(config: ScenarioConfig, repeat: int = 1, jobs: int = 1, out_dir=None) -> List[ScenarioResult]:
    """``repeat`` runs with seeds ``seed, seed+1, ...``; threads never share an engine."""
    configs = [config.with_seed(config.seed + k) for k in range(repeat)]
    dirs: List[Optional[str]] = [None] * repeat
    if out_dir is not None:
        dirs = [out_dir] if repeat == 1 else [os.path.join(out_dir, f"run{k:03d}") for k in range(repeat)]
    if jobs <= 1:
        return [run_scenario(c, d) for c, d in zip(configs, dirs)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_scenario, configs, dirs))


def replay(trace_path, ledgers_dir=None) -> List[Verdict]:
    """Re-run the oracle over written artifacts, no simulation."""
    events = read_trace(trace_path)
    ledgers = None
    if ledgers_dir is not None:
        n = int(start_config(events)["n"])
        ledgers = load_ledgers(ledgers_dir, n)
    return check_all(events, ledgers)


# -- command line ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wchain", description="Parallel-chain weak consensus simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="simulate a scenario and check it")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--repeat", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--jobs", type=int, default=1, help="threads for --repeat")
    p_verify = sub.add_parser("verify", help="re-check a written trace")
    p_verify.add_argument("--trace", required=True)
    p_verify.add_argument("--ledgers", default=None)
    p_metrics = sub.add_parser("metrics", help="recompute metrics from a trace")
    p_metrics.add_argument("--trace", required=True)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "run":
            overrides = {"seed": args.seed} if args.seed is not None else None
            config = parse_config(args.config, overrides)
            if args.repeat < 1:
                raise ConstraintViolation("repeat", "must be at least 1")
            results = run_many(config, args.repeat, args.jobs, args.out)
            for k, res in enumerate(results):
                status = "ok" if res.ok else "VIOLATION"
                print(f"run {k} seed={res.config.seed} committed={res.metrics.committed_count}"
                      f"/{res.metrics.injected} {status}")
            return EXIT_OK if all(r.ok for r in results) else EXIT_VIOLATION
        if args.command == "verify":
            verdicts = replay(args.trace, args.ledgers)
            sys.stdout.write(format_verdicts(verdicts))
            return EXIT_OK if all(v.holds for v in verdicts) else EXIT_VIOLATION
        if args.command == "metrics":
            sys.stdout.write(compute_metrics(read_trace(args.trace)).to_tsv())
            return EXIT_OK
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IoFailure, CorruptFile, MalformedTrace, UnicodeDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
