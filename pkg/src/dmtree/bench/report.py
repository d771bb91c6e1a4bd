"""Aggregation of per-operation records into a report, and its CSV/JSON forms."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

from .workload import OP_NAMES

CSV_COLUMNS = ("series", "op", "count", "sum", "mean", "p50", "p90", "p99", "max", "histogram")
SERIES = ("latency", "round_trips", "retries", "write_bytes")


@dataclass
class OpRecord:
    kind: int
    key: int
    start: float
    latency: float
    round_trips: int
    retries: int
    write_bytes: int
    split: bool = False
    handover: bool = False
    cas_retries: int = 0  # failed lock CAS attempts
    detours: int = 0  # cache misses, sibling hops and restarts on the way to the leaf
    lock_bytes: int = 0  # release writes, kept apart from write_bytes

    @property
    def contended(self) -> bool:
        return bool(self.cas_retries or self.detours or self.retries)


def percentile(sorted_values: list, p: float):
    """Nearest-rank percentile of an ascending list."""
    if not sorted_values:
        return 0
    rank = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass
class SeriesSummary:
    series: str
    op: str
    count: int
    total: float
    mean: float
    p50: float
    p90: float
    p99: float
    max: float
    histogram: dict

    def row(self) -> list:
        hist = "|".join(f"{k}:{v}" for k, v in sorted(self.histogram.items()))
        return [self.series, self.op, self.count, _num(self.total), _num(self.mean),
                _num(self.p50), _num(self.p90), _num(self.p99), _num(self.max), hist]


def _num(x) -> str:
    if isinstance(x, float):
        return repr(round(x, 6))
    return str(x)


def summarize(series: str, op: str, values: list) -> SeriesSummary:
    vals = sorted(values)
    n = len(vals)
    total = sum(vals)
    if series == "latency":
        hist = Counter(int(v) for v in vals)  # 1-unit bins
    else:
        hist = Counter(vals)
    return SeriesSummary(series, op, n, total, total / n if n else 0.0,
                         percentile(vals, 50), percentile(vals, 90), percentile(vals, 99),
                         vals[-1] if vals else 0, dict(hist))


@dataclass
class MetricsReport:
    engine: str
    workload: str
    op_count: int
    sim_time: float
    throughput: float  # operations per simulated second
    cache_hit_rate: float
    handovers: int
    splits: int
    checksum_violations: int
    total_posts: int
    series: list = field(default_factory=list)

    def get(self, series: str, op: str = "all") -> SeriesSummary:
        for s in self.series:
            if s.series == series and s.op == op:
                return s
        raise KeyError((series, op))

    @property
    def latency_percentiles(self) -> dict:
        s = self.get("latency")
        return {50: s.p50, 90: s.p90, 99: s.p99}

    def histogram(self, series: str, op: str = "all") -> dict:
        return self.get(series, op).histogram

    def to_dict(self) -> dict:
        d = asdict(self)
        d["series"] = [asdict(s) for s in self.series]
        return d


def build_report(records: list, *, engine: str, workload: str, sim_time: float,
                 cache_hit_rate: float, handovers: int, checksum_violations: int,
                 total_posts: int) -> MetricsReport:
    n = len(records)
    rep = MetricsReport(
        engine=engine, workload=workload, op_count=n, sim_time=sim_time,
        throughput=n / (sim_time * 1e-6) if sim_time > 0 else 0.0,
        cache_hit_rate=cache_hit_rate, handovers=handovers,
        splits=sum(r.split for r in records), checksum_violations=checksum_violations,
        total_posts=total_posts)
    if not n:
        return rep
    groups = [("all", records)]
    for kind, name in enumerate(OP_NAMES):
        sub = [r for r in records if r.kind == kind]
        if sub:
            groups.append((name, sub))
    for name, recs in groups:
        rep.series.append(summarize("latency", name, [r.latency for r in recs]))
        rep.series.append(summarize("round_trips", name, [r.round_trips for r in recs]))
        rep.series.append(summarize("retries", name, [r.retries for r in recs]))
        rep.series.append(summarize("write_bytes", name, [r.write_bytes for r in recs]))
    # non-split inserts isolate the common write path
    plain = [r for r in records if r.kind == 0 and not r.split]
    if plain:
        rep.series.append(summarize("round_trips", "insert_nosplit", [r.round_trips for r in plain]))
        rep.series.append(summarize("write_bytes", "insert_nosplit", [r.write_bytes for r in plain]))
    for label, value in (("throughput", rep.throughput), ("cache_hit_rate", rep.cache_hit_rate),
                         ("handovers", rep.handovers)):
        rep.series.append(SeriesSummary(label, "all", n, value, value, value, value,
                                        value, value, {}))
    return rep


def report_csv(report: MetricsReport, path) -> None:
    """One header row, then one row per series. An empty run writes only
    the header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in report.series:
            w.writerow(s.row())


def report_json(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
