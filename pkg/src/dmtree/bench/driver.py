"""Closed-loop workload driver over simulated client threads.

Every client thread runs its share of the operation stream back to back
inside the simulator. Per-operation round trips, retries and written bytes
are the deltas of the thread's own fabric and tree counters, so they add up
exactly to the fabric totals.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..baseline import FGPlusTree
from ..client import Cluster
from ..fabric import MIB, Fabric, FabricConfig
from ..hocl import HOCL
from ..tree import ShermanTree, TreeConfig
from .report import MetricsReport, OpRecord, build_report
from .workload import INSERT, LOOKUP, WorkloadSpec, checksum_value, gen_ops, value_ok

ENGINES = ("sherman", "fgplus")


def make_tree(engine: str, fabric: Fabric, tree_config: TreeConfig, *,
              fg_original: bool = False, locks=None):
    if engine == "sherman":
        return ShermanTree(fabric, tree_config, locks=locks or HOCL(check=False))
    if engine == "fgplus":
        return FGPlusTree(fabric, tree_config, locks=locks, fg_original=fg_original)
    raise ValueError(f"unknown engine {engine!r}; choose from {', '.join(ENGINES)}")


@dataclass
class RunResult:
    report: MetricsReport
    records: list
    driver: "Driver"


class Driver:
    def __init__(self, spec: WorkloadSpec, engine: str = "sherman",
                 fabric_config: Optional[FabricConfig] = None,
                 tree_config: Optional[TreeConfig] = None, locks=None):
        self.spec = spec
        self.engine = engine
        fcfg = fabric_config or FabricConfig(seed=spec.seed,
                                             torn_interleave_probability=spec.interleave_prob)
        self.fabric = Fabric(spec.ms, fcfg)
        tcfg = tree_config or TreeConfig(node_size=spec.node_bytes)
        self.tree = make_tree(engine, self.fabric, tcfg, fg_original=spec.fg_original, locks=locks)
        self.cluster = Cluster(self.fabric, spec.cs, spec.threads, node_size=tcfg.node_size,
                               cache_bytes=int(spec.cache_mb * MIB), seed=spec.seed)
        self.violations = 0
        self.loaded = False

    @property
    def sim(self):
        return self.fabric.sim

    def load(self) -> None:
        spec = self.spec
        items = ((2 * r + 2, checksum_value(2 * r + 2, 0)) for r in range(spec.key_space))
        self.tree.bulkload(items, spec.fill_factor)
        self.loaded = True

    def _loaded(self, key: int) -> bool:
        return key % 2 == 0 and 2 <= key <= 2 * self.spec.key_space

    def _check(self, key: int, value) -> None:
        if value is None:
            # loaded keys are never deleted, so losing one is a torn result too
            if self._loaded(key):
                self.violations += 1
        elif not value_ok(key, value):
            self.violations += 1

    def _check_range(self, low: int, high: int, rows) -> None:
        for k, v in rows:
            self._check(k, v)
        lo = low + (low % 2)
        hi = min(high, 2 * self.spec.key_space)
        expected = max(0, (hi - lo) // 2 + 1) if lo <= hi else 0
        if sum(1 for k, _ in rows if self._loaded(k)) != expected:
            self.violations += 1

    def _client(self, thread, kinds, keys, nonce_base, out: Optional[list]):
        tree = self.tree
        sim = self.sim
        metrics = thread.metrics
        stats = thread.stats
        span = 2 * self.spec.range_size - 1
        for i in range(len(kinds)):
            kind = int(kinds[i])
            key = int(keys[i])
            t0 = sim.now
            rt0, wb0, ar0 = metrics.round_trips, metrics.bytes_written, metrics.atomic_retries
            lb0 = metrics.lock_bytes_written
            rr0, sp0, ho0 = stats.read_retries, stats.splits, stats.handovers
            dt0 = stats.cache_misses + stats.sibling_hops + stats.restarts
            if kind == INSERT:
                yield from tree.insert(thread, key, checksum_value(key, nonce_base + i))
            elif kind == LOOKUP:
                value = yield from tree.lookup(thread, key)
                self._check(key, value)
            else:
                rows = yield from tree.range_query(thread, key, key + span)
                self._check_range(key, key + span, rows)
            if out is not None:
                out.append(OpRecord(kind, key, t0, sim.now - t0,
                                    metrics.round_trips - rt0, stats.read_retries - rr0,
                                    metrics.bytes_written - wb0, stats.splits != sp0,
                                    stats.handovers != ho0, metrics.atomic_retries - ar0,
                                    stats.cache_misses + stats.sibling_hops + stats.restarts
                                    - dt0, metrics.lock_bytes_written - lb0))

    def _phase(self, ops, stream: int, record: bool) -> list:
        threads = self.cluster.threads
        n = len(threads)
        per_thread = [[] for _ in threads] if record else None
        base = (stream << 28) + 1
        for t, thread in enumerate(threads):
            self.sim.spawn(self._client(thread, ops.kinds[t::n], ops.keys[t::n],
                                        base + t * (len(ops) // n + 1),
                                        per_thread[t] if record else None),
                           name=f"client{thread.client_id}")
        self.sim.run()
        if not record:
            return []
        out = [r for recs in per_thread for r in recs]
        out.sort(key=lambda r: (r.start, r.key))
        return out

    def warm(self) -> None:
        if self.spec.warmup:
            self._phase(gen_ops(self.spec, self.spec.warmup, stream=1), stream=1, record=False)

    def measure(self) -> RunResult:
        spec = self.spec
        self.fabric.reset_metrics()
        for cs in self.cluster.servers:
            cs.cache.hits = cs.cache.misses = 0
        stats0 = self.cluster.stats()
        v0 = self.violations
        t0 = self.sim.now
        records = self._phase(gen_ops(spec), stream=0, record=True)
        elapsed = self.sim.now - t0
        hits = sum(cs.cache.hits for cs in self.cluster.servers)
        misses = sum(cs.cache.misses for cs in self.cluster.servers)
        delta = self.cluster.stats() - stats0
        report = build_report(
            records, engine=self.engine, workload=spec.workload, sim_time=elapsed,
            cache_hit_rate=hits / (hits + misses) if hits + misses else 0.0,
            handovers=delta.handovers, checksum_violations=self.violations - v0,
            total_posts=self.fabric.total_posts)
        return RunResult(report, records, self)


def run(spec: WorkloadSpec, engine: str = "sherman", **kwargs) -> RunResult:
    """Bulkload, warm up, then execute the measured operation stream."""
    driver = Driver(spec, engine, **kwargs)
    driver.load()
    driver.warm()
    return driver.measure()
