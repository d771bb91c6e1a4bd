"""Simulated disaggregated-memory fabric.

Memory servers (MSs) expose a host region and a small on-chip region.
Clients reach them through reliable-connected queue pairs that execute
one-sided commands (read, write, CAS, masked CAS, FAA) in post order.

Timing model, all in simulated microseconds:

* a post costs one round trip: commands arrive ``round_trip_latency / 2``
  after issue, execute back to back, and the completion returns another
  half round trip later;
* reads and writes move ``transfer_time_per_byte`` per byte, copied in
  increasing address order in ``atomicity_unit`` chunks;
* host-region atomics sharing the low ``bucket_key_bits`` address bits
  serialize inside the NIC, on-chip atomics do not.

A write that lands while a read is copying the same bytes shows up in the
chunks the reader has not reached yet (with probability
``torn_interleave_probability``); otherwise the read is whole-command atomic.
"""
from __future__ import annotations

import enum
import itertools
import json
import random
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, NamedTuple, Optional

from .sim import Post, Simulator

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB
U64_MASK = (1 << 64) - 1


class FabricError(Exception):
    pass


class UnknownServer(FabricError):
    pass


class OutOfBounds(FabricError):
    pass


class Misaligned(FabricError):
    pass


class Region(enum.Enum):
    HOST = "host"
    ONCHIP = "onchip"


class GlobalAddress(NamedTuple):
    """16-bit memory server id plus 48-bit offset inside one region."""

    ms_id: int
    offset: int
    region: Region = Region.HOST

    def __add__(self, delta):  # type: ignore[override]
        if isinstance(delta, int):
            return GlobalAddress(self.ms_id, self.offset + delta, self.region)
        return NotImplemented

    def pack(self) -> int:
        """64-bit pointer form used inside tree nodes (host region only)."""
        if self.region is not Region.HOST:
            raise ValueError("only host addresses have a pointer encoding")
        return (self.ms_id << 48) | self.offset

    @classmethod
    def unpack(cls, word: int) -> Optional["GlobalAddress"]:
        if word == 0:
            return None
        return cls(word >> 48, word & ((1 << 48) - 1))

    def __repr__(self) -> str:
        tag = "" if self.region is Region.HOST else "/chip"
        return f"<{self.ms_id}:{self.offset:#x}{tag}>"


class Verb(enum.Enum):
    READ = "read"
    WRITE = "write"
    CAS = "cas"
    MASKED_CAS = "masked_cas"
    FAA = "faa"


ATOMIC_VERBS = frozenset({Verb.CAS, Verb.MASKED_CAS, Verb.FAA})


@dataclass
class Command:
    verb: Verb
    addr: GlobalAddress
    length: int = 0
    payload: bytes = b""
    compare: int = 0
    swap: int = 0
    mask: int = U64_MASK
    delta: int = 0
    signaled: bool = True
    # "lock" marks lock-word writes so they are accounted apart from data
    tag: Optional[str] = None

    @property
    def span(self) -> int:
        return 8 if self.verb in ATOMIC_VERBS else self.length


def Read(addr: GlobalAddress, length: int) -> Command:
    return Command(Verb.READ, addr, length=length)


def Write(addr: GlobalAddress, payload: bytes, tag: Optional[str] = None) -> Command:
    payload = bytes(payload)
    return Command(Verb.WRITE, addr, length=len(payload), payload=payload, tag=tag)


def Cas(addr: GlobalAddress, compare: int, swap: int) -> Command:
    return Command(Verb.CAS, addr, compare=compare, swap=swap)


def MaskedCas(addr: GlobalAddress, compare: int, swap: int, mask: int) -> Command:
    return Command(Verb.MASKED_CAS, addr, compare=compare, swap=swap, mask=mask)


def Faa(addr: GlobalAddress, delta: int, tag: Optional[str] = None) -> Command:
    return Command(Verb.FAA, addr, delta=delta, tag=tag)


@dataclass
class FabricConfig:
    """Fabric knobs. Times are simulated microseconds.

    Defaults: 2 us round trip, 12.5 GB/s transfer, 64-byte atomicity unit,
    4096 NIC atomic buckets keyed by the 12 low address bits, on-chip
    atomics three times cheaper than host atomics, no forced torn reads.
    """

    round_trip_latency: float = 2.0
    transfer_time_per_byte: float = 1 / 12500
    atomicity_unit: int = 64
    torn_interleave_probability: float = 0.0
    atomic_bucket_count: int = 4096
    bucket_key_bits: int = 12
    onchip_atomic_cost: float = 0.15
    host_atomic_cost: float = 0.45
    read_after_write_ordering: bool = True
    onchip_capacity: int = 256 * KIB
    host_capacity: int = 4 * GIB
    seed: int = 0

    def __post_init__(self):
        if self.atomicity_unit <= 0:
            raise ValueError("atomicity_unit must be positive")
        if not 0.0 <= self.torn_interleave_probability <= 1.0:
            raise ValueError("torn_interleave_probability must be within [0, 1]")
        if self.onchip_capacity < 256 * KIB:
            raise ValueError("on-chip region is at least 256 KiB")
        if self.round_trip_latency < 0 or self.transfer_time_per_byte < 0:
            raise ValueError("latencies must be non-negative")

    @classmethod
    def from_file(cls, path) -> "FabricConfig":
        """Load from JSON (``.json``) or ``key = value`` lines (``#`` comments)."""
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = {}
            for lineno, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                k, v = (s.strip() for s in line.split("=", 1))
                raw[k] = v
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "FabricConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in raw.items():
            if k not in types:
                raise ValueError(f"unknown fabric option {k!r}")
            kwargs[k] = _coerce(v, types[k])
        return cls(**kwargs)


def _coerce(value, type_name):
    if not isinstance(value, str):
        return value
    if type_name == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if type_name == "int":
        return int(value, 0)
    if type_name == "float":
        return float(value)
    return value


@dataclass
class Completion:
    ticket: int
    results: list
    sim_time: float


@dataclass
class MetricsRecord:
    round_trips: int = 0
    commands: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    lock_bytes_written: int = 0
    atomics: int = 0
    atomic_retries: int = 0
    rpcs: int = 0
    sim_time: float = 0.0

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, f.default)

    def copy(self) -> "MetricsRecord":
        return MetricsRecord(**{f.name: getattr(self, f.name) for f in fields(self)})

    def __sub__(self, other: "MetricsRecord") -> "MetricsRecord":
        return MetricsRecord(**{f.name: getattr(self, f.name) - getattr(other, f.name)
                                for f in fields(self)})


class _OpenRead:
    __slots__ = ("region", "lo", "hi", "t0", "hold_from", "hold", "buf")

    def __init__(self, region, lo, hi, t0, hold_from, hold, buf):
        self.region = region
        self.lo = lo
        self.hi = hi
        self.t0 = t0
        self.hold_from = hold_from
        self.hold = hold
        self.buf = buf


class _InflightWrite:
    __slots__ = ("region", "lo", "hi", "old", "t0", "t_end")

    def __init__(self, region, lo, hi, old, t0, t_end):
        self.region = region
        self.lo = lo
        self.hi = hi
        self.old = old
        self.t0 = t0
        self.t_end = t_end


class MemoryServer:
    def __init__(self, ms_id: int, config: FabricConfig):
        self.ms_id = ms_id
        self.host = bytearray()  # grows as chunks are handed out
        self.host_capacity = config.host_capacity
        self.onchip = bytearray(config.onchip_capacity)
        self.bucket_free = [0.0] * config.atomic_bucket_count
        self.open_reads: list[_OpenRead] = []
        self.inflight: list[_InflightWrite] = []
        self.rpc_count = 0
        self.memory_thread = None

    def capacity(self, region: Region) -> int:
        return self.host_capacity if region is Region.HOST else len(self.onchip)

    def buffer(self, region: Region) -> bytearray:
        return self.host if region is Region.HOST else self.onchip

    def ensure_host(self, end: int) -> None:
        if end > len(self.host):
            self.host.extend(bytes(end - len(self.host)))

    def load(self, region: Region, lo: int, n: int) -> bytearray:
        buf = self.buffer(region)
        out = bytearray(buf[lo:lo + n])
        if len(out) < n:
            out.extend(bytes(n - len(out)))
        return out


class QueuePair:
    """Reliable connection from one client thread to one memory server.

    The blocking helpers (:meth:`read`, :meth:`write`, ...) run the
    simulator until the command completes. Code already running inside the
    simulator yields :class:`dmtree.sim.Post` instead.
    """

    def __init__(self, fabric: "Fabric", client_id: int, ms_id: int, qp_id: int):
        self.fabric = fabric
        self.client_id = client_id
        self.ms_id = ms_id
        self.qp_id = qp_id

    def __repr__(self):
        return f"QueuePair(client={self.client_id}, ms={self.ms_id})"

    def _one(self, cmd: Command):
        return self.fabric.execute(self, [cmd])[0]

    def read(self, addr: GlobalAddress, length: int) -> bytes:
        return self._one(Read(addr, length))

    def write(self, addr: GlobalAddress, data: bytes) -> None:
        self._one(Write(addr, data))

    def cas(self, addr: GlobalAddress, compare: int, swap: int) -> int:
        return self._one(Cas(addr, compare, swap))

    def masked_cas(self, addr: GlobalAddress, compare: int, swap: int, mask: int) -> int:
        return self._one(MaskedCas(addr, compare, swap, mask))

    def faa(self, addr: GlobalAddress, delta: int) -> int:
        return self._one(Faa(addr, delta))


class _Job:
    __slots__ = ("qp", "cmds", "results", "issue", "on_done", "ticket", "reads", "hold")

    def __init__(self, qp, cmds, issue, on_done, ticket, hold):
        self.qp = qp
        self.cmds = cmds
        self.results = [None] * len(cmds)
        self.issue = issue
        self.on_done = on_done
        self.ticket = ticket
        self.reads: list = []
        self.hold = hold


class Fabric:
    def __init__(self, n_memory_servers: int, config: Optional[FabricConfig] = None,
                 sim: Optional[Simulator] = None):
        if n_memory_servers < 1:
            raise ValueError("need at least one memory server")
        if n_memory_servers > 1 << 16:
            raise ValueError("memory server ids are 16-bit")
        from .allocator import MemoryThread

        self.config = config or FabricConfig()
        self.sim = sim or Simulator()
        self.sim.fabric = self
        self.servers = [MemoryServer(i, self.config) for i in range(n_memory_servers)]
        for ms in self.servers:
            ms.memory_thread = MemoryThread(ms)
        self.rng = random.Random(self.config.seed)
        self._metrics: dict[int, MetricsRecord] = {}
        self._tickets = itertools.count(1)
        self._qp_ids = itertools.count()
        self._completions: dict[int, Completion] = {}
        self._holds: dict[int, tuple[int, float]] = {}
        self._lock = threading.RLock()
        self.total_posts = 0
        self.hooks: list[Callable[[str, Any], None]] = []

    @property
    def n_servers(self) -> int:
        return len(self.servers)

    def open_qp(self, client_id: int, ms_id: int) -> QueuePair:
        if not 0 <= ms_id < len(self.servers):
            raise UnknownServer(f"no memory server {ms_id}")
        return QueuePair(self, client_id, ms_id, next(self._qp_ids))

    def metrics(self, client_id: int) -> MetricsRecord:
        rec = self._metrics.get(client_id)
        if rec is None:
            rec = self._metrics[client_id] = MetricsRecord()
        return rec

    def all_metrics(self) -> dict[int, MetricsRecord]:
        return dict(self._metrics)

    def reset_metrics(self) -> None:
        for rec in self._metrics.values():
            rec.reset()
        self.total_posts = 0

    def hold_next_read(self, client_id: int, after_bytes: int, hold: float) -> None:
        """Test hook: stall the client's next read for ``hold`` after
        ``after_bytes`` bytes have been copied."""
        self._holds[client_id] = (after_bytes, hold)

    # -- setup path (no accounting, no timing) ------------------------------

    def peek(self, addr: GlobalAddress, length: int) -> bytes:
        ms = self._server(addr)
        self._check_bounds(ms, addr, length)
        return bytes(ms.load(addr.region, addr.offset, length))

    def poke(self, addr: GlobalAddress, data: bytes) -> None:
        ms = self._server(addr)
        self._check_bounds(ms, addr, len(data))
        if addr.region is Region.HOST:
            ms.ensure_host(addr.offset + len(data))
        ms.buffer(addr.region)[addr.offset:addr.offset + len(data)] = data

    def request_chunk(self, ms_id: int):
        """Memory-thread RPC executed synchronously (setup path)."""
        if not 0 <= ms_id < len(self.servers):
            raise UnknownServer(f"no memory server {ms_id}")
        ms = self.servers[ms_id]
        ms.rpc_count += 1
        return ms.memory_thread.grant_chunk()

    # -- blocking API ---------------------------------------------------------

    def post(self, qp: QueuePair, combine_list: list) -> int:
        """Post a combine list, run until it completes, return its ticket."""
        holder = {}

        def body():
            results = yield Post(qp, combine_list)
            holder["results"] = results

        with self._lock:
            self.sim.run_task(body(), name="post")
            ticket = self._last_ticket
        return ticket

    def poll(self, ticket: int) -> Completion:
        return self._completions.pop(ticket)

    def execute(self, qp: QueuePair, combine_list: list) -> list:
        ticket = self.post(qp, combine_list)
        return self.poll(ticket).results

    # -- simulator entry points ----------------------------------------------

    def _server(self, addr: GlobalAddress) -> MemoryServer:
        if not 0 <= addr.ms_id < len(self.servers):
            raise UnknownServer(f"no memory server {addr.ms_id}")
        return self.servers[addr.ms_id]

    def _check_bounds(self, ms: MemoryServer, addr: GlobalAddress, length: int) -> None:
        if addr.offset < 0 or length < 0 or addr.offset + length > ms.capacity(addr.region):
            raise OutOfBounds(f"{addr!r}+{length} outside {addr.region.value} region")

    def _validate(self, qp: QueuePair, cmds: list) -> None:
        if not cmds:
            raise FabricError("empty combine list")
        for cmd in cmds:
            if cmd.addr.ms_id != qp.ms_id:
                raise FabricError(
                    f"command for MS {cmd.addr.ms_id} posted on QP to MS {qp.ms_id}")
            ms = self._server(cmd.addr)
            if cmd.verb in ATOMIC_VERBS and cmd.addr.offset % 8:
                raise Misaligned(f"atomic at unaligned {cmd.addr!r}")
            self._check_bounds(ms, cmd.addr, cmd.span)

    def submit(self, qp: QueuePair, cmds: list, issue: float,
               on_done: Callable[[Completion], None],
               on_error: Callable[[BaseException], None]) -> None:
        try:
            self._validate(qp, cmds)
        except FabricError as err:
            on_error(err)
            return
        rec = self.metrics(qp.client_id)
        rec.round_trips += 1
        rec.commands += len(cmds)
        self.total_posts += 1
        for cmd in cmds:
            if cmd.verb is Verb.WRITE:
                if cmd.tag == "lock":
                    rec.lock_bytes_written += cmd.length
                else:
                    rec.bytes_written += cmd.length
            elif cmd.verb is Verb.READ:
                rec.bytes_read += cmd.length
            else:
                rec.atomics += 1
        ticket = next(self._tickets)
        self._last_ticket = ticket
        hold = None
        if self._holds and any(c.verb is Verb.READ for c in cmds):
            hold = self._holds.pop(qp.client_id, None)
        job = _Job(qp, cmds, issue, on_done, ticket, hold)
        self.sim.call_at(issue + self.config.round_trip_latency / 2, self._exec, job, 0)

    def submit_rpc(self, ms_id: int, fn, issue: float, on_done, on_error) -> None:
        half = self.config.round_trip_latency / 2

        def serve():
            try:
                if not 0 <= ms_id < len(self.servers):
                    raise UnknownServer(f"no memory server {ms_id}")
                self.servers[ms_id].rpc_count += 1
                value = fn()
            except Exception as err:  # delivered to the caller
                self.sim.call_at(self.sim.now + half, on_error, err)
                return
            self.sim.call_at(self.sim.now + half, on_done, value)

        self.sim.call_at(issue + half, serve)

    def _exec(self, job: _Job, i: int) -> None:
        cfg = self.config
        now = self.sim.now
        cmd = job.cmds[i]
        ms = self.servers[cmd.addr.ms_id]
        verb = cmd.verb
        if verb is Verb.READ:
            end = self._start_read(ms, job, i, cmd, now)
        elif verb is Verb.WRITE:
            self._store(ms, cmd.addr.region, cmd.addr.offset, cmd.payload, now)
            if cfg.read_after_write_ordering:
                end = now + cmd.length * cfg.transfer_time_per_byte
            else:
                end = now
        else:
            if cmd.addr.region is Region.HOST:
                b = (cmd.addr.offset & ((1 << cfg.bucket_key_bits) - 1)) % cfg.atomic_bucket_count
                start = max(now, ms.bucket_free[b])
                end = start + cfg.host_atomic_cost
                ms.bucket_free[b] = end
                if start > now:
                    self.sim.call_at(start, self._atomic_then, job, i, end)
                    return
            else:
                end = now + cfg.onchip_atomic_cost
            self._atomic(ms, job, i, cmd, now)
        self._continue(job, i, end)

    def _atomic_then(self, job: _Job, i: int, end: float) -> None:
        cmd = job.cmds[i]
        self._atomic(self.servers[cmd.addr.ms_id], job, i, cmd, self.sim.now)
        self._continue(job, i, end)

    def _continue(self, job: _Job, i: int, end: float) -> None:
        if i + 1 < len(job.cmds):
            self.sim.call_at(end, self._exec, job, i + 1)
        else:
            self.sim.call_at(end + self.config.round_trip_latency / 2, self._complete, job)

    def _complete(self, job: _Job) -> None:
        for i, (ms, rd) in job.reads:
            ms.open_reads.remove(rd)
            job.results[i] = bytes(rd.buf)
        rec = self.metrics(job.qp.client_id)
        rec.sim_time += self.sim.now - job.issue
        comp = Completion(job.ticket, job.results, self.sim.now)
        if job.cmds[-1].signaled:
            self._completions[job.ticket] = comp
            if len(self._completions) > 4096:
                # nobody polls completions from simulated threads; keep the map small
                self._completions.pop(next(iter(self._completions)))
        for hook in self.hooks:
            hook("complete", job)
        job.on_done(comp)

    def _start_read(self, ms: MemoryServer, job: _Job, i: int, cmd: Command, now: float) -> float:
        cfg = self.config
        lo = cmd.addr.offset
        n = cmd.length
        hold_from, hold = n, 0.0
        if job.hold is not None:
            hold_from, hold = job.hold
            job.hold = None
        rd = _OpenRead(cmd.addr.region, lo, lo + n, now, hold_from, hold,
                       ms.load(cmd.addr.region, lo, n))
        if ms.inflight:
            self._revert_inflight(ms, rd, now)
        ms.open_reads.append(rd)
        job.reads.append((i, (ms, rd)))
        return now + n * cfg.transfer_time_per_byte + hold

    def _chunk_time(self, rd: _OpenRead, pos: int) -> float:
        rel = pos - rd.lo
        t = rd.t0 + rel * self.config.transfer_time_per_byte
        if rel >= rd.hold_from:
            t += rd.hold
        return t

    def _chunks(self, lo: int, hi: int):
        unit = self.config.atomicity_unit
        c = lo - lo % unit
        while c < hi:
            yield max(c, lo), min(c + unit, hi)
            c += unit

    def _store(self, ms: MemoryServer, region: Region, lo: int, data: bytes, now: float) -> None:
        hi = lo + len(data)
        buf = ms.buffer(region)
        if region is Region.HOST:
            ms.ensure_host(hi)
        track = not self.config.read_after_write_ordering
        old = bytes(buf[lo:hi]) if track else None
        buf[lo:hi] = data
        p = self.config.torn_interleave_probability
        for rd in ms.open_reads:
            if rd.region is not region or rd.hi <= lo or hi <= rd.lo:
                continue
            # per (read, write) pair: interleave at chunk grain, or order the
            # whole write after the read
            if p <= 0.0 or (p < 1.0 and self.rng.random() >= p):
                continue
            for a, b in self._chunks(max(lo, rd.lo), min(hi, rd.hi)):
                if self._chunk_time(rd, a) > now:
                    rd.buf[a - rd.lo:b - rd.lo] = data[a - lo:b - lo]
        if track:
            ms.inflight = [w for w in ms.inflight if w.t_end > now]
            t_end = now + len(data) * self.config.transfer_time_per_byte
            ms.inflight.append(_InflightWrite(region, lo, hi, old, now, t_end))

    def _revert_inflight(self, ms: MemoryServer, rd: _OpenRead, now: float) -> None:
        """Without PCIe read-after-write ordering a read may overtake the
        DMA of an already acknowledged write."""
        per_byte = self.config.transfer_time_per_byte
        p = self.config.torn_interleave_probability
        ms.inflight = [w for w in ms.inflight if w.t_end > now]
        for w in reversed(ms.inflight):
            if w.region is not rd.region or w.hi <= rd.lo or rd.hi <= w.lo:
                continue
            if p <= 0.0 or (p < 1.0 and self.rng.random() >= p):
                continue
            for a, b in self._chunks(max(w.lo, rd.lo), min(w.hi, rd.hi)):
                landed = w.t0 + (b - w.lo) * per_byte
                if self._chunk_time(rd, a) < landed:
                    rd.buf[a - rd.lo:b - rd.lo] = w.old[a - w.lo:b - w.lo]

    def _atomic(self, ms: MemoryServer, job: _Job, i: int, cmd: Command, now: float) -> None:
        buf = ms.buffer(cmd.addr.region)
        off = cmd.addr.offset
        if cmd.addr.region is Region.HOST:
            ms.ensure_host(off + 8)
        word = int.from_bytes(buf[off:off + 8], "little")
        verb = cmd.verb
        new = word
        if verb is Verb.CAS:
            if word == cmd.compare:
                new = cmd.swap & U64_MASK
            else:
                self.metrics(job.qp.client_id).atomic_retries += 1
        elif verb is Verb.MASKED_CAS:
            m = cmd.mask
            if word & m == cmd.compare & m:
                new = (word & ~m & U64_MASK) | (cmd.swap & m)
            else:
                self.metrics(job.qp.client_id).atomic_retries += 1
        else:
            new = (word + cmd.delta) & U64_MASK
        if new != word:
            self._store(ms, cmd.addr.region, off, new.to_bytes(8, "little"), now)
        job.results[i] = word


def create_fabric(n_memory_servers: int, config: Optional[FabricConfig] = None) -> Fabric:
    return Fabric(n_memory_servers, config)
