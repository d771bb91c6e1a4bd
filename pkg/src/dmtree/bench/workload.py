"""Workload definitions and key-stream generation.

Key scheme: the tree is bulkloaded with the even keys ``2r + 2`` for ranks
``r`` in ``[0, key_space)``. An operation draws a rank from the popularity
distribution; lookups, updates and range starts use the loaded key of that
rank, while fresh inserts use the odd key ``2r + 1`` just below it, so new
keys land in the same leaf as their popular neighbour.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

INSERT, LOOKUP, RANGE = 0, 1, 2
OP_NAMES = ("insert", "lookup", "range")

# percentages of (insert, lookup, range)
MIXES = {
    "write-only": (100, 0, 0),
    "write-intensive": (50, 50, 0),
    "read-intensive": (5, 95, 0),
    "range-only": (0, 0, 100),
    "range-write": (50, 0, 50),
}


@dataclass
class WorkloadSpec:
    workload: str = "write-intensive"
    mix: Optional[tuple] = None
    dist: str = "uniform"
    theta: float = 0.99
    key_space: int = 10**6
    range_size: int = 100
    op_count: int = 10**5
    threads: int = 8  # per compute server
    cs: int = 4
    ms: int = 4
    seed: int = 0
    update_fraction: float = 2 / 3
    cache_mb: float = 64
    node_bytes: int = 1024
    interleave_prob: float = 0.0
    fg_original: bool = False
    warmup: int = 0
    fill_factor: float = 0.8
    scramble: bool = False

    def __post_init__(self):
        if self.mix is None:
            if self.workload not in MIXES:
                raise ValueError(f"unknown workload {self.workload!r}; "
                                 f"choose from {', '.join(MIXES)}")
            self.mix = MIXES[self.workload]
        self.mix = tuple(self.mix)
        if len(self.mix) != 3 or any(p < 0 for p in self.mix) or sum(self.mix) != 100:
            raise ValueError("mix must be three non-negative percentages summing to 100")
        if self.dist not in ("uniform", "zipf"):
            raise ValueError("dist must be 'uniform' or 'zipf'")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")
        if self.key_space < 1 or self.op_count < 0 or self.warmup < 0:
            raise ValueError("key_space must be positive and op counts non-negative")
        if self.threads < 1 or self.cs < 1 or self.ms < 1:
            raise ValueError("need at least one thread, compute server and memory server")
        if self.range_size < 1:
            raise ValueError("range_size must be positive")
        if not 0 <= self.update_fraction <= 1:
            raise ValueError("update_fraction must be within [0, 1]")

    @property
    def total_threads(self) -> int:
        return self.cs * self.threads

    def to_dict(self) -> dict:
        return asdict(self)


def zipf_cdf(n: int, theta: float) -> np.ndarray:
    """Cumulative popularity of ranks 0..n-1, rank r weighted 1/(r+1)^theta."""
    w = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), theta)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return cdf


def zipf_top_mass(n: int, theta: float) -> float:
    """Probability of the most popular rank: 1 / H(n, theta)."""
    return 1.0 / sum(1.0 / (i ** theta) for i in range(1, n + 1))


def draw_ranks(spec: WorkloadSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    n = spec.key_space
    if spec.dist == "uniform" or spec.theta == 0:
        ranks = rng.integers(0, n, size=size)
    else:
        u = rng.random(size)
        ranks = np.searchsorted(zipf_cdf(n, spec.theta), u, side="right")
        np.minimum(ranks, n - 1, out=ranks)
    if spec.scramble:
        perm = np.random.default_rng([spec.seed, 0x5C]).permutation(n)
        ranks = perm[ranks]
    return ranks.astype(np.int64)


def gen_keys(spec: WorkloadSpec, size: Optional[int] = None) -> np.ndarray:
    """Deterministic stream of loaded keys drawn from the spec's distribution."""
    rng = np.random.default_rng([spec.seed, 1])
    return 2 * draw_ranks(spec, spec.op_count if size is None else size, rng) + 2


@dataclass
class OpStream:
    kinds: np.ndarray
    keys: np.ndarray

    def __len__(self) -> int:
        return len(self.kinds)


def gen_ops(spec: WorkloadSpec, count: Optional[int] = None, stream: int = 0) -> OpStream:
    """Operation kinds and keys. ``stream`` separates warm-up from measured ops."""
    count = spec.op_count if count is None else count
    rng = np.random.default_rng([spec.seed, 2, stream])
    p = np.array(spec.mix, dtype=np.float64) / 100.0
    kinds = rng.choice(3, size=count, p=p).astype(np.int8)
    ranks = draw_ranks(spec, count, rng)
    keys = 2 * ranks + 2
    fresh = (kinds == INSERT) & (rng.random(count) >= spec.update_fraction)
    keys[fresh] -= 1
    return OpStream(kinds, keys)


def loaded_keys(spec: WorkloadSpec):
    return (2 * r + 2 for r in range(spec.key_space))


# -- checksum-linked values ----------------------------------------------------

def checksum_value(key: int, nonce: int) -> int:
    """64-bit value whose low half is a CRC of (key, nonce); a torn value
    from two different writes fails :func:`value_ok` with high probability."""
    nonce &= 0xFFFFFFFF
    crc = zlib.crc32(key.to_bytes(8, "big") + nonce.to_bytes(4, "big"))
    return (nonce << 32) | crc


def value_ok(key: int, value: int) -> bool:
    return checksum_value(key, value >> 32) == value
