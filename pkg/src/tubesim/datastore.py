"""Elastic GPU data store: auto-scaling memory pool and queue-aware
migration of cached intermediate data.

Reservations follow per-function percentile histograms (request interval,
output size, accumulation concurrency); the pool keeps reserved blocks
while a function's window is active and shrinks back afterwards, never
below a burst floor. Under memory pressure, objects whose consumers sit
farthest back in the request queue are migrated to host first.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

HISTOGRAM_WINDOW = 1000          # retained samples per function
POOL_FLOOR_BYTES = 300 * 10**6
CAPACITY_LIMIT_BYTES = 10**9     # per-GPU data store cap before migration
NATIVE_ALLOC_MS = 1.0            # cudaMalloc-scale delay per cold allocation
_CLASS_BYTES = 2 * 10**6         # block size granularity


def size_class(size_bytes: float) -> int:
    """Blocks are handed out in 2 MB multiples; a block only ever serves
    its own class (a 100 MB block cannot absorb a 120 MB request)."""
    if size_bytes <= 0:
        raise ValueError("allocation size must be > 0")
    return _CLASS_BYTES * max(1, math.ceil(size_bytes / _CLASS_BYTES))


def p99(samples) -> float:
    vals = sorted(samples)
    rank = max(1, math.ceil(0.99 * len(vals)))
    return vals[rank - 1]


class FuncHistogram:
    """Sliding-window percentile tracker for one function on one GPU."""

    def __init__(self, func: str, window: int = HISTOGRAM_WINDOW):
        self.func = func
        self.intervals = deque(maxlen=window)
        self.sizes = deque(maxlen=window)
        self.concurrency = deque(maxlen=window)
        self.last_request_ms = None
        self.r_window_ms = 0.0
        self.r_size_bytes = 0.0
        self.r_con = 0.0

    def record_execution(self, now_ms: float, size_bytes: float, concurrency: float):
        if size_bytes < 0 or concurrency < 0:
            raise ValueError("histogram samples must be >= 0")
        if self.last_request_ms is not None:
            self.intervals.append(now_ms - self.last_request_ms)
        self.last_request_ms = now_ms
        self.sizes.append(size_bytes)
        self.concurrency.append(concurrency)
        if self.intervals:
            self.r_window_ms = p99(self.intervals)
        self.r_size_bytes = p99(self.sizes)
        self.r_con = p99(self.concurrency)

    def reservation_bytes(self) -> float:
        if not self.sizes:
            return 0.0
        return self.r_size_bytes * max(1.0, self.r_con)

    def window_active(self, now_ms: float) -> bool:
        if self.last_request_ms is None:
            return False
        return now_ms - self.last_request_ms <= max(self.r_window_ms, 0.0)


def reservation(hist: FuncHistogram) -> float:
    return hist.reservation_bytes()


def pool_target(histograms, now_ms: float, floor_bytes: float = POOL_FLOOR_BYTES) -> float:
    """Sum of active-window reservations, floored for burst headroom."""
    total = sum(h.reservation_bytes() for h in histograms if h.window_active(now_ms))
    return max(total, floor_bytes)


@dataclass
class Block:
    class_bytes: int
    in_use: bool = False


class MemoryPool:
    """Size-class block pool for one GPU's data store.

    mode "autoscale" shrinks cached blocks back to the histogram-driven
    target when windows expire; "cache_all" never returns blocks (the
    framework-allocator baseline); "none" pays the native cost on every
    allocation and holds nothing.
    """

    def __init__(self, gpu: int, mode: str = "autoscale",
                 floor_bytes: float = POOL_FLOOR_BYTES,
                 native_alloc_ms: float = NATIVE_ALLOC_MS,
                 physical_bytes: float = 32 * 10**9):
        if mode not in ("autoscale", "cache_all", "none"):
            raise ValueError(f"unknown pool mode {mode!r}")
        self.gpu = gpu
        self.mode = mode
        self.floor_bytes = floor_bytes
        self.native_alloc_ms = native_alloc_ms
        self.physical_bytes = physical_bytes
        self.blocks = []
        self.histograms = {}

    def histogram(self, func: str) -> FuncHistogram:
        if func not in self.histograms:
            self.histograms[func] = FuncHistogram(func)
        return self.histograms[func]

    @property
    def pool_bytes(self) -> float:
        return float(sum(b.class_bytes for b in self.blocks))

    @property
    def in_use_bytes(self) -> float:
        return float(sum(b.class_bytes for b in self.blocks if b.in_use))

    def target(self, now_ms: float) -> float:
        return pool_target(self.histograms.values(), now_ms, self.floor_bytes)

    def allocate(self, size_bytes: float):
        """Return (block, latency_ms). Cached same-class blocks are free;
        growth pays the native allocation delay."""
        cls = size_class(size_bytes)
        if self.pool_bytes + cls > self.physical_bytes and not any(
                b.class_bytes == cls and not b.in_use for b in self.blocks):
            raise MemoryError(f"gpu {self.gpu}: pool would exceed physical memory")
        if self.mode != "none":
            for b in self.blocks:
                if not b.in_use and b.class_bytes == cls:
                    b.in_use = True
                    return b, 0.0
        block = Block(cls, in_use=True)
        self.blocks.append(block)
        return block, self.native_alloc_ms

    def free(self, block: Block):
        block.in_use = False
        if self.mode == "none":
            self.blocks.remove(block)

    def shrink(self, now_ms: float):
        """Drop cached blocks until the pool fits the current target; the
        floor only protects GPUs with at least one active window."""
        if self.mode != "autoscale":
            return
        limit = self.target(now_ms)
        if not any(h.window_active(now_ms) for h in self.histograms.values()):
            limit = min(limit, self.floor_bytes)
        idle = sorted((b for b in self.blocks if not b.in_use),
                      key=lambda b: -b.class_bytes)
        for b in idle:
            if self.pool_bytes - b.class_bytes < min(limit, self.floor_bytes):
                break
            if self.pool_bytes <= limit:
                break
            self.blocks.remove(b)


@dataclass
class StoredObject:
    data_id: int
    size_bytes: float
    producer: str
    gpu: int
    stored_at_ms: float
    location: str = "gpu"               # "gpu" | "host" | "both"
    consumers: dict = field(default_factory=dict)  # consumer key -> queue position
    live: bool = True
    block: Block | None = None

    def nearest_queue_pos(self):
        return min(self.consumers.values()) if self.consumers else None

    def farthest_queue_pos(self):
        return max(self.consumers.values()) if self.consumers else None


class HardPressure(RuntimeError):
    """Even migrating every live object cannot relieve the pressure."""


def migration_plan(objects: list, pressure_bytes: float, policy: str = "queue_aware") -> list:
    """Ordered evictions freeing at least ``pressure_bytes`` of GPU store.

    Dead objects are reclaimed first at zero transfer cost. queue_aware
    then evicts the object whose nearest consumer is farthest back in the
    request queue; lru evicts the earliest-stored object.
    """
    if pressure_bytes <= 0:
        raise ValueError("pressure must be > 0")
    if policy not in ("queue_aware", "lru"):
        raise ValueError(f"unknown migration policy {policy!r}")
    plan = []
    freed = 0.0
    on_gpu = [o for o in objects if o.location == "gpu"]
    for obj in sorted((o for o in on_gpu if not o.live), key=lambda o: o.data_id):
        plan.append(("reclaim", obj))
        freed += obj.size_bytes
        if freed >= pressure_bytes:
            return plan
    candidates = [o for o in on_gpu if o.live and o.consumers]
    if policy == "queue_aware":
        candidates.sort(key=lambda o: (-o.nearest_queue_pos(), o.data_id))
    else:
        candidates.sort(key=lambda o: (o.stored_at_ms, o.data_id))
    for obj in candidates:
        plan.append(("migrate", obj))
        freed += obj.size_bytes
        if freed >= pressure_bytes:
            return plan
    raise HardPressure(
        f"need {pressure_bytes} bytes but only {freed} reclaimable/migratable")


def prefetch_back(objects: list, free_bytes: float) -> list:
    """Reload migrated objects, nearest consumer first, while they fit."""
    if free_bytes <= 0:
        raise ValueError("free_bytes must be > 0")
    migrated = [o for o in objects
                if o.location == "host" and o.live and o.consumers]
    migrated.sort(key=lambda o: (o.nearest_queue_pos(), o.data_id))
    schedule = []
    room = free_bytes
    for obj in migrated:
        if obj.size_bytes <= room:
            schedule.append(obj)
            room -= obj.size_bytes
    return schedule
