"""SLO-aware PCIe transfer scheduling.

Each function's demand carries the minimum rate that still meets its SLO;
leftover server bandwidth goes to the demand with the least slack. Chunk
transfers are triggered in batches so a newly arrived demand can preempt
bandwidth at the next batch boundary instead of waiting for whole flows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

CHUNK_BYTES = 2 * 10**6      # 2 MB transfer granularity
BATCH_CHUNKS = 5
PINNED_COST_MS_PER_MB = 0.7  # cold pinned allocation, ~70 ms per 100 MB


class InfeasibleDemand(ValueError):
    """SLO leaves no time for the transfer (slo <= infer with data to move)."""


def min_rate(data_size_bytes: float, slo_ms: float, infer_ms: float) -> float:
    """Minimum transfer rate (GB/s) meeting the SLO: size / (slo - infer)."""
    if data_size_bytes < 0:
        raise ValueError("data size must be >= 0")
    if data_size_bytes == 0:
        return 0.0
    window = slo_ms - infer_ms
    if window <= 0:
        raise InfeasibleDemand(
            f"slo {slo_ms} ms <= inference {infer_ms} ms with {data_size_bytes} bytes pending")
    return data_size_bytes / (window * 1e6)


@dataclass
class RateDemand:
    func: str
    data_size_bytes: float
    slo_ms: float
    infer_ms: float
    arrival_ms: float = 0.0
    rate_least_gbps: float = field(init=False)
    slo_at_risk: bool = field(default=False, init=False)

    def __post_init__(self):
        self.rate_least_gbps = min_rate(self.data_size_bytes, self.slo_ms, self.infer_ms)

    def slack_ms(self, now_ms: float) -> float:
        """Remaining slack: time to deadline minus time still needed at the
        minimum rate. Smaller slack means a tighter SLO right now."""
        deadline = self.arrival_ms + self.slo_ms - self.infer_ms
        if self.rate_least_gbps <= 0:
            return deadline - now_ms
        return (deadline - now_ms) - self.data_size_bytes / (self.rate_least_gbps * 1e6)


@dataclass
class PcieSchedulerState:
    bw_all_gbps: float
    batch_chunks: int = BATCH_CHUNKS
    chunk_bytes: int = CHUNK_BYTES
    demands: dict = field(default_factory=dict)   # func -> RateDemand

    @property
    def batch_bytes(self) -> int:
        return self.batch_chunks * self.chunk_bytes

    def rate_idle_gbps(self) -> float:
        used = sum(d.rate_least_gbps for d in self.demands.values())
        return max(0.0, self.bw_all_gbps - used)

    def add(self, demand: RateDemand):
        self.demands[demand.func] = demand

    def remove(self, func: str):
        self.demands.pop(func, None)


def partition(state: PcieSchedulerState, now_ms: float = 0.0) -> dict:
    """Assign each active demand its minimum rate and hand all idle
    bandwidth to the tightest-slack demand. Oversubscription scales every
    rate by BW_all / sum(rate_least) and flags the demands instead of
    failing."""
    demands = list(state.demands.values())
    if not demands:
        return {}
    least = {d.func: d.rate_least_gbps for d in demands}
    total_least = sum(least.values())
    if total_least > state.bw_all_gbps:
        scale = state.bw_all_gbps / total_least
        rates = {}
        for d in demands:
            d.slo_at_risk = True
            rates[d.func] = least[d.func] * scale
        return rates
    for d in demands:
        d.slo_at_risk = False
    rates = dict(least)
    idle = state.bw_all_gbps - total_least
    if idle > 0:
        tightest = min(demands, key=lambda d: (d.slack_ms(now_ms), d.arrival_ms, d.func))
        rates[tightest.func] += idle
    return rates


def trigger_batches(total_bytes: float, state: PcieSchedulerState) -> list:
    """Chunk-batch plan for one flow: a list of batch byte counts. The last
    batch may be partial and a sub-chunk tail stays a single small chunk."""
    if total_bytes <= 0:
        return []
    chunks = max(1, math.ceil(total_bytes / state.chunk_bytes))
    batches = []
    remaining = total_bytes
    for _ in range(math.ceil(chunks / state.batch_chunks)):
        size = min(remaining, state.batch_bytes)
        batches.append(size)
        remaining -= size
    return batches


class PinnedRing:
    """Circular pinned staging buffer shared by transfers on one server.

    Cold allocation is the expensive part; once the ring is warm, batches
    cycle through it at no modeled cost. Requests beyond the warm capacity
    pay the cold rate for the shortfall only.
    """

    def __init__(self, capacity_bytes: float,
                 cost_ms_per_mb: float = PINNED_COST_MS_PER_MB,
                 prewarmed: bool = False):
        self.capacity_bytes = capacity_bytes
        self.cost_ms_per_mb = cost_ms_per_mb
        self.warm_bytes = capacity_bytes if prewarmed else 0.0
        self.cold_allocated_bytes = 0.0

    def acquire(self, bytes_needed: float) -> float:
        """Stage ``bytes_needed`` of in-flight pinned memory; returns the
        added latency in ms (0 once warm)."""
        if bytes_needed < 0:
            raise ValueError("bytes must be >= 0")
        usable = min(bytes_needed, self.capacity_bytes)
        shortfall = max(0.0, usable - self.warm_bytes) + max(0.0, bytes_needed - self.capacity_bytes)
        if usable > self.warm_bytes:
            self.warm_bytes = usable
        if shortfall > 0:
            self.cold_allocated_bytes += shortfall
            return self.cost_ms_per_mb * shortfall / 1e6
        return 0.0


def pinned_cost(bytes_needed: float, ring: PinnedRing) -> float:
    """Latency added by pinned staging for a transfer needing
    ``bytes_needed`` in flight."""
    return ring.acquire(bytes_needed)


def default_ring_capacity(pcie_link_count: int,
                          batch_bytes: int = BATCH_CHUNKS * CHUNK_BYTES) -> int:
    # One batch in flight per link plus one being filled.
    return 2 * batch_bytes * pcie_link_count
