"""Deterministic discrete-event core with a fluid-flow transfer model.

Transfers are continuous flows whose rates change only at events (flow
arrival/completion, batch boundaries, reservation changes). Multi-hop
pipelined transfers drain at their bottleneck rate and pay a fixed
pipeline-fill term of one chunk per non-bottleneck hop.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

GBPS_TO_BYTES_PER_MS = 1e6
_EPS_BYTES = 1e-3     # payloads are MB-scale; sub-millibyte residue is done
_EPS_MS = 1e-9


def ms_for(bytes_count: float, gbps: float) -> float:
    return bytes_count / (gbps * GBPS_TO_BYTES_PER_MS)


def pipeline_latency(size_bytes: float, hop_gbps: list, chunk_bytes: float) -> float:
    """Store-and-forward chunked pipeline over fixed-rate hops (ms).

    The slowest hop streams the full payload; every other hop adds one
    chunk of fill/drain time. A single hop is exact: size / rate.
    """
    if not hop_gbps:
        raise ValueError("pipeline_latency needs at least one hop")
    if any(b <= 0 for b in hop_gbps):
        raise ValueError("hop bandwidths must be > 0")
    if chunk_bytes <= 0 or chunk_bytes > size_bytes:
        chunk_bytes = size_bytes
    slowest = min(range(len(hop_gbps)), key=lambda i: hop_gbps[i])
    total = ms_for(size_bytes, hop_gbps[slowest])
    for i, b in enumerate(hop_gbps):
        if i != slowest:
            total += ms_for(chunk_bytes, b)
    return total


def pipeline_fill_ms(hop_gbps: list, chunk_bytes: float) -> float:
    """Just the fill term of pipeline_latency (0 for a single hop)."""
    if len(hop_gbps) <= 1:
        return 0.0
    slowest = min(range(len(hop_gbps)), key=lambda i: hop_gbps[i])
    return sum(ms_for(chunk_bytes, b) for i, b in enumerate(hop_gbps) if i != slowest)


# -- event queue -----------------------------------------------------------

EVENT_KINDS = (
    "request_arrival", "chunk_batch_start", "transfer_complete",
    "compute_complete", "migration_trigger", "rate_update",
)


@dataclass(order=True)
class SimEvent:
    time_ms: float
    seq: int
    kind: str = field(compare=False)
    payload: object = field(compare=False, default=None)
    callback: object = field(compare=False, default=None)


class EventQueue:
    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def push(self, time_ms: float, kind: str, callback, payload=None) -> SimEvent:
        if time_ms < -_EPS_MS:
            raise ValueError(f"event at negative time {time_ms}")
        ev = SimEvent(time_ms, next(self._seq), kind, payload, callback)
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def peek_time(self):
        return self._heap[0].time_ms if self._heap else None

    def __len__(self):
        return len(self._heap)


# -- fluid flows -----------------------------------------------------------


@dataclass
class Flow:
    """One fluid flow across an ordered list of link ids.

    ``reserved_gbps`` flows hold their rate unconditionally (NVLink claims,
    scheduler-partitioned PCIe batches); other flows share residual link
    capacity max-min fairly, optionally clipped by ``cap_gbps`` (peer-PCIe
    or pageable ceilings).
    """

    flow_id: int
    path: list
    bytes_total: float
    owner: str = ""
    reserved_gbps: float | None = None
    cap_gbps: float | None = None
    fill_ms: float = 0.0
    on_complete: object = None
    bytes_done: float = 0.0
    rate_gbps: float = 0.0

    @property
    def remaining(self) -> float:
        return max(0.0, self.bytes_total - self.bytes_done)


def fair_share_update(flows: list, link_capacity: dict) -> dict:
    """Max-min fair allocation. Reserved rates are carved out first, the
    rest is progressively filled among unreserved flows; a flow's optional
    cap acts as a bottleneck of its own."""
    residual = dict(link_capacity)
    rates = {}
    for f in flows:
        if f.reserved_gbps is not None:
            rates[f.flow_id] = f.reserved_gbps
            for l in f.path:
                residual[l] = residual.get(l, 0.0) - f.reserved_gbps
    for l, r in residual.items():
        if r < -1e-6:
            raise ValueError(f"reservations exceed capacity on link {l}")
        residual[l] = max(0.0, r)

    pending = [f for f in flows if f.reserved_gbps is None]
    pending.sort(key=lambda f: f.flow_id)
    unfixed = {f.flow_id: f for f in pending}
    while unfixed:
        counts = {}
        for f in unfixed.values():
            for l in f.path:
                counts[l] = counts.get(l, 0) + 1
        level = None
        bottleneck_link = None
        for l in sorted(counts, key=str):
            share = residual.get(l, 0.0) / counts[l]
            if level is None or share < level - 1e-12:
                level = share
                bottleneck_link = l
        capped = [f for f in unfixed.values()
                  if f.cap_gbps is not None and f.cap_gbps < level - 1e-12]
        if capped:
            f = min(capped, key=lambda f: (f.cap_gbps, f.flow_id))
            rates[f.flow_id] = f.cap_gbps
            for l in f.path:
                residual[l] = max(0.0, residual[l] - f.cap_gbps)
            del unfixed[f.flow_id]
            continue
        for f in [f for f in unfixed.values() if bottleneck_link in f.path]:
            rates[f.flow_id] = level
            for l in f.path:
                if l != bottleneck_link:
                    residual[l] = max(0.0, residual[l] - level)
            del unfixed[f.flow_id]
        residual[bottleneck_link] = 0.0
    return rates


class FluidNetwork:
    """Tracks active flows and their piecewise-constant rates."""

    def __init__(self):
        self.links = {}
        self.flows = {}
        self.now = 0.0
        self._ids = itertools.count(1)

    def add_link(self, link_id, capacity_gbps: float):
        self.links[link_id] = capacity_gbps

    def new_flow(self, path, bytes_total, owner="", reserved_gbps=None,
                 cap_gbps=None, fill_ms=0.0, on_complete=None) -> Flow:
        for l in path:
            if l not in self.links:
                raise KeyError(f"unknown link {l!r}")
        flow = Flow(next(self._ids), list(path), float(bytes_total), owner,
                    reserved_gbps, cap_gbps, fill_ms, on_complete)
        self.flows[flow.flow_id] = flow
        return flow

    def advance(self, to_time: float):
        dt = to_time - self.now
        if dt < -_EPS_MS:
            raise ValueError("fluid network cannot move backwards in time")
        if dt > 0:
            for f in self.flows.values():
                f.bytes_done = min(f.bytes_total,
                                   f.bytes_done + f.rate_gbps * GBPS_TO_BYTES_PER_MS * dt)
        self.now = to_time

    def solve(self):
        rates = fair_share_update(list(self.flows.values()), self.links)
        for f in self.flows.values():
            f.rate_gbps = rates.get(f.flow_id, 0.0)

    def utilization(self, link_id) -> float:
        return sum(f.rate_gbps for f in self.flows.values() if link_id in f.path)

    def next_completion(self):
        """(time, flow) of the earliest byte-completion, or None."""
        best = None
        for f in sorted(self.flows.values(), key=lambda f: f.flow_id):
            if f.remaining <= _EPS_BYTES:
                t = self.now
            elif f.rate_gbps > 0:
                t = self.now + f.remaining / (f.rate_gbps * GBPS_TO_BYTES_PER_MS)
            else:
                continue
            if best is None or t < best[0] - _EPS_MS:
                best = (t, f)
        return best

    def done_flows(self) -> list:
        """Flows whose remaining bytes cannot outlast the current instant
        (including residue too small for float time to advance)."""
        out = []
        for f in self.flows.values():
            if f.remaining <= _EPS_BYTES:
                out.append(f)
            elif f.rate_gbps > 0 and \
                    self.now + f.remaining / (f.rate_gbps * GBPS_TO_BYTES_PER_MS) <= self.now:
                f.bytes_done = f.bytes_total
                out.append(f)
        return sorted(out, key=lambda f: f.flow_id)

    def finish(self, flow: Flow):
        del self.flows[flow.flow_id]


# -- metrics ---------------------------------------------------------------

PHASES = ("queuing", "host_to_gfunc", "gfunc_to_gfunc", "compute", "internode")


def nearest_rank(sorted_values: list, pct: float) -> float:
    """Nearest-rank percentile of an already sorted sample."""
    if not sorted_values:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


class Metrics:
    """Per-request latency breakdown plus run-level counters."""

    def __init__(self):
        self.requests = {}          # rid -> record
        self.order = []
        self.peak_pool_bytes = 0.0
        self.migrated_bytes = 0.0
        self.reload_bytes = 0.0
        self.pool_timeline = []     # (time, pool_bytes, stored_bytes, migrated_bytes)
        self.slo_risk_flags = 0

    def start_request(self, rid, workflow: str, arrival_ms: float, slo_ms: float):
        if rid in self.requests:
            raise KeyError(f"duplicate request {rid}")
        rec = {"rid": rid, "workflow": workflow, "arrival_ms": arrival_ms,
               "slo_ms": slo_ms, "end_ms": None}
        rec.update({p: 0.0 for p in PHASES})
        self.requests[rid] = rec
        self.order.append(rid)

    def record_metric(self, rid, phase: str, duration_ms: float):
        if rid not in self.requests:
            raise KeyError(f"unknown request {rid}")
        if phase not in PHASES:
            raise KeyError(f"unknown phase {phase!r}")
        self.requests[rid][phase] += duration_ms

    def finish_request(self, rid, end_ms: float):
        self.requests[rid]["end_ms"] = end_ms

    def completed(self) -> list:
        return [self.requests[r] for r in self.order if self.requests[r]["end_ms"] is not None]

    def latencies(self) -> list:
        return [r["end_ms"] - r["arrival_ms"] for r in self.completed()]

    def phase_values(self, phase: str) -> list:
        return [r[phase] for r in self.completed()]

    def percentile(self, pct: float):
        lats = sorted(self.latencies())
        return nearest_rank(lats, pct) if lats else None

    def slo_violation_rate(self):
        done = self.completed()
        if not done:
            return None
        bad = sum(1 for r in done if r["end_ms"] - r["arrival_ms"] > r["slo_ms"] + 1e-9)
        return bad / len(done)

    def note_pool(self, time_ms, pool_bytes, stored_bytes):
        self.peak_pool_bytes = max(self.peak_pool_bytes, pool_bytes)
        self.pool_timeline.append((time_ms, pool_bytes, stored_bytes, self.migrated_bytes))

    def summary(self, duration_ms: float) -> dict:
        done = self.completed()
        out = {
            "requests_completed": len(done),
            "requests_seen": len(self.order),
            "duration_ms": round(duration_ms, 6),
            "throughput_rps": round(len(done) / (duration_ms / 1000.0), 6) if duration_ms > 0 else 0.0,
            "peak_pool_bytes": round(self.peak_pool_bytes, 3),
            "migrated_bytes": round(self.migrated_bytes, 3),
            "reload_bytes": round(self.reload_bytes, 3),
        }
        if done:
            lats = sorted(self.latencies())
            out["p50_ms"] = round(nearest_rank(lats, 50), 6)
            out["p99_ms"] = round(nearest_rank(lats, 99), 6)
            out["slo_violation_rate"] = round(self.slo_violation_rate(), 6)
            out["phase_p99_ms"] = {
                p: round(nearest_rank(sorted(self.phase_values(p)), 99), 6)
                for p in PHASES
            }
        return out
