"""Workflow execution engine.

Each request walks its workflow DAG: inputs are fetched when producers
store them, GPU functions queue FIFO on their placed GPU (temporal
sharing), outputs are stored through the data plane and pushed to
consumers. Transfer timing comes from the fluid network: NVLink claims
are reserved rates guarded by the bandwidth matrix, scheduler-partitioned
PCIe stages are rate-capped fair flows whose caps change only at chunk
batch boundaries, and everything else shares links max-min fairly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from . import datastore, pcie_sched
from .dataplane import DataIndex, Dataplane, Location, TransferPlan, d2h, h2d, net, nv
from .pcie_sched import PcieSchedulerState, PinnedRing, RateDemand
from .simcore import EventQueue, FluidNetwork, Metrics, ms_for
from .strategies import Strategy
from .topology import Topology, snapshot_matrix
from .workflow import Placement, Workflow

_EPS = 1e-9


@dataclass
class EngineConfig:
    chunk_bytes: int = pcie_sched.CHUNK_BYTES
    batch_chunks: int = pcie_sched.BATCH_CHUNKS
    pinned_cost_ms_per_mb: float = pcie_sched.PINNED_COST_MS_PER_MB
    ring_capacity_bytes: int | None = None      # default: 2 x batch x link count
    pageable_rate_gbps: float = 3.0
    native_alloc_ms: float = datastore.NATIVE_ALLOC_MS
    pool_floor_bytes: float = datastore.POOL_FLOOR_BYTES
    capacity_limit_bytes: float = datastore.CAPACITY_LIMIT_BYTES
    intra_gpu_map_ms: float = 0.05
    local_lookup_ms: float = 0.005
    global_lookup_ms: float = 0.2
    sync_period_ms: float = 10.0
    occupancy_limit: int = 1

    @property
    def batch_bytes(self) -> int:
        return self.chunk_bytes * self.batch_chunks


@dataclass
class RequestSpec:
    """One pre-drawn workflow invocation: every random choice is made at
    trace-build time so all strategies replay byte-identical workloads."""

    rid: int
    workflow: str
    arrival_ms: float
    edge_bytes: dict          # (src, dst) -> bytes for fired edges
    fired: set                # {(src, dst), ...}
    input_bytes: float
    response_bytes: float


@dataclass
class _FuncRun:
    fid: str
    inputs_pending: set = field(default_factory=set)
    input_done_ms: dict = field(default_factory=dict)       # edge -> arrival
    input_from_ms: dict = field(default_factory=dict)       # edge -> producer store_done
    input_category: dict = field(default_factory=dict)      # edge -> phase name
    ready_ms: float | None = None
    compute_start_ms: float | None = None
    compute_end_ms: float | None = None
    store_done_ms: float | None = None
    store_category: str = "host_to_gfunc"
    response_done_ms: float | None = None


class _Request:
    def __init__(self, spec: RequestSpec, wf: Workflow, placement: Placement):
        self.spec = spec
        self.wf = wf
        self.placement = placement
        self.active = self._active_functions()
        self.runs = {fid: _FuncRun(fid) for fid in self.active}
        self.sinks = self._effective_sinks()
        self.responses_pending = set(self.sinks)
        self.queue_pos = {}
        for fid in self.active:
            run = self.runs[fid]
            for e in wf.in_edges(fid):
                if (e.src, e.dst) in spec.fired and e.src in self.active:
                    run.inputs_pending.add((e.src, e.dst))

    def _active_functions(self) -> set:
        active = set(self.wf.entries())
        for fid in self.wf.topo_order():
            if fid in active:
                continue
            for e in self.wf.in_edges(fid):
                if e.src in active and (e.src, e.dst) in self.spec.fired:
                    active.add(fid)
                    break
        return active

    def _effective_sinks(self) -> list:
        sinks = []
        for fid in sorted(self.active):
            outs = [e for e in self.wf.out_edges(fid)
                    if (e.src, e.dst) in self.spec.fired and e.dst in self.active]
            if not outs:
                sinks.append(fid)
        return sinks


class _ManagedStage:
    """A scheduler-controlled PCIe stage: one demand whose assigned rate is
    split evenly over its branches as flow caps. Cap changes land on batch
    boundaries only, so an in-flight batch is never preempted."""

    def __init__(self, demand, flows, node, direction, cap_gbps, batch_bytes):
        self.key = demand.func
        self.demand = demand
        self.flows = flows
        self.node = node
        self.direction = direction
        self.cap_gbps = cap_gbps          # branches x bottleneck hop rate
        self.batch_bytes = batch_bytes
        self.rate_gbps = 0.0
        self.pending_rate = None
        self.anchor_ms = 0.0              # when the current rate took effect
        self.armed_ms = None              # pending boundary event, if any
        self.started = False

    def next_boundary(self, after_ms: float) -> float | None:
        """First batch boundary strictly after ``after_ms`` under the
        current rate (boundaries repeat every batch since the anchor)."""
        if not self.started or self.rate_gbps <= _EPS:
            return None
        dur = ms_for(self.batch_bytes, self.rate_gbps)
        k = max(1, math.floor((after_ms - self.anchor_ms) / dur + 1e-9) + 1)
        return self.anchor_ms + k * dur


class Engine:
    def __init__(self, topo: Topology, strategy: Strategy,
                 config: EngineConfig | None = None, seed: int = 0):
        self.topo = topo
        self.strategy = strategy
        self.config = config or EngineConfig()
        self.seed = seed
        self.queue = EventQueue()
        self.net = FluidNetwork()
        self.matrix = snapshot_matrix(topo)
        self.index = DataIndex(self.config.sync_period_ms,
                               self.config.local_lookup_ms,
                               self.config.global_lookup_ms)
        self.dataplane = Dataplane(topo, strategy, self.matrix,
                                   self.config.chunk_bytes, self.config.intra_gpu_map_ms)
        self.metrics = Metrics()
        self.now = 0.0
        self._register_links()
        self._gpu_free = {g: 0.0 for g in topo.gpus()}
        self._gpu_wait = {g: [] for g in topo.gpus()}
        self._pcie = {}
        self._managed = {}
        self._managed_ids = itertools.count(1)
        self._net_version = 0
        self._workflows = {}
        self._queue_pos = itertools.count(1)
        self._pools = {}
        self._objects = {}
        self._rings = {}
        if strategy.gpu_store():
            for g in topo.gpus():
                self._pools[g] = datastore.MemoryPool(
                    g, strategy.pool, self.config.pool_floor_bytes,
                    self.config.native_alloc_ms)
        for node in topo.nodes:
            nid = node["id"]
            roots = self._roots_of(nid)
            cap = self.config.ring_capacity_bytes or pcie_sched.default_ring_capacity(
                len(roots), self.config.batch_bytes)
            self._rings[nid] = PinnedRing(cap, self.config.pinned_cost_ms_per_mb,
                                          prewarmed=strategy.pcie_sched)
            for direction in ("h2d", "d2h"):
                self._pcie[(nid, direction)] = PcieSchedulerState(
                    bw_all_gbps=self.topo.pcie_gbps * len(roots),
                    batch_chunks=self.config.batch_chunks,
                    chunk_bytes=self.config.chunk_bytes)

    # -- plumbing ---------------------------------------------------------

    def _roots_of(self, node_id: int) -> list:
        return sorted(r for r, gpus in self.topo.pcie_groups.items()
                      if any(self.topo.node_of(g) == node_id for g in gpus))

    def _register_links(self):
        for node in self.topo.nodes:
            nid = node["id"]
            for root in self._roots_of(nid):
                self.net.add_link(h2d(nid, root), self.topo.pcie_gbps)
                self.net.add_link(d2h(nid, root), self.topo.pcie_gbps)
        for (u, v), cap in sorted(self.topo.nvlink_pairs().items()):
            if self.topo.pair_kind(u, v) == "nvlink":
                self.net.add_link(nv(u, v), cap)
                self.net.add_link(nv(v, u), cap)
        for g in self.topo.gpus():
            port = self.topo.switch_port_gbps(g)
            if port > 0:
                self.net.add_link(("nvp_out", g), port)
                self.net.add_link(("nvp_in", g), port)
        node_ids = sorted(n["id"] for n in self.topo.nodes)
        for a in node_ids:
            for b in node_ids:
                if a != b:
                    self.net.add_link(net(a, b), self.topo.network_gbps)

    def add_workflow(self, wf: Workflow, placement: Placement, requests: list):
        self._workflows[wf.name] = (wf, placement)
        for spec in requests:
            self.queue.push(spec.arrival_ms, "request_arrival", self._on_arrival, spec)

    def location_of(self, placement: Placement, fid: str) -> Location:
        kind, where = placement.mapping[fid]
        if kind == "gpu":
            return Location(self.topo.node_of(where), where)
        return Location(where, None)

    # -- main loop --------------------------------------------------------

    def run_until(self, end_time_ms: float) -> Metrics:
        while len(self.queue):
            t = self.queue.peek_time()
            if t is None or t > end_time_ms + _EPS:
                break
            ev = self.queue.pop()
            self._advance(ev.time_ms)
            ev.callback(ev)
        if end_time_ms > self.now:
            self._advance(end_time_ms)
        return self.metrics

    def _advance(self, t: float):
        if t < self.now - 1e-6:
            raise RuntimeError(f"time went backwards: {t} < {self.now}")
        if t > self.now:
            self.net.advance(t)
            self.now = t

    def _resolve_net(self):
        """Recompute flow rates and re-arm the next completion tick."""
        self.net.solve()
        self._net_version += 1
        nxt = self.net.next_completion()
        if nxt is not None:
            self.queue.push(max(nxt[0], self.now), "transfer_complete",
                            self._on_net_tick, self._net_version)

    def _on_net_tick(self, ev):
        if ev.payload != self._net_version:
            return
        finished = self.net.done_flows()
        for f in finished:
            self.net.finish(f)
        for f in finished:
            if f.on_complete:
                f.on_complete(self.now, f)
        self._resolve_net()

    # -- request lifecycle ---------------------------------------------------

    def _on_arrival(self, ev):
        spec: RequestSpec = ev.payload
        wf, placement = self._workflows[spec.workflow]
        req = _Request(spec, wf, placement)
        req.queue_pos = {fid: next(self._queue_pos)
                         for fid in wf.topo_order() if fid in req.active}
        self.metrics.start_request(spec.rid, wf.name, spec.arrival_ms,
                                   wf.slo_ms if wf.slo_ms else float("inf"))
        for fid in wf.entries():
            self._deliver_entry_input(req, fid)

    def _deliver_entry_input(self, req: _Request, fid: str):
        run = req.runs[fid]
        loc = self.location_of(req.placement, fid)
        edge_key = ("__input__", fid)
        run.inputs_pending.add(edge_key)
        if loc.on_host:
            self._input_arrived(req, fid, edge_key, self.now,
                                req.spec.arrival_ms, "host_to_gfunc")
            return
        plan = self.dataplane.fetch_plan(Location(loc.node, None), loc,
                                         req.spec.input_bytes)
        self._execute_plan(
            req, plan, consumer=fid, start_ms=self.now,
            done=lambda t, e=edge_key, f=fid: self._input_arrived(
                req, f, e, t, req.spec.arrival_ms, "host_to_gfunc"))

    def _input_arrived(self, req, fid, edge_key, t, from_ms, category):
        run = req.runs[fid]
        run.input_done_ms[edge_key] = t
        run.input_from_ms[edge_key] = from_ms
        run.input_category[edge_key] = category
        run.inputs_pending.discard(edge_key)
        if not run.inputs_pending and run.ready_ms is None:
            run.ready_ms = t
            self._enqueue_compute(req, fid)

    def _enqueue_compute(self, req, fid):
        run = req.runs[fid]
        loc = self.location_of(req.placement, fid)
        if loc.on_host:
            run.compute_start_ms = run.ready_ms
            run.compute_end_ms = run.ready_ms + req.wf.function(fid).compute_latency_ms
            self.queue.push(run.compute_end_ms, "compute_complete",
                            lambda ev: self._on_compute_done(req, fid))
            return
        gpu = loc.gpu
        if self._gpu_free[gpu] <= run.ready_ms + _EPS and not self._gpu_wait[gpu]:
            self._start_compute(req, fid, gpu, run.ready_ms)
        else:
            self._gpu_wait[gpu].append((req, fid))

    def _start_compute(self, req, fid, gpu, start_ms):
        run = req.runs[fid]
        run.compute_start_ms = start_ms
        run.compute_end_ms = start_ms + req.wf.function(fid).compute_latency_ms
        self._gpu_free[gpu] = run.compute_end_ms
        self.queue.push(run.compute_end_ms, "compute_complete",
                        lambda ev: self._on_compute_done(req, fid))

    def _on_compute_done(self, req, fid):
        loc = self.location_of(req.placement, fid)
        if not loc.on_host and self._gpu_wait[loc.gpu]:
            nxt_req, nxt_fid = self._gpu_wait[loc.gpu].pop(0)
            self._start_compute(nxt_req, nxt_fid, loc.gpu, self.now)
        self._store_output(req, fid)

    # -- store / fetch ---------------------------------------------------------

    def _store_output(self, req, fid):
        wf = req.wf
        run = req.runs[fid]
        loc = self.location_of(req.placement, fid)
        out_edges = [e for e in wf.out_edges(fid)
                     if (e.src, e.dst) in req.spec.fired and e.dst in req.active]
        out_edges.sort(key=lambda e: (e.src, e.dst))
        is_sink = fid in req.sinks
        size = (req.spec.response_bytes if is_sink else
                max(req.spec.edge_bytes[(e.src, e.dst)] for e in out_edges))
        categories = {self._edge_category(req, e) for e in out_edges}
        run.store_category = ("gfunc_to_gfunc" if "gfunc_to_gfunc" in categories
                              else ("internode" if "internode" in categories
                                    else "host_to_gfunc"))
        if loc.on_host or not self.strategy.gpu_store():
            self._store_host_oriented(req, fid, loc, size, out_edges, is_sink)
        else:
            self._store_gpu_oriented(req, fid, loc, size, out_edges, is_sink)

    def _store_host_oriented(self, req, fid, loc, size, out_edges, is_sink):
        """Host-oriented path (and any cFunc producer): the output lands in
        host shared memory first; consumers copy it back out from there."""
        run = req.runs[fid]
        host_loc = Location(loc.node, None)
        did = self.index.unique_id()

        def committed(t):
            run.store_done_ms = t
            self.index.store(did, host_loc, size, t, fid, response=is_sink)
            if is_sink:
                run.response_done_ms = t
                self._response_arrived(req, fid, t)
            for e in out_edges:
                self._start_edge_transfer(req, e, did)

        if loc.on_host:
            committed(self.now)
            return
        plan = self.dataplane.fetch_plan(loc, host_loc, size)
        self._execute_plan(req, plan, consumer=fid, start_ms=self.now, done=committed)

    def _store_gpu_oriented(self, req, fid, loc, size, out_edges, is_sink):
        run = req.runs[fid]
        pool = self._pools[loc.gpu]
        block, alloc_ms = pool.allocate(size)
        did = self.index.unique_id()
        hist = pool.histogram(fid)
        live_here = sum(1 for o in self._objects.values()
                        if o.producer == fid and o.gpu == loc.gpu and o.live)
        hist.record_execution(self.now, size, live_here + 1)
        consumers = {(req.spec.rid, e.dst): req.queue_pos[e.dst] for e in out_edges}
        obj = datastore.StoredObject(did, size, fid, loc.gpu, self.now,
                                     consumers=consumers, block=block)
        self._objects[did] = obj
        store_done = self.now + alloc_ms

        def committed(ev=None):
            run.store_done_ms = store_done
            self.index.store(did, loc, size, store_done, fid, response=is_sink)
            self._note_pool()
            self._schedule_shrink(loc.gpu, hist)
            self._check_pressure(loc.gpu)
            if is_sink:
                self._send_response(req, fid, obj, loc, store_done)
            for e in out_edges:
                self._start_edge_transfer(req, e, did)

        if alloc_ms > 0:
            self.queue.push(store_done, "rate_update", committed)
        else:
            committed()

    def _send_response(self, req, fid, obj, loc, start_ms):
        run = req.runs[fid]
        plan = self.dataplane.fetch_plan(loc, Location(loc.node, None), obj.size_bytes)

        def done(t):
            run.response_done_ms = t
            self._retire_object(obj)
            self._response_arrived(req, fid, t)

        self._execute_plan(req, plan, consumer=fid, start_ms=start_ms, done=done)

    def _response_arrived(self, req, fid, t):
        req.responses_pending.discard(fid)
        if not req.responses_pending:
            self.metrics.finish_request(req.spec.rid, t)
            self._attribute_phases(req, t)

    def _edge_category(self, req, edge) -> str:
        src = self.location_of(req.placement, edge.src)
        dst = self.location_of(req.placement, edge.dst)
        if src.node != dst.node:
            return "internode"
        if src.on_host or dst.on_host:
            return "host_to_gfunc"
        return "gfunc_to_gfunc"

    def _start_edge_transfer(self, req, edge, did):
        key = (edge.src, edge.dst)
        size = req.spec.edge_bytes[key]
        dst_loc = self.location_of(req.placement, edge.dst)
        category = self._edge_category(req, edge)
        entry, lookup_ms, ready_ms = self.index.resolve(did, dst_loc.node, self.now)
        src_loc = entry.location
        producer_loc = self.location_of(req.placement, edge.src)
        if self.strategy.gpu_store() and src_loc.on_host and not producer_loc.on_host:
            self.metrics.reload_bytes += size    # migrated data fetched back on demand
        plan = self.dataplane.fetch_plan(src_loc, dst_loc, size)
        plan.fixed_ms += lookup_ms if self.strategy.unified_interface \
            else lookup_ms + self.config.global_lookup_ms

        def done(t):
            obj = self._objects.get(did)
            if obj is not None:
                obj.consumers.pop((req.spec.rid, edge.dst), None)
                if not obj.consumers:
                    self._retire_object(obj)
            self._input_arrived(req, edge.dst, key, t,
                                req.runs[edge.src].store_done_ms, category)

        self._execute_plan(req, plan, consumer=edge.dst,
                           start_ms=max(ready_ms, self.now), done=done)

    # -- plan execution --------------------------------------------------------

    def _execute_plan(self, req, plan: TransferPlan, consumer, start_ms, done):
        stages = list(plan.stages)

        def start_next(t):
            if not stages:
                self.dataplane.release_claim(plan)
                done(t)
                return
            stage = stages.pop(0)
            self._run_stage(req, stage, consumer, t, start_next)

        self._at(start_ms + plan.fixed_ms, "chunk_batch_start", start_next)

    def _at(self, t, kind, fn):
        if t <= self.now + _EPS:
            fn(self.now)
        else:
            self.queue.push(t, kind, lambda ev: fn(ev.time_ms))

    def _run_stage(self, req, stage, consumer, t, on_done):
        begin = t + self._pinned_penalty(stage)
        pending = {"n": len(stage.branches), "last": begin}

        def branch_done(finish_ms):
            pending["n"] -= 1
            pending["last"] = max(pending["last"], finish_ms)
            if pending["n"] == 0:
                on_done(pending["last"])

        def launch(now_ms):
            if stage.managed and self.strategy.pcie_sched:
                self._start_managed_stage(req, stage, consumer, now_ms, branch_done)
                return
            for br in stage.branches:
                if br.bytes_share <= 0:
                    self._at(now_ms, "transfer_complete", branch_done)
                    continue
                self.net.new_flow(
                    br.links, br.bytes_share, owner=f"r{req.spec.rid}:{consumer}",
                    reserved_gbps=br.reserved_gbps, cap_gbps=br.cap_gbps,
                    on_complete=self._fill_then(br.fill_ms, branch_done))
            self._resolve_net()

        self._at(begin, "chunk_batch_start", launch)

    def _fill_then(self, fill_ms, branch_done):
        def cb(now, flow):
            self._at(now + fill_ms, "transfer_complete", branch_done)
        return cb

    def _pinned_penalty(self, stage) -> float:
        """Pinned staging cost for PCIe stages. The scheduler's shared
        circular ring is pre-warmed and reused across transfers; every
        other strategy re-allocates its in-flight staging slots per
        transfer and pays the cold-pin rate for them."""
        if stage.pinned_bytes <= 0:
            return 0.0
        if self.strategy.pcie_sched:
            node = 0
            for br in stage.branches:
                for l in br.links:
                    if l[0] in ("h2d", "d2h"):
                        node = l[1]
                        break
            return self._rings[node].acquire(stage.pinned_bytes)
        return self.config.pinned_cost_ms_per_mb * stage.pinned_bytes / 1e6

    # -- managed PCIe stages -----------------------------------------------------

    def _start_managed_stage(self, req, stage, consumer, begin, branch_done):
        wf = req.wf
        func = wf.function(consumer) if consumer in wf._by_id else None
        total = sum(br.bytes_share for br in stage.branches)
        node, direction = 0, "h2d"
        for br in stage.branches:
            for l in br.links:
                if l[0] in ("h2d", "d2h"):
                    node, direction = l[1], l[0]
        slo = func.slo_ms if func is not None and func.slo_ms else 1e9
        infer = func.infer_latency_ms if func is not None else 0.0
        name = f"m{next(self._managed_ids)}"
        try:
            demand = RateDemand(name, total, slo, infer, arrival_ms=begin)
        except pcie_sched.InfeasibleDemand:
            demand = RateDemand(name, total, 1e12, 0.0, arrival_ms=begin)
            demand.slo_at_risk = True
            self.metrics.slo_risk_flags += 1
        flows = []
        stage_obj = None

        def flow_complete(now, flow, fill_ms):
            self._at(now + fill_ms, "transfer_complete", branch_done)
            if all(f.flow_id not in self.net.flows for f in flows):
                sched = self._pcie[(node, direction)]
                sched.remove(demand.func)
                self._managed.pop(stage_obj.key, None)
                self._pcie_resync(node, direction)

        for br in stage.branches:
            flows.append(self.net.new_flow(
                br.links, br.bytes_share, owner=name, cap_gbps=0.0,
                on_complete=lambda now, f, fl=br.fill_ms: flow_complete(now, f, fl)))
        per_branch_cap = min(min(br.hop_caps) for br in stage.branches)
        stage_obj = _ManagedStage(demand, flows, node, direction,
                                  per_branch_cap * len(flows), self.config.batch_bytes)
        self._managed[stage_obj.key] = stage_obj
        self._pcie[(node, direction)].add(demand)
        self._pcie_resync(node, direction)

    def _stages_of(self, node, direction):
        return [m for m in self._managed.values()
                if m.node == node and m.direction == direction]

    def _pcie_resync(self, node, direction):
        """Re-run the SLO partition. New demands start immediately when the
        committed rates leave room, otherwise at the next batch boundary;
        rate changes for running stages land on their own boundaries."""
        sched = self._pcie[(node, direction)]
        stages = self._stages_of(node, direction)
        targets = pcie_sched.partition(sched, self.now)
        committed = sum(m.rate_gbps for m in stages if m.started)
        order = sorted(stages, key=lambda m: (m.demand.slack_ms(self.now),
                                              m.demand.arrival_ms, m.demand.func))
        leftover = 0.0
        for m in order:
            target = targets.get(m.demand.func, 0.0) + leftover
            want = min(target, m.cap_gbps)
            leftover = max(0.0, target - want)
            if not m.started:
                headroom = sched.bw_all_gbps - committed
                rate = min(want, headroom)
                # Start now when the partition's assigned rate fits beside
                # the committed in-flight batches; otherwise wait for the
                # next batch boundary to preempt bandwidth.
                if rate > _EPS and (rate >= want - _EPS or committed <= _EPS):
                    self._set_stage_rate(m, rate)
                    committed += rate
                else:
                    boundary = self._earliest_boundary(stages)
                    if boundary is not None:
                        self._arm_boundary(m, boundary)
            elif abs(want - m.rate_gbps) > 1e-6:
                m.pending_rate = want
                self._arm_boundary(m, m.next_boundary(self.now))
        self._resolve_net()

    def _set_stage_rate(self, m: _ManagedStage, rate):
        m.rate_gbps = rate
        m.started = True
        m.pending_rate = None
        m.anchor_ms = self.now
        per_branch = rate / len(m.flows)
        for f in m.flows:
            if f.flow_id in self.net.flows:
                f.cap_gbps = per_branch

    def _earliest_boundary(self, stages):
        times = [b for b in (m.next_boundary(self.now) for m in stages) if b is not None]
        return min(times) if times else None

    def _arm_boundary(self, m: _ManagedStage, boundary_ms):
        if boundary_ms is None or boundary_ms <= self.now + _EPS:
            return
        if m.armed_ms is not None and m.armed_ms <= boundary_ms + 1e-9:
            return  # an event at or before this boundary is already queued
        m.armed_ms = boundary_ms
        self.queue.push(boundary_ms, "chunk_batch_start",
                        lambda ev: self._on_boundary(m))

    def _on_boundary(self, m: _ManagedStage):
        m.armed_ms = None
        if m.key not in self._managed:
            return
        if m.pending_rate is not None:
            others = sum(x.rate_gbps for x in self._stages_of(m.node, m.direction)
                         if x.started and x.key != m.key)
            bw_all = self._pcie[(m.node, m.direction)].bw_all_gbps
            self._set_stage_rate(m, min(m.pending_rate, max(0.0, bw_all - others)))
        self._pcie_resync(m.node, m.direction)

    # -- datastore ----------------------------------------------------------------

    def _note_pool(self):
        pool_bytes = sum(p.pool_bytes for p in self._pools.values())
        stored = sum(o.size_bytes for o in self._objects.values()
                     if o.live and o.location == "gpu")
        self.metrics.note_pool(self.now, pool_bytes, stored)

    def _schedule_shrink(self, gpu, hist):
        expiry = (hist.last_request_ms or self.now) + hist.r_window_ms
        self.queue.push(max(expiry, self.now), "rate_update",
                        lambda ev: self._shrink_pool(gpu))

    def _shrink_pool(self, gpu):
        pool = self._pools.get(gpu)
        if pool is not None:
            pool.shrink(self.now)
            self._note_pool()

    def _retire_object(self, obj: datastore.StoredObject):
        if not obj.live:
            return
        obj.live = False
        self.index.drop(obj.data_id)
        self._objects.pop(obj.data_id, None)
        if obj.block is not None and obj.gpu in self._pools:
            pool = self._pools[obj.gpu]
            pool.free(obj.block)
            self._schedule_shrink(obj.gpu, pool.histogram(obj.producer))
            self._note_pool()
        if self.strategy.migration != "none":
            self._maybe_prefetch(obj.gpu)

    def _stored_on(self, gpu) -> float:
        return sum(o.size_bytes for o in self._objects.values()
                   if o.gpu == gpu and o.location == "gpu" and o.live)

    def _check_pressure(self, gpu):
        if self.strategy.migration == "none":
            return
        stored = self._stored_on(gpu)
        if stored <= self.config.capacity_limit_bytes:
            return
        objs = sorted((o for o in self._objects.values() if o.gpu == gpu),
                      key=lambda o: o.data_id)
        try:
            plan = datastore.migration_plan(objs, stored - self.config.capacity_limit_bytes,
                                            self.strategy.migration)
        except datastore.HardPressure:
            return
        for action, obj in plan:
            if action == "reclaim":
                self._retire_object(obj)
            else:
                self._migrate_out(obj)

    def _migrate_out(self, obj: datastore.StoredObject):
        node = self.topo.node_of(obj.gpu)
        obj.location = "host"
        self.index.relocate(obj.data_id, Location(node, None))
        self.metrics.migrated_bytes += obj.size_bytes
        if obj.block is not None:
            self._pools[obj.gpu].free(obj.block)
            obj.block = None
        self.net.new_flow([d2h(node, self.topo.pcie_root_of(obj.gpu))],
                          obj.size_bytes, owner=f"mig{obj.data_id}")
        self._note_pool()
        self._resolve_net()

    def _maybe_prefetch(self, gpu):
        free = self.config.capacity_limit_bytes - self._stored_on(gpu)
        if free <= 0:
            return
        candidates = sorted((o for o in self._objects.values() if o.gpu == gpu),
                            key=lambda o: o.data_id)
        reloaded = False
        for obj in datastore.prefetch_back(candidates, free):
            obj.location = "gpu"
            node = self.topo.node_of(obj.gpu)
            block, _cost = self._pools[gpu].allocate(obj.size_bytes)
            obj.block = block
            self.index.relocate(obj.data_id, Location(node, obj.gpu))
            self.metrics.reload_bytes += obj.size_bytes
            self.net.new_flow([h2d(node, self.topo.pcie_root_of(gpu))],
                              obj.size_bytes, owner=f"pre{obj.data_id}")
            reloaded = True
        if reloaded:
            self._note_pool()
            self._resolve_net()

    # -- phase attribution -----------------------------------------------------------

    def _attribute_phases(self, req: _Request, end_ms: float):
        """Walk the critical path backwards, attributing every wall-clock
        slice to one phase; queuing absorbs float residue so the phase sum
        equals the end-to-end latency exactly."""
        rid = req.spec.rid
        rec = self.metrics.requests[rid]
        sink = max(req.sinks, key=lambda f: (req.runs[f].response_done_ms, f))
        run = req.runs[sink]
        phases = {p: 0.0 for p in ("host_to_gfunc", "gfunc_to_gfunc", "compute", "internode")}
        phases["host_to_gfunc"] += run.response_done_ms - run.compute_end_ms
        fid = sink
        while True:
            run = req.runs[fid]
            phases["compute"] += run.compute_end_ms - run.compute_start_ms
            if not run.input_done_ms:
                break
            edge = max(run.input_done_ms, key=lambda e: (run.input_done_ms[e], e))
            phases[run.input_category[edge]] += run.ready_ms - run.input_from_ms[edge]
            if edge[0] == "__input__":
                break
            fid = edge[0]
            prev = req.runs[fid]
            phases[prev.store_category] += prev.store_done_ms - prev.compute_end_ms
        for p, v in phases.items():
            self.metrics.record_metric(rid, p, v)
        latency = end_ms - req.spec.arrival_ms
        self.metrics.record_metric(rid, "queuing", latency - sum(phases.values()))
        total = sum(rec[p] for p in ("queuing", "host_to_gfunc", "gfunc_to_gfunc",
                                     "compute", "internode"))
        rec["queuing"] += latency - total
