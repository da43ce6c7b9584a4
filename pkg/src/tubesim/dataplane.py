"""Unified data-passing interface: data ids, the two-level index, and
dispatch among the four transfer methods (intra-GPU, inter-GPU, host-GPU,
inter-node).

Plans are pure data; the engine turns their stages into fluid flows.
Every (producer location, requester location) pair maps to exactly one
method.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from . import nvlink_sched
from .simcore import pipeline_fill_ms
from .strategies import Strategy
from .topology import BandwidthMatrix, Topology

LOCAL_LOOKUP_MS = 0.005
GLOBAL_LOOKUP_MS = 0.2
SYNC_PERIOD_MS = 10.0
INTRA_GPU_MAP_MS = 0.05


class MissingData(KeyError):
    pass


class DuplicateStore(ValueError):
    pass


@dataclass(frozen=True)
class Location:
    node: int
    gpu: int | None = None     # None means host memory on that node

    @property
    def on_host(self) -> bool:
        return self.gpu is None


@dataclass
class DataIndexEntry:
    data_id: int
    size_bytes: float
    location: Location
    created_ms: float
    producer: str
    response: bool = False
    global_visible_ms: float = 0.0


class DataIndex:
    """Two-level mapping: one local table per node plus a periodically
    synchronized global table."""

    def __init__(self, sync_period_ms: float = SYNC_PERIOD_MS,
                 local_lookup_ms: float = LOCAL_LOOKUP_MS,
                 global_lookup_ms: float = GLOBAL_LOOKUP_MS):
        self.sync_period_ms = sync_period_ms
        self.local_lookup_ms = local_lookup_ms
        self.global_lookup_ms = global_lookup_ms
        self._counter = itertools.count(1)
        self.local = {}      # node -> {id -> entry}
        self.global_table = {}

    def unique_id(self) -> int:
        return next(self._counter)

    def store(self, data_id: int, location: Location, size_bytes: float,
              now_ms: float, producer: str, response: bool = False) -> DataIndexEntry:
        table = self.local.setdefault(location.node, {})
        if data_id in table or data_id in self.global_table:
            raise DuplicateStore(f"data id {data_id} already stored")
        period = self.sync_period_ms
        visible = (int(now_ms // period) + 1) * period if period > 0 else now_ms
        entry = DataIndexEntry(data_id, size_bytes, location, now_ms, producer,
                               response, global_visible_ms=visible)
        table[data_id] = entry
        self.global_table[data_id] = entry
        return entry

    def resolve(self, data_id: int, node: int, now_ms: float):
        """Return (entry, lookup_cost_ms, ready_ms). A local hit is cheap;
        a global hit costs one round trip and, before the next sync, the
        entry is not visible remotely yet."""
        local = self.local.get(node, {})
        if data_id in local:
            return local[data_id], self.local_lookup_ms, now_ms
        entry = self.global_table.get(data_id)
        if entry is None:
            raise MissingData(f"data id {data_id} not found in local or global table")
        ready = max(now_ms, entry.global_visible_ms)
        return entry, self.local_lookup_ms + self.global_lookup_ms, ready

    def drop(self, data_id: int):
        entry = self.global_table.pop(data_id, None)
        if entry is not None:
            self.local.get(entry.location.node, {}).pop(data_id, None)

    def relocate(self, data_id: int, location: Location):
        entry = self.global_table[data_id]
        self.local.get(entry.location.node, {}).pop(data_id, None)
        entry.location = location
        self.local.setdefault(location.node, {})[data_id] = entry


# -- transfer plans ----------------------------------------------------------

def h2d(node: int, root: int) -> tuple:
    return ("h2d", node, root)


def d2h(node: int, root: int) -> tuple:
    return ("d2h", node, root)


def nv(u: int, v: int) -> tuple:
    return ("nv", u, v)


def net(a: int, b: int) -> tuple:
    return ("net", a, b)


def nv_hop_links(topo: Topology, u: int, v: int) -> list:
    """Link ids consumed by one GPU-to-GPU hop: a hard-wired pair edge, or
    both switch ports (which all of a GPU's fabric traffic shares)."""
    if topo.pair_kind(u, v) == "nvswitch":
        return [("nvp_out", u), ("nvp_in", v)]
    return [nv(u, v)]


@dataclass
class Branch:
    links: list
    bytes_share: float
    cap_gbps: float | None = None
    reserved_gbps: float | None = None
    fill_ms: float = 0.0
    hop_caps: list = field(default_factory=list)


@dataclass
class Stage:
    branches: list
    managed: bool = False       # rates come from the PCIe scheduler
    pinned_bytes: float = 0.0   # in-flight pinned staging this stage needs


@dataclass
class TransferPlan:
    method: str                       # intra_gpu | inter_gpu | host_gpu | inter_node
    size_bytes: float
    stages: list = field(default_factory=list)   # sequential stages
    fixed_ms: float = 0.0                        # mapping/lookup constants
    claimed_func: str | None = None              # NVLink claim to release at the end
    note: str = ""


class Dataplane:
    """Builds transfer plans for one engine instance."""

    def __init__(self, topo: Topology, strategy: Strategy, matrix: BandwidthMatrix,
                 chunk_bytes: float, intra_gpu_map_ms: float = INTRA_GPU_MAP_MS):
        self.topo = topo
        self.strategy = strategy
        self.matrix = matrix
        self.chunk_bytes = chunk_bytes
        self.intra_gpu_map_ms = intra_gpu_map_ms
        self._claims = itertools.count(1)

    # Each (producer, requester) location pair maps to exactly one method.
    def fetch_plan(self, entry_loc: Location, dest: Location, size_bytes: float) -> TransferPlan:
        if entry_loc.node != dest.node:
            return self._inter_node(entry_loc, dest, size_bytes)
        if entry_loc.on_host and dest.on_host:
            return TransferPlan("intra_gpu", size_bytes, fixed_ms=0.0,
                                note="host-to-host shared memory")
        if entry_loc.on_host != dest.on_host:
            return self._host_gpu(entry_loc, dest, size_bytes)
        if entry_loc.gpu == dest.gpu:
            return TransferPlan("intra_gpu", size_bytes, fixed_ms=self.intra_gpu_map_ms)
        return self._inter_gpu(entry_loc, dest, size_bytes)

    # -- host <-> GPU ----------------------------------------------------

    def _host_gpu(self, src: Location, dest: Location, size_bytes: float) -> TransferPlan:
        gpu = dest.gpu if src.on_host else src.gpu
        node = dest.node
        into_gpu = src.on_host
        branches = self._pcie_branches(node, gpu, size_bytes, into_gpu)
        stage = Stage(branches, managed=self.strategy.pcie_sched,
                      pinned_bytes=self._staging_bytes(size_bytes))
        return TransferPlan("host_gpu", size_bytes, stages=[stage])

    def _staging_bytes(self, size_bytes: float) -> float:
        # In-flight pinned staging: one chunk draining plus one being filled.
        return min(size_bytes, 2 * self.chunk_bytes)

    def _pcie_branches(self, node: int, gpu: int, size_bytes: float, into_gpu: bool) -> list:
        topo = self.topo
        own_root = topo.pcie_root_of(gpu)
        pcie = (lambda r: h2d(node, r)) if into_gpu else (lambda r: d2h(node, r))
        routes = [[pcie(own_root)]]
        if self.strategy.parallel_pcie:
            for root, gpus in sorted(topo.pcie_groups.items()):
                if root == own_root or not any(topo.node_of(g) == node for g in gpus):
                    continue
                detour = self._staging_route(node, root, gpu, into_gpu)
                if detour is not None:
                    routes.append(detour)
        share = size_bytes / len(routes)
        branches = []
        for links in routes:
            caps = [self._link_cap(l) for l in links]
            branches.append(Branch(
                links=links, bytes_share=share, hop_caps=caps,
                fill_ms=pipeline_fill_ms(caps, min(self.chunk_bytes, share))))
        return branches

    def _staging_route(self, node: int, root: int, gpu: int, into_gpu: bool):
        """PCIe leg through a neighboring root, then idle NVLink hops to the
        target GPU. Skipped when no NVLink route has residual capacity, so
        detours never starve claimed gFunc-to-gFunc traffic."""
        topo = self.topo
        candidates = [g for g in sorted(topo.pcie_groups[root]) if topo.node_of(g) == node]
        best = None
        for stage_gpu in candidates:
            path = self._nv_route(stage_gpu, gpu, into_gpu)
            if path and (best is None or len(path) < len(best[1])):
                best = (stage_gpu, path)
        if best is None:
            return None
        stage_gpu, path = best
        pcie = h2d(node, root) if into_gpu else d2h(node, root)
        nv_links = [l for u, v in zip(path, path[1:])
                    for l in nv_hop_links(self.topo, u, v)]
        return [pcie] + nv_links if into_gpu else nv_links + [pcie]

    def _nv_route(self, a: int, b: int, into_gpu: bool):
        """Shortest NVLink path with residual capacity; direction is
        staging->target for loads and target->staging for stores."""
        src, dst = (a, b) if into_gpu else (b, a)
        for path in nvlink_sched._candidate_paths(self.topo, src, dst, max_hops=2):
            if all(self.matrix.edge_residual(u, v) > 0 for u, v in zip(path, path[1:])):
                return path
        return None

    def _link_cap(self, link) -> float:
        kind = link[0]
        if kind in ("h2d", "d2h"):
            return self.topo.pcie_gbps
        if kind == "nv":
            return self.topo.nvlink_gbps(link[1], link[2])
        if kind in ("nvp_out", "nvp_in"):
            return self.topo.switch_port_gbps(link[1])
        return self.topo.network_gbps

    # -- GPU <-> GPU, same node -------------------------------------------

    def _inter_gpu(self, src: Location, dest: Location, size_bytes: float) -> TransferPlan:
        if self.strategy.host_oriented:
            pinned = self._staging_bytes(size_bytes)
            down = Stage(self._pcie_branches(src.node, src.gpu, size_bytes, into_gpu=False),
                         pinned_bytes=pinned)
            up = Stage(self._pcie_branches(dest.node, dest.gpu, size_bytes, into_gpu=True),
                       pinned_bytes=pinned)
            return TransferPlan("inter_gpu", size_bytes, stages=[down, up],
                                note="staged through host memory")
        func = f"xfer{next(self._claims)}"
        if self.strategy.nvlink_sched:
            query = nvlink_sched.PathQuery(func, src.gpu, dest.gpu, self.matrix,
                                           allow_busy=False)
            paths = nvlink_sched.select_paths(query)
        else:
            paths = self._direct_only(src.gpu, dest.gpu)
        if not paths:
            return self._pcie_peer(src, dest, size_bytes)
        total = sum(p.b_min_gbps for p in paths)
        claimed = any(p.held_by == func for p in paths)
        branches = []
        for p in paths:
            links = [l for u, v in zip(p.gpus, p.gpus[1:])
                     for l in nv_hop_links(self.topo, u, v)]
            share = size_bytes * p.b_min_gbps / total
            caps = [self.topo.nvlink_gbps(u, v) for u, v in zip(p.gpus, p.gpus[1:])]
            branches.append(Branch(
                links, share, hop_caps=caps,
                reserved_gbps=p.b_min_gbps if p.held_by == func else None,
                fill_ms=pipeline_fill_ms(caps, min(self.chunk_bytes, share))))
        return TransferPlan("inter_gpu", size_bytes, stages=[Stage(branches)],
                            claimed_func=func if claimed else None)

    def _direct_only(self, g_s: int, g_d: int) -> list:
        # No reservation: concurrent transfers on the pair share the edge.
        cap = self.topo.nvlink_gbps(g_s, g_d)
        if cap <= 0:
            return []
        return [nvlink_sched.NvPath([g_s, g_d], cap, held_by=None)]

    def _pcie_peer(self, src: Location, dest: Location, size_bytes: float) -> TransferPlan:
        """NVLink-less pair: direct peer DMA runs at the shared peer rate,
        so beyond a few chunks the pipelined chunked staging through host
        memory is faster and the dispatcher picks it."""
        links = [d2h(src.node, self.topo.pcie_root_of(src.gpu)),
                 h2d(dest.node, self.topo.pcie_root_of(dest.gpu))]
        peer = self.topo.pcie_peer_gbps
        pcie = self.topo.pcie_gbps
        chunk = min(self.chunk_bytes, size_bytes)
        peer_ms = pipeline_latency(size_bytes, [peer], chunk)
        staged_ms = pipeline_latency(size_bytes, [pcie, pcie], chunk)
        if peer_ms <= staged_ms:
            branch = Branch(links, size_bytes, cap_gbps=peer, hop_caps=[peer, peer],
                            fill_ms=pipeline_fill_ms([peer, peer], chunk))
            note = "pcie peer fallback"
        else:
            branch = Branch(links, size_bytes, hop_caps=[pcie, pcie],
                            fill_ms=pipeline_fill_ms([pcie, pcie], chunk))
            note = "pipelined host staging fallback"
        return TransferPlan("inter_gpu", size_bytes, stages=[Stage([branch])],
                            note=note)

    # -- across nodes -----------------------------------------------------

    def _inter_node(self, src: Location, dest: Location, size_bytes: float) -> TransferPlan:
        hops = []
        if not src.on_host:
            hops.append(d2h(src.node, self.topo.pcie_root_of(src.gpu)))
        hops.append(net(src.node, dest.node))
        if not dest.on_host:
            hops.append(h2d(dest.node, self.topo.pcie_root_of(dest.gpu)))
        caps = [self._link_cap(l) for l in hops]
        if self.strategy.host_oriented:
            stages = [Stage([Branch([l], size_bytes, hop_caps=[c])])
                      for l, c in zip(hops, caps)]
            return TransferPlan("inter_node", size_bytes, stages=stages,
                                note="sequential copies through both hosts")
        branch = Branch(hops, size_bytes, hop_caps=caps,
                        fill_ms=pipeline_fill_ms(caps, min(self.chunk_bytes, size_bytes)))
        return TransferPlan("inter_node", size_bytes, stages=[Stage([branch])],
                            note="pipelined across nodes")

    def release_claim(self, plan: TransferPlan):
        if plan.claimed_func and plan.claimed_func in self.matrix.held:
            self.matrix.release(plan.claimed_func)


def plan_latency_model(plan: TransferPlan) -> float:
    """Uncontended analytic completion time of a plan (ms): stages run
    sequentially, parallel branches complete at the slowest branch. Used by
    tests and the SLO calibration pass, mirroring the fluid engine without
    queuing."""
    from .simcore import ms_for
    total = plan.fixed_ms
    for stage in plan.stages:
        worst = 0.0
        for br in stage.branches:
            if br.reserved_gbps is not None:
                rate = br.reserved_gbps
            elif br.cap_gbps is not None:
                rate = br.cap_gbps
            else:
                rate = min(br.hop_caps)
            worst = max(worst, ms_for(br.bytes_share, rate) + br.fill_ms)
        total += worst
    return total
