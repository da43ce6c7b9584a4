"""Contention-aware selection of parallel NVLink paths.

Point-to-point transfers on non-uniform meshes are not limited to the
direct edge: the selector walks candidate loop-free paths in (hop count,
-bottleneck, lexicographic) order, first claiming fully idle paths, then
considering busy ones when the endpoints still have budget and the
contending holder either has an equally good alternative or an even split
leaves both sides at least their direct-path rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .topology import BandwidthMatrix, Topology, TopologyError

MAX_HOPS = 4          # longer detours never add bandwidth on 8-GPU meshes
MAX_CANDIDATES = 1000  # bounded-search property asserted by tests


@dataclass
class NvPath:
    gpus: list                 # ordered GPU ids from source to destination
    b_min_gbps: float          # bottleneck residual at selection time
    held_by: str | None = None

    @property
    def hops(self) -> int:
        return len(self.gpus) - 1


@dataclass
class PathQuery:
    func: str
    g_s: int
    g_d: int
    matrix: BandwidthMatrix
    allow_busy: bool = True                     # enable phase-2 adoption
    trace: dict = field(default_factory=dict)   # filled by select_paths


def _candidate_paths(topo: Topology, g_s: int, g_d: int, max_hops: int = MAX_HOPS):
    """All loop-free NVLink paths from g_s to g_d up to max_hops, in
    deterministic (hops, lexicographic) order."""
    out = []
    stack = [(g_s, [g_s])]
    while stack:
        node, path = stack.pop()
        for nxt in reversed(topo.nvlink_neighbors(node)):
            if nxt in path:
                continue
            if nxt == g_d:
                out.append(path + [nxt])
            elif len(path) <= max_hops - 1:
                stack.append((nxt, path + [nxt]))
    out.sort(key=lambda p: (len(p), p))
    return out


def _bottleneck(matrix: BandwidthMatrix, path: list) -> float:
    return min(matrix.edge_residual(u, v) for u, v in zip(path, path[1:]))


def select_paths(query: PathQuery) -> list:
    """Algorithm: phase 1 claims idle paths until the source egress or
    destination ingress budget is exhausted; phase 2 tries to adopt busy
    paths without making their holders worse off. Returns the claimed
    paths (already held in the matrix by ``query.func``); empty when the
    pair has no NVLink connectivity at all, in which case the caller falls
    back to PCIe."""
    matrix = query.matrix
    topo = matrix.topo
    if query.g_s == query.g_d:
        raise TopologyError("select_paths needs two distinct GPUs")
    topo._check_gpu(query.g_s)
    topo._check_gpu(query.g_d)

    candidates = _candidate_paths(topo, query.g_s, query.g_d)
    query.trace["candidates_examined"] = len(candidates)
    query.trace["phase1"] = []
    query.trace["phase2"] = []
    if len(candidates) > MAX_CANDIDATES:
        raise TopologyError("path search exceeded its candidate bound")
    if not candidates:
        return []

    chosen = []

    def budgets_open():
        return (matrix.egress_budget[query.g_s] > 1e-9
                and matrix.ingress_budget[query.g_d] > 1e-9)

    # Phase 1: fully idle paths, shortest first, wider bottleneck on ties.
    while budgets_open():
        idle = [p for p in candidates
                if all(matrix.edge_is_idle(u, v) for u, v in zip(p, p[1:]))]
        if not idle:
            break
        idle.sort(key=lambda p: (len(p), -_bottleneck(matrix, p), p))
        path = idle[0]
        rate = _claimable(matrix, query, _bottleneck(matrix, path))
        if rate <= 1e-9:
            break
        matrix.hold(query.func, path, rate)
        chosen.append(NvPath(path, rate, held_by=query.func))
        query.trace["phase1"].append((list(path), rate))

    # Phase 2: busy paths, adopted only when nobody ends up below their
    # direct-path bandwidth. Adopting re-plans the holder's claims, so
    # callers with in-flight holder transfers disable it and rely on the
    # shared fallback below instead.
    if budgets_open() and query.allow_busy:
        for path in candidates:
            if not budgets_open():
                break
            if any(p.gpus == path for p in chosen):
                continue
            adopted = _try_adopt_busy(matrix, query, path)
            if adopted is not None:
                chosen.append(adopted)
                query.trace["phase2"].append((list(adopted.gpus), adopted.b_min_gbps))

    if not chosen:
        # NVLink connectivity exists but every usable path is fully held:
        # share the best physical path instead of dropping to PCIe. Shared
        # paths carry no reservation (held_by None).
        best = max(candidates,
                   key=lambda p: (min(topo.nvlink_gbps(u, v) for u, v in zip(p, p[1:])),
                                  -len(p)))
        cap = min(topo.nvlink_gbps(u, v) for u, v in zip(best, best[1:]))
        chosen.append(NvPath(best, cap, held_by=None))
        query.trace["shared_fallback"] = list(best)
    return chosen


def _claimable(matrix: BandwidthMatrix, query: PathQuery, bottleneck: float) -> float:
    return min(bottleneck,
               matrix.egress_budget[query.g_s],
               matrix.ingress_budget[query.g_d])


def _try_adopt_busy(matrix: BandwidthMatrix, query: PathQuery, path: list):
    edges = list(zip(path, path[1:]))
    busy = [e for e in edges if not matrix.edge_is_idle(*e)]
    if not busy:
        return None
    holders = sorted({f for e in busy for f in matrix.holders_of(*e)})
    if not holders or query.func in holders:
        return None
    if len(holders) > 1:
        return None  # multi-holder renegotiation is out of scope

    holder = holders[0]
    held = [(list(p), r) for p, r in matrix.held.get(holder, [])
            if any(tuple(e) in list(zip(p, p[1:])) for e in busy)]
    if not held:
        return None

    # Option a: the holder re-plans off the contended edges with no loss.
    moved = _replan_holder(matrix, holder, held, forbidden=busy)
    if moved:
        rate = _claimable(matrix, query, _bottleneck(matrix, path))
        if rate > 1e-9:
            matrix.hold(query.func, path, rate)
            return NvPath(path, rate, held_by=query.func)
        return None

    # Option b: split the contended bandwidth evenly if both sides stay at
    # or above their physical direct-path rate.
    return _try_split(matrix, query, path, holder, held)


def _replan_holder(matrix: BandwidthMatrix, holder: str, held, forbidden) -> bool:
    topo = matrix.topo
    old_aggregate = sum(r for _, r in held)
    for p, r in held:
        matrix.release_path(holder, p)
    replacement = []
    total = 0.0
    src, dst = held[0][0][0], held[0][0][-1]
    for cand in _candidate_paths(topo, src, dst):
        if any((u, v) in forbidden or (v, u) in forbidden
               for u, v in zip(cand, cand[1:])):
            continue
        if not all(matrix.edge_is_idle(u, v) for u, v in zip(cand, cand[1:])):
            continue
        rate = _bottleneck(matrix, cand)
        if rate <= 1e-9:
            continue
        matrix.hold(holder, cand, rate)
        replacement.append((cand, rate))
        total += rate
        if total >= old_aggregate - 1e-9:
            break
    if total >= old_aggregate - 1e-9:
        return True
    for p, _ in replacement:
        matrix.release_path(holder, p)
    for p, r in held:
        matrix.hold(holder, p, r)
    return False


def _try_split(matrix: BandwidthMatrix, query: PathQuery, path, holder, held):
    topo = matrix.topo
    direct_q = topo.nvlink_gbps(query.g_s, query.g_d)
    h_src, h_dst = held[0][0][0], held[0][0][-1]
    direct_h = topo.nvlink_gbps(h_src, h_dst)

    # Even split of the holder's reservations on the contended edges.
    new_holder_total = matrix.aggregate_of(holder) - sum(r / 2 for _, r in held)
    if new_holder_total + 1e-9 < direct_h:
        return None
    freed = min(r / 2 for _, r in held)
    gained = _claimable(matrix, query, freed)
    current = sum(r for _, r in matrix.held.get(query.func, []))
    if current + gained + 1e-9 < direct_q:
        return None
    if gained <= 1e-9:
        return None
    for p, r in held:
        matrix.release_path(holder, p)
        matrix.hold(holder, p, r / 2)
    matrix.hold(query.func, path, gained)
    return NvPath(path, gained, held_by=query.func)


def release_paths(matrix: BandwidthMatrix, func: str):
    """Give back everything ``func`` holds; errors on double release."""
    matrix.release(func)


def claim_direct_for_workflow(matrix: BandwidthMatrix, gpu_pairs, workflow_func: str):
    """Reserve the direct edges between a placed workflow's GPU pairs.

    Foreign holders on those edges are evicted and re-planned immediately;
    an evictee that cannot recover its previous aggregate is left on
    whatever paths remain (possibly none, i.e. the PCIe fallback) and
    reported as degraded.
    """
    reservations = []
    degraded = {}
    for g_a, g_b in gpu_pairs:
        cap = matrix.topo.nvlink_gbps(g_a, g_b)
        if cap <= 0:
            continue
        for u, v in ((g_a, g_b), (g_b, g_a)):
            for foreign in list(matrix.holders_of(u, v)):
                if foreign == workflow_func:
                    continue
                degraded.setdefault(foreign, 0.0)
                degraded[foreign] += _evict_and_replan(matrix, foreign, (u, v))
        rate = min(matrix.edge_residual(g_a, g_b), matrix.edge_residual(g_b, g_a))
        if rate > 1e-9:
            matrix.hold(workflow_func, [g_a, g_b], rate)
            matrix.hold(workflow_func, [g_b, g_a], rate)
            reservations.append(((g_a, g_b), rate))
    degraded = {f: loss for f, loss in degraded.items() if loss > 1e-9}
    return reservations, degraded


def _evict_and_replan(matrix: BandwidthMatrix, func: str, edge) -> float:
    """Force ``func`` off every held path crossing ``edge``; re-plan it and
    return any aggregate bandwidth it lost."""
    victims = [(list(p), r) for p, r in matrix.held.get(func, [])
               if edge in list(zip(p, p[1:]))]
    lost = 0.0
    for p, r in victims:
        matrix.release_path(func, p)
        src, dst = p[0], p[-1]
        regained = 0.0
        for cand in _candidate_paths(matrix.topo, src, dst):
            if edge in list(zip(cand, cand[1:])):
                continue
            if not all(matrix.edge_is_idle(u, v) for u, v in zip(cand, cand[1:])):
                continue
            rate = min(_bottleneck(matrix, cand), r - regained)
            if rate <= 1e-9:
                continue
            matrix.hold(func, cand, rate)
            regained += rate
            if regained >= r - 1e-9:
                break
        lost += max(0.0, r - regained)
    return lost


def distribute_chunks(chunk_count: int, paths: list) -> list:
    """Per-batch chunk counts proportional to each path's bottleneck rate,
    rounded by largest remainder so every chunk is assigned."""
    if not paths:
        raise ValueError("distribute_chunks needs at least one path")
    total = sum(p.b_min_gbps for p in paths)
    if total <= 0:
        raise ValueError("paths carry no bandwidth")
    raw = [chunk_count * p.b_min_gbps / total for p in paths]
    counts = [int(x) for x in raw]
    short = chunk_count - sum(counts)
    order = sorted(range(len(paths)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts
