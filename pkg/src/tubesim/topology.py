"""GPU server and cluster connectivity model.

Bandwidth is expressed in GB/s (1 GB = 1e9 bytes) per direction, sizes in
bytes and time in milliseconds throughout the package, so
``ms = bytes / (gbps * 1e6)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

# Default link rates (GB/s). Single/double NVLink lane rates and the
# pinned/pageable PCIe rates are the model's calibration points; the PCIe
# peer fallback is what an NVLink-less GPU pair gets through the host
# complex. All are overridable through custom topology files.
NVLINK_LANE_GBPS = 24.0
PCIE_PINNED_GBPS = 12.0
PCIE_PAGEABLE_GBPS = 3.0
PCIE_PEER_GBPS = 7.9
NVSWITCH_PAIR_GBPS = 300.0
NETWORK_GBPS = 10.0

PRESET_NAMES = ("dgx_v100", "dgx_a100", "quad_a10")

# DGX-1V hybrid cube mesh: two quads, each fully connected, plus four
# cross links. Entries are lane counts; 8 pairs have 2 lanes, 8 have 1,
# the remaining 12 of the 28 pairs have none.
_CUBE_MESH_LANES = {
    (0, 1): 2, (0, 2): 1, (0, 3): 1, (0, 4): 2,
    (1, 2): 1, (1, 3): 2, (1, 5): 1,
    (2, 3): 2, (2, 6): 2,
    (3, 7): 1,
    (4, 5): 2, (4, 6): 1, (4, 7): 1,
    (5, 6): 1, (5, 7): 2,
    (6, 7): 2,
}


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    """One physical connection: a PCIe root, an NVLink pair, an NVSwitch
    port or an inter-node network pipe."""

    kind: str                 # "pcie" | "nvlink" | "nvswitch" | "network"
    endpoints: tuple          # (a, b); gpu ids are ints, hosts are "host:<n>"
    bandwidth_gbps: float     # per lane, per direction
    multiplicity: int = 1

    def __post_init__(self):
        if self.bandwidth_gbps <= 0:
            raise TopologyError(f"link {self.endpoints}: bandwidth must be > 0")
        if self.multiplicity < 1:
            raise TopologyError(f"link {self.endpoints}: multiplicity must be >= 1")

    @property
    def total_gbps(self) -> float:
        return self.bandwidth_gbps * self.multiplicity


@dataclass
class Topology:
    """Immutable after construction; safe to share between engine instances."""

    name: str
    gpu_count: int
    nodes: list = field(default_factory=list)         # [{"id": int, "gpus": [..]}]
    links: list = field(default_factory=list)         # [Link]
    pcie_groups: dict = field(default_factory=dict)   # root index -> [gpu, ...]
    pcie_gbps: float = PCIE_PINNED_GBPS
    pcie_pageable_gbps: float = PCIE_PAGEABLE_GBPS
    pcie_peer_gbps: float = PCIE_PEER_GBPS
    network_gbps: float = NETWORK_GBPS

    def __post_init__(self):
        self._nv = {}       # (u, v) sorted -> capacity per direction
        self._nv_kind = {}  # (u, v) sorted -> "nvlink" | "nvswitch"
        for link in self.links:
            if link.kind in ("nvlink", "nvswitch"):
                a, b = link.endpoints
                key = (min(a, b), max(a, b))
                self._nv[key] = self._nv.get(key, 0.0) + link.total_gbps
                self._nv_kind[key] = link.kind
        self._gpu_node = {}
        for node in self.nodes:
            for g in node["gpus"]:
                self._gpu_node[g] = node["id"]
        self._gpu_root = {}
        for root, gpus in self.pcie_groups.items():
            for g in gpus:
                self._gpu_root[g] = root

    # -- queries ----------------------------------------------------------

    def gpus(self) -> list:
        return list(range(self.gpu_count))

    def node_of(self, gpu: int) -> int:
        self._check_gpu(gpu)
        return self._gpu_node[gpu]

    def pcie_root_of(self, gpu: int) -> int:
        self._check_gpu(gpu)
        return self._gpu_root[gpu]

    def nvlink_gbps(self, u: int, v: int) -> float:
        """Direct NVLink capacity per direction, 0.0 if the pair is unwired."""
        self._check_gpu(u)
        self._check_gpu(v)
        return self._nv.get((min(u, v), max(u, v)), 0.0)

    def nvlink_neighbors(self, gpu: int) -> list:
        self._check_gpu(gpu)
        out = [b if a == gpu else a for (a, b) in self._nv if gpu in (a, b)]
        return sorted(out)

    def nvlink_pairs(self) -> dict:
        return dict(self._nv)

    def pair_kind(self, u: int, v: int):
        return self._nv_kind.get((min(u, v), max(u, v)))

    def switch_port_gbps(self, gpu: int) -> float:
        """Per-direction NVSwitch port capacity at one GPU (0 if the GPU is
        not on a switch fabric). All of the GPU's fabric pairs share it."""
        caps = [cap for (a, b), cap in self._nv.items()
                if gpu in (a, b) and self._nv_kind[(a, b)] == "nvswitch"]
        return max(caps) if caps else 0.0

    def nvlink_degree_gbps(self, gpu: int) -> float:
        """Aggregate NVLink bandwidth one GPU can drive per direction:
        the sum of its hard-wired lanes, or its switch port."""
        port = self.switch_port_gbps(gpu)
        if port > 0:
            return port
        return sum(cap for (a, b), cap in self._nv.items() if gpu in (a, b))

    def pair_bandwidth(self, u: int, v: int) -> float:
        """Direct point-to-point rate: NVLink if wired, else the PCIe peer
        fallback through the host complex."""
        if u == v:
            raise TopologyError("pair_bandwidth needs two distinct GPUs")
        cap = self.nvlink_gbps(u, v)
        if cap > 0:
            return cap
        if self.node_of(u) != self.node_of(v):
            return self.network_gbps
        return self.pcie_peer_gbps

    def _check_gpu(self, gpu: int):
        if not isinstance(gpu, int) or gpu not in self._gpu_node:
            raise TopologyError(f"unknown GPU id {gpu!r}")

    # -- validation -------------------------------------------------------

    def validate(self) -> list:
        """Return a list of human-readable invariant violations (empty if ok)."""
        problems = []
        seen_node = {}
        for node in self.nodes:
            for g in node["gpus"]:
                if g in seen_node:
                    problems.append(f"gpu {g} assigned to nodes {seen_node[g]} and {node['id']}")
                seen_node[g] = node["id"]
        for g in range(self.gpu_count):
            if g not in seen_node:
                problems.append(f"gpu {g} belongs to no node")
        seen_root = {}
        for root, gpus in self.pcie_groups.items():
            for g in gpus:
                if g in seen_root:
                    problems.append(f"gpu {g} in PCIe groups {seen_root[g]} and {root}")
                seen_root[g] = root
        for g in range(self.gpu_count):
            if g not in seen_root:
                problems.append(f"gpu {g} has no PCIe group")
        for link in self.links:
            for end in link.endpoints:
                if isinstance(end, int) and end not in seen_node:
                    problems.append(f"link {link.endpoints} references unknown gpu {end}")
        return problems

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gpu_count": self.gpu_count,
            "nodes": self.nodes,
            "links": [
                {"kind": l.kind, "endpoints": list(l.endpoints),
                 "bandwidth_gbps": l.bandwidth_gbps, "multiplicity": l.multiplicity}
                for l in self.links
            ],
            "pcie_groups": {str(k): v for k, v in self.pcie_groups.items()},
            "rates": {
                "pcie_gbps": self.pcie_gbps,
                "pcie_pageable_gbps": self.pcie_pageable_gbps,
                "pcie_peer_gbps": self.pcie_peer_gbps,
                "network_gbps": self.network_gbps,
            },
        }


def _single_node(name, gpu_count, links, pcie_groups, **rates) -> Topology:
    topo = Topology(
        name=name,
        gpu_count=gpu_count,
        nodes=[{"id": 0, "gpus": list(range(gpu_count))}],
        links=links,
        pcie_groups=pcie_groups,
        **rates,
    )
    problems = topo.validate()
    if problems:
        raise TopologyError(f"{name} preset is inconsistent: {problems}")
    return topo


def _dgx_v100() -> Topology:
    links = [Link("pcie", ("host:0", root), PCIE_PINNED_GBPS) for root in range(4)]
    for (u, v), lanes in sorted(_CUBE_MESH_LANES.items()):
        links.append(Link("nvlink", (u, v), NVLINK_LANE_GBPS, multiplicity=lanes))
    topo = _single_node(
        "dgx_v100", 8, links,
        pcie_groups={0: [0, 1], 1: [2, 3], 2: [4, 5], 3: [6, 7]},
    )
    _assert_cube_mesh(topo)
    return topo


def _assert_cube_mesh(topo: Topology):
    # Self-check of the encoded wiring against the published aggregate pair
    # statistics: of 28 pairs, 8 double-lane, 8 single-lane, 12 unwired, and
    # every GPU carries 6 lanes.
    pairs = topo.nvlink_pairs()
    doubles = sum(1 for cap in pairs.values() if cap == 2 * NVLINK_LANE_GBPS)
    singles = sum(1 for cap in pairs.values() if cap == NVLINK_LANE_GBPS)
    if not (doubles == 8 and singles == 8 and len(pairs) == 16):
        raise TopologyError("dgx_v100 wiring lost its cube-mesh pair statistics")
    for g in range(8):
        if topo.nvlink_degree_gbps(g) != 6 * NVLINK_LANE_GBPS:
            raise TopologyError(f"dgx_v100 gpu {g} does not carry 6 NVLink lanes")


def _dgx_a100() -> Topology:
    links = [Link("pcie", ("host:0", root), PCIE_PINNED_GBPS) for root in range(4)]
    for u in range(8):
        for v in range(u + 1, 8):
            links.append(Link("nvswitch", (u, v), NVSWITCH_PAIR_GBPS))
    return _single_node(
        "dgx_a100", 8, links,
        pcie_groups={0: [0, 1], 1: [2, 3], 2: [4, 5], 3: [6, 7]},
    )


def _quad_a10() -> Topology:
    links = [Link("pcie", ("host:0", root), PCIE_PINNED_GBPS) for root in range(4)]
    return _single_node(
        "quad_a10", 4, links,
        pcie_groups={0: [0], 1: [1], 2: [2], 3: [3]},
    )


def build_preset(name: str) -> Topology:
    """Build one of the known single-node server topologies."""
    builders = {"dgx_v100": _dgx_v100, "dgx_a100": _dgx_a100, "quad_a10": _quad_a10}
    if name not in builders:
        raise TopologyError(f"unknown topology preset {name!r} (known: {sorted(builders)})")
    return builders[name]()


def build_cluster(preset: str, node_count: int, network_gbps: float = NETWORK_GBPS) -> Topology:
    """Replicate a single-node preset across ``node_count`` nodes joined by
    a flat network (one pipe per node pair, per direction)."""
    if node_count < 1:
        raise TopologyError("node_count must be >= 1")
    base = build_preset(preset)
    if node_count == 1:
        return base
    per = base.gpu_count
    nodes, links, pcie_groups = [], [], {}
    for n in range(node_count):
        off = n * per
        nodes.append({"id": n, "gpus": [g + off for g in range(per)]})
        for link in base.links:
            a, b = link.endpoints
            a2 = a + off if isinstance(a, int) else f"host:{n}"
            b2 = b + off if isinstance(b, int) else b + off
            links.append(Link(link.kind, (a2, b2), link.bandwidth_gbps, link.multiplicity))
        for root, gpus in base.pcie_groups.items():
            pcie_groups[root + n * len(base.pcie_groups)] = [g + off for g in gpus]
    for a in range(node_count):
        for b in range(a + 1, node_count):
            links.append(Link("network", (f"host:{a}", f"host:{b}"), network_gbps))
    topo = Topology(
        name=f"{preset}_x{node_count}",
        gpu_count=per * node_count,
        nodes=nodes,
        links=links,
        pcie_groups=pcie_groups,
        pcie_gbps=base.pcie_gbps,
        pcie_pageable_gbps=base.pcie_pageable_gbps,
        pcie_peer_gbps=base.pcie_peer_gbps,
        network_gbps=network_gbps,
    )
    problems = topo.validate()
    if problems:
        raise TopologyError(f"cluster build inconsistent: {problems}")
    return topo


def load_custom(path: str) -> Topology:
    """Load a topology from a JSON file (see README for the schema)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise TopologyError(f"cannot read topology file {path}: {exc}") from exc
    return from_dict(doc)


def from_dict(doc: dict) -> Topology:
    try:
        rates = doc.get("rates", {})
        links = [
            Link(
                kind=entry["kind"],
                endpoints=tuple(entry["endpoints"]),
                bandwidth_gbps=float(entry["bandwidth_gbps"]),
                multiplicity=int(entry.get("multiplicity", 1)),
            )
            for entry in doc["links"]
        ]
        topo = Topology(
            name=doc.get("name", "custom"),
            gpu_count=int(doc["gpu_count"]),
            nodes=doc["nodes"],
            links=links,
            pcie_groups={int(k): list(v) for k, v in doc["pcie_groups"].items()},
            pcie_gbps=float(rates.get("pcie_gbps", PCIE_PINNED_GBPS)),
            pcie_pageable_gbps=float(rates.get("pcie_pageable_gbps", PCIE_PAGEABLE_GBPS)),
            pcie_peer_gbps=float(rates.get("pcie_peer_gbps", PCIE_PEER_GBPS)),
            network_gbps=float(rates.get("network_gbps", NETWORK_GBPS)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"malformed topology document: {exc}") from exc
    problems = topo.validate()
    if problems:
        raise TopologyError(f"invalid topology: {problems}")
    return topo


class BandwidthMatrix:
    """Residual directed NVLink bandwidth plus per-GPU ingress/egress budgets.

    The matrix is the shared truth between the path selector and the fluid
    engine: claims subtract a path's bottleneck rate from every directed
    edge on the path and from the endpoints' budgets, releases restore them
    exactly.
    """

    def __init__(self, topo: Topology):
        self.topo = topo
        self.capacity = {}
        self.residual = {}
        for (u, v), cap in topo.nvlink_pairs().items():
            for edge in ((u, v), (v, u)):
                self.capacity[edge] = cap
                self.residual[edge] = cap
        budget = {g: topo.nvlink_degree_gbps(g) for g in topo.gpus()}
        self.egress_budget = dict(budget)
        self.ingress_budget = dict(budget)
        self._egress_cap = dict(budget)
        self._ingress_cap = dict(budget)
        self.owners = {edge: [] for edge in self.residual}   # edge -> [func, ...]
        self.held = {}                                       # func -> [(path, rate), ...]

    def edge_residual(self, u: int, v: int) -> float:
        return self.residual.get((u, v), 0.0)

    def edge_is_idle(self, u: int, v: int) -> bool:
        edge = (u, v)
        return edge in self.residual and self.residual[edge] == self.capacity[edge]

    def hold(self, func: str, path: list, rate: float):
        """Reserve ``rate`` GB/s along ``path`` (a GPU id list) for ``func``."""
        edges = list(zip(path, path[1:]))
        for edge in edges:
            if self.residual.get(edge, 0.0) + 1e-12 < rate:
                raise TopologyError(f"hold over capacity on edge {edge}")
        for edge in edges:
            self.residual[edge] -= rate
            self.owners[edge].append(func)
        self.egress_budget[path[0]] -= rate
        self.ingress_budget[path[-1]] -= rate
        self.held.setdefault(func, []).append((list(path), rate))

    def release(self, func: str):
        """Release every path held by ``func``; errors on double release."""
        if func not in self.held:
            raise TopologyError(f"release without claim for {func!r}")
        for path, rate in self.held.pop(func):
            for edge in zip(path, path[1:]):
                self.residual[edge] += rate
                self.owners[edge].remove(func)
            self.egress_budget[path[0]] += rate
            self.ingress_budget[path[-1]] += rate

    def release_path(self, func: str, path: list):
        """Release one specific held path (used when re-planning an evictee)."""
        entries = self.held.get(func, [])
        for i, (p, rate) in enumerate(entries):
            if p == path:
                entries.pop(i)
                for edge in zip(path, path[1:]):
                    self.residual[edge] += rate
                    self.owners[edge].remove(func)
                self.egress_budget[path[0]] += rate
                self.ingress_budget[path[-1]] += rate
                if not entries:
                    del self.held[func]
                return
        raise TopologyError(f"{func!r} does not hold path {path}")

    def holders_of(self, u: int, v: int) -> list:
        return list(self.owners.get((u, v), []))

    def aggregate_of(self, func: str) -> float:
        return sum(rate for _, rate in self.held.get(func, []))

    def check_consistent(self) -> list:
        """Invariant check: residuals within [0, capacity]."""
        problems = []
        for edge, cap in self.capacity.items():
            res = self.residual[edge]
            if res < -1e-9 or res > cap + 1e-9:
                problems.append(f"edge {edge} residual {res} outside [0, {cap}]")
        return problems


def snapshot_matrix(topo: Topology) -> BandwidthMatrix:
    """Fresh matrix: residual equals capacity, no owners, budgets at the
    per-GPU NVLink aggregates."""
    return BandwidthMatrix(topo)
