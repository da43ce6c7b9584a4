"""Serverless inference workflows as DAGs of CPU and GPU functions.

Edge payload sizes are config defaults, not measured ground truth; media
stages move hundreds of MB and detector outputs scale with a fluctuating
per-request object count. Reports echo whatever values a run used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .topology import Topology

MB = 10**6

PRESET_NAMES = ("traffic", "driving", "video", "image", "social", "yelp")


class WorkflowError(ValueError):
    pass


@dataclass
class SizeSpec:
    """Constant payload or per-object payload with a fluctuating count."""

    const_bytes: float = 0.0
    per_object_bytes: float = 0.0
    count_range: tuple = (1, 1)

    def expected_bytes(self) -> float:
        if self.per_object_bytes:
            lo, hi = self.count_range
            return self.per_object_bytes * (lo + hi) / 2.0
        return self.const_bytes

    def sample(self, rng) -> float:
        if self.per_object_bytes:
            lo, hi = self.count_range
            return self.per_object_bytes * rng.randint(lo, hi)
        return self.const_bytes

    def to_dict(self) -> dict:
        if self.per_object_bytes:
            return {"per_object_mb": self.per_object_bytes / MB,
                    "count_range": list(self.count_range)}
        return {"const_mb": self.const_bytes / MB}

    @classmethod
    def from_dict(cls, doc) -> "SizeSpec":
        if isinstance(doc, (int, float)):
            return cls(const_bytes=float(doc) * MB)
        if "per_object_mb" in doc:
            lo, hi = doc.get("count_range", [1, 1])
            return cls(per_object_bytes=float(doc["per_object_mb"]) * MB,
                       count_range=(int(lo), int(hi)))
        return cls(const_bytes=float(doc["const_mb"]) * MB)


def size_mb(x: float) -> SizeSpec:
    return SizeSpec(const_bytes=x * MB)


def size_per_object(mb_each: float, lo: int, hi: int) -> SizeSpec:
    return SizeSpec(per_object_bytes=mb_each * MB, count_range=(lo, hi))


@dataclass
class FunctionSpec:
    id: str
    kind: str                      # "cFunc" | "gFunc"
    compute_latency_ms: float
    slo_ms: float | None = None    # per-stage target; set by SLO calibration
    infer_latency_ms: float | None = None

    def __post_init__(self):
        if self.kind not in ("cFunc", "gFunc"):
            raise WorkflowError(f"{self.id}: kind must be cFunc or gFunc")
        if self.compute_latency_ms < 0:
            raise WorkflowError(f"{self.id}: compute latency must be >= 0")
        if self.infer_latency_ms is None:
            self.infer_latency_ms = self.compute_latency_ms


@dataclass
class Edge:
    src: str
    dst: str
    size: SizeSpec
    probability: float = 1.0


@dataclass
class Workflow:
    name: str
    functions: list
    edges: list
    pattern: str                           # sequence | condition | fan-in | fan-out
    input_size: SizeSpec = field(default_factory=lambda: size_mb(1))
    response_size: SizeSpec = field(default_factory=lambda: size_mb(1))
    slo_ms: float | None = None

    def __post_init__(self):
        self._by_id = {f.id: f for f in self.functions}

    def function(self, fid: str) -> FunctionSpec:
        return self._by_id[fid]

    def gfuncs(self) -> list:
        return [f.id for f in self.functions if f.kind == "gFunc"]

    def entries(self) -> list:
        targets = {e.dst for e in self.edges}
        return [f.id for f in self.functions if f.id not in targets]

    def sinks(self) -> list:
        sources = {e.src for e in self.edges}
        return [f.id for f in self.functions if f.id not in sources]

    def in_edges(self, fid: str) -> list:
        return [e for e in self.edges if e.dst == fid]

    def out_edges(self, fid: str) -> list:
        return [e for e in self.edges if e.src == fid]

    def topo_order(self) -> list:
        indeg = {f.id: 0 for f in self.functions}
        for e in self.edges:
            indeg[e.dst] += 1
        ready = sorted(fid for fid, d in indeg.items() if d == 0)
        out = []
        while ready:
            fid = ready.pop(0)
            out.append(fid)
            for e in self.out_edges(fid):
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
            ready.sort()
        if len(out) != len(self.functions):
            raise WorkflowError(f"{self.name}: cycle detected")
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pattern": self.pattern,
            "functions": [
                {"id": f.id, "kind": f.kind, "compute_latency_ms": f.compute_latency_ms,
                 "slo_ms": f.slo_ms, "infer_latency_ms": f.infer_latency_ms}
                for f in self.functions
            ],
            "edges": [
                {"src": e.src, "dst": e.dst, "size": e.size.to_dict(),
                 "probability": e.probability}
                for e in self.edges
            ],
            "input_size": self.input_size.to_dict(),
            "response_size": self.response_size.to_dict(),
            "slo_ms": self.slo_ms,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Workflow":
        try:
            wf = cls(
                name=doc["name"],
                pattern=doc.get("pattern", "sequence"),
                functions=[
                    FunctionSpec(f["id"], f["kind"], float(f["compute_latency_ms"]),
                                 f.get("slo_ms"), f.get("infer_latency_ms"))
                    for f in doc["functions"]
                ],
                edges=[
                    Edge(e["src"], e["dst"], SizeSpec.from_dict(e["size"]),
                         float(e.get("probability", 1.0)))
                    for e in doc["edges"]
                ],
                input_size=SizeSpec.from_dict(doc.get("input_size", {"const_mb": 1})),
                response_size=SizeSpec.from_dict(doc.get("response_size", {"const_mb": 1})),
                slo_ms=doc.get("slo_ms"),
            )
        except (KeyError, TypeError) as exc:
            raise WorkflowError(f"malformed workflow document: {exc}") from exc
        problems = validate_dag(wf)
        if problems:
            raise WorkflowError(f"invalid workflow: {problems}")
        return wf


def load_custom(path: str) -> Workflow:
    try:
        with open(path) as fh:
            return Workflow.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise WorkflowError(f"cannot read workflow file {path}: {exc}") from exc


def validate_dag(wf: Workflow) -> list:
    """Empty list iff the workflow is well-formed and acyclic."""
    problems = []
    ids = {f.id for f in wf.functions}
    if len(ids) != len(wf.functions):
        problems.append("duplicate function ids")
    for e in wf.edges:
        if e.src not in ids:
            problems.append(f"edge {e.src}->{e.dst}: unknown producer {e.src}")
        if e.dst not in ids:
            problems.append(f"edge {e.src}->{e.dst}: unknown consumer {e.dst}")
        if not (0.0 < e.probability <= 1.0):
            problems.append(f"edge {e.src}->{e.dst}: probability {e.probability} outside (0, 1]")
    if not problems:
        try:
            wf.topo_order()
        except WorkflowError:
            problems.append("cycle in workflow DAG")
    return problems


# -- Table-style presets ----------------------------------------------------

def preset_workflow(name: str) -> Workflow:
    builders = {
        "traffic": _traffic, "driving": _driving, "video": _video,
        "image": _image, "social": _social, "yelp": _yelp,
    }
    if name not in builders:
        raise WorkflowError(f"unknown workflow preset {name!r} (known: {sorted(builders)})")
    wf = builders[name]()
    problems = validate_dag(wf)
    if problems:
        raise WorkflowError(f"{name} preset inconsistent: {problems}")
    return wf


def _traffic() -> Workflow:
    # Object detection feeding two conditional recognition branches.
    return Workflow(
        name="traffic", pattern="condition",
        functions=[
            FunctionSpec("decode", "cFunc", 12.0),
            FunctionSpec("preproc", "gFunc", 8.0),
            FunctionSpec("yolo_det", "gFunc", 25.0),
            FunctionSpec("resnet_ped", "gFunc", 10.0),
            FunctionSpec("resnet_veh", "gFunc", 10.0),
        ],
        edges=[
            Edge("decode", "preproc", size_mb(256)),
            Edge("preproc", "yolo_det", size_mb(256)),
            Edge("yolo_det", "resnet_ped", size_per_object(4, 16, 48), probability=0.6),
            Edge("yolo_det", "resnet_veh", size_per_object(4, 16, 48), probability=0.6),
        ],
        input_size=size_mb(64), response_size=size_mb(1),
    )


def _driving() -> Workflow:
    return Workflow(
        name="driving", pattern="sequence",
        functions=[
            FunctionSpec("decode", "cFunc", 12.0),
            FunctionSpec("denoise", "gFunc", 8.0),
            FunctionSpec("yolo_seg", "gFunc", 25.0),
            FunctionSpec("blur", "cFunc", 6.0),
        ],
        edges=[
            Edge("decode", "denoise", size_mb(256)),
            Edge("denoise", "yolo_seg", size_mb(256)),
            Edge("yolo_seg", "blur", size_mb(256)),
        ],
        input_size=size_mb(64), response_size=size_mb(1),
    )


def _video() -> Workflow:
    # Three parallel face detectors feeding one recognizer (fan-in).
    return Workflow(
        name="video", pattern="fan-in",
        functions=[
            FunctionSpec("decode", "cFunc", 12.0),
            FunctionSpec("face_det_0", "gFunc", 20.0),
            FunctionSpec("face_det_1", "gFunc", 20.0),
            FunctionSpec("face_det_2", "gFunc", 20.0),
            FunctionSpec("recognize", "gFunc", 12.0),
        ],
        edges=[
            Edge("decode", "face_det_0", size_mb(128)),
            Edge("decode", "face_det_1", size_mb(128)),
            Edge("decode", "face_det_2", size_mb(128)),
            Edge("face_det_0", "recognize", size_per_object(4, 16, 48)),
            Edge("face_det_1", "recognize", size_per_object(4, 16, 48)),
            Edge("face_det_2", "recognize", size_per_object(4, 16, 48)),
        ],
        input_size=size_mb(64), response_size=size_mb(1),
    )


def _image() -> Workflow:
    return Workflow(
        name="image", pattern="fan-out",
        functions=[
            FunctionSpec("decode", "cFunc", 10.0),
            FunctionSpec("denoise", "gFunc", 8.0),
            FunctionSpec("resnet", "gFunc", 10.0),
            FunctionSpec("alexnet", "gFunc", 9.0),
            FunctionSpec("aggregate", "cFunc", 4.0),
        ],
        edges=[
            Edge("decode", "denoise", size_mb(128)),
            Edge("denoise", "resnet", size_mb(128)),
            Edge("denoise", "alexnet", size_mb(128)),
            Edge("resnet", "aggregate", size_mb(2)),
            Edge("alexnet", "aggregate", size_mb(2)),
        ],
        input_size=size_mb(32), response_size=size_mb(1),
    )


def _social() -> Workflow:
    return Workflow(
        name="social", pattern="condition",
        functions=[
            FunctionSpec("decode", "cFunc", 8.0),
            FunctionSpec("preprocess", "gFunc", 6.0),
            FunctionSpec("ocr", "gFunc", 18.0),
            FunctionSpec("bert", "gFunc", 15.0),
        ],
        edges=[
            Edge("decode", "preprocess", size_mb(192)),
            Edge("preprocess", "ocr", size_mb(128)),
            Edge("ocr", "bert", size_mb(96), probability=0.75),
        ],
        input_size=size_mb(16), response_size=size_mb(1),
    )


def _yelp() -> Workflow:
    return Workflow(
        name="yelp", pattern="sequence",
        functions=[
            FunctionSpec("bert_screen", "gFunc", 15.0),
            FunctionSpec("bert_reply", "gFunc", 15.0),
        ],
        edges=[Edge("bert_screen", "bert_reply", size_mb(128))],
        input_size=size_mb(8), response_size=size_mb(1),
    )


# -- placement ---------------------------------------------------------------

@dataclass
class Placement:
    """function id -> ("gpu", gpu id) or ("host", node id)."""

    mapping: dict

    def gpu_of(self, fid: str):
        kind, where = self.mapping[fid]
        return where if kind == "gpu" else None

    def gpu_pairs(self, wf: Workflow) -> list:
        pairs = []
        for e in wf.edges:
            a, b = self.gpu_of(e.src), self.gpu_of(e.dst)
            if a is not None and b is not None and a != b:
                pairs.append((a, b))
        return pairs


class PlacementError(RuntimeError):
    pass


def place(wf: Workflow, topo: Topology, occupancy: dict | None = None,
          limit_per_gpu: int = 1) -> Placement:
    """Greedy NVLink-aware placement: heaviest edges first onto the free
    GPU pair with the best direct bandwidth, leftovers onto the free GPUs
    with the largest NVLink aggregates. Deterministic for fixed inputs."""
    occupancy = dict(occupancy or {})
    free = [g for g in topo.gpus() if occupancy.get(g, 0) < limit_per_gpu]
    gfuncs = wf.gfuncs()
    if len(gfuncs) > len(free):
        raise PlacementError(
            f"{wf.name}: {len(gfuncs)} gFuncs but only {len(free)} free GPUs")
    mapping = {}

    def take(gpu, fid):
        mapping[fid] = ("gpu", gpu)
        free.remove(gpu)

    g_edges = [e for e in wf.edges
               if wf.function(e.src).kind == "gFunc" and wf.function(e.dst).kind == "gFunc"]
    g_edges.sort(key=lambda e: (-e.size.expected_bytes() * e.probability, e.src, e.dst))
    for e in g_edges:
        placed_s = e.src in mapping
        placed_d = e.dst in mapping
        if placed_s and placed_d:
            continue
        if not placed_s and not placed_d:
            best = None
            for u in free:
                for v in free:
                    if u == v:
                        continue
                    bw = topo.pair_bandwidth(u, v)
                    if best is None or bw > best[0] + 1e-12:
                        best = (bw, u, v)
            if best is None:
                raise PlacementError(f"{wf.name}: no free GPU pair for edge {e.src}->{e.dst}")
            take(best[1], e.src)
            take(best[2], e.dst)
        else:
            anchor = mapping[e.src][1] if placed_s else mapping[e.dst][1]
            pending = e.dst if placed_s else e.src
            best = None
            for g in free:
                bw = topo.pair_bandwidth(anchor, g)
                if best is None or bw > best[0] + 1e-12:
                    best = (bw, g)
            if best is None:
                raise PlacementError(f"{wf.name}: no free GPU for {pending}")
            take(best[1], pending)
    for fid in gfuncs:
        if fid not in mapping:
            best = max(free, key=lambda g: (topo.nvlink_degree_gbps(g), -g))
            take(best, fid)
    for f in wf.functions:
        if f.kind == "cFunc":
            mapping[f.id] = ("host", 0)
    # cFuncs live with the node hosting the bulk of the workflow's GPUs.
    gpu_nodes = sorted(topo.node_of(w[1]) for w in mapping.values() if w[0] == "gpu")
    if gpu_nodes:
        home = max(set(gpu_nodes), key=lambda n: (gpu_nodes.count(n), -n))
        for f in wf.functions:
            if f.kind == "cFunc":
                mapping[f.id] = ("host", home)
    return Placement(mapping)


def partition_across_nodes(wf: Workflow, cluster: Topology,
                           free_gpus_per_node: dict | None = None) -> dict:
    """Greedy grouping of functions onto nodes that keeps consecutive DAG
    stages together; returns node id -> [function id, ...]."""
    if not cluster.nodes:
        raise WorkflowError("cluster has no nodes")
    if free_gpus_per_node is None:
        free_gpus_per_node = {n["id"]: len(n["gpus"]) for n in cluster.nodes}
    node_ids = sorted(free_gpus_per_node)
    if len(node_ids) == 1:
        return {node_ids[0]: [f.id for f in wf.functions]}
    capacity = dict(free_gpus_per_node)
    if sum(capacity.values()) < len(wf.gfuncs()):
        raise WorkflowError(f"{wf.name}: cluster lacks GPUs for all gFuncs")
    assignment = {}
    order = wf.topo_order()
    current = 0
    for fid in order:
        if wf.function(fid).kind == "cFunc":
            continue
        while capacity[node_ids[current]] <= 0:
            current += 1
        node = node_ids[current]
        assignment[fid] = node
        capacity[node] -= 1
    # cFuncs follow their first gFunc consumer (or producer).
    for fid in order:
        if fid in assignment:
            continue
        downstream = [assignment[e.dst] for e in wf.out_edges(fid) if e.dst in assignment]
        upstream = [assignment[e.src] for e in wf.in_edges(fid) if e.src in assignment]
        assignment[fid] = (downstream or upstream or [node_ids[0]])[0]
    groups = {}
    for fid, node in assignment.items():
        groups.setdefault(node, []).append(fid)
    for node in groups:
        groups[node].sort(key=order.index)
    return groups


def cross_node_edges(wf: Workflow, groups: dict) -> list:
    where = {fid: node for node, fids in groups.items() for fid in fids}
    return [e for e in wf.edges if where[e.src] != where[e.dst]]
