"""Experiment driver: workload generation, trace replay, SLO calibration,
experiment runs and strategy comparisons.

A run is fully described by (config, seed): request arrivals and every
per-request random draw (conditional branches, payload sizes) are fixed up
front, so two runs with the same inputs produce byte-identical reports and
different strategies replay identical workloads.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .dataplane import Location
from .engine import Engine, EngineConfig, RequestSpec
from .simcore import Metrics
from .strategies import Strategy, strategy_preset
from .topology import Topology, build_cluster, build_preset, load_custom as load_topology
from .workflow import (Placement, Workflow, load_custom as load_workflow, place,
                       preset_workflow)

PATTERNS = ("sporadic", "periodic", "bursty")
BURST_FACTOR = 10.0
BURST_FRACTION = 0.05
PERIODIC_JITTER = 0.05


class ConfigError(ValueError):
    pass


@dataclass
class ArrivalTrace:
    pattern: str
    timestamps_ms: list
    mean_rate_rps: float = 0.0

    def __post_init__(self):
        if any(b < a for a, b in zip(self.timestamps_ms, self.timestamps_ms[1:])):
            raise ConfigError("trace timestamps must be non-decreasing")


def gen_workload(pattern: str, mean_rate_rps: float, duration_s: float,
                 seed: int) -> ArrivalTrace:
    """Arrival generator for the three canonical patterns. bursty layers
    10x-rate episodes covering 5% of the duration on a Poisson base."""
    if pattern not in PATTERNS:
        raise ConfigError(f"unknown pattern {pattern!r} (known: {PATTERNS})")
    if mean_rate_rps <= 0:
        raise ConfigError("mean rate must be > 0")
    rng = random.Random(f"workload:{pattern}:{mean_rate_rps}:{duration_s}:{seed}")
    horizon = duration_s * 1000.0
    out = []
    if pattern == "periodic":
        interval = 1000.0 / mean_rate_rps
        t = interval * rng.uniform(1 - PERIODIC_JITTER, 1 + PERIODIC_JITTER)
        while t < horizon:
            out.append(t)
            t += interval * rng.uniform(1 - PERIODIC_JITTER, 1 + PERIODIC_JITTER)
        return ArrivalTrace(pattern, out, mean_rate_rps)

    episodes = []
    if pattern == "bursty":
        ep_len = min(1000.0, BURST_FRACTION * horizon)
        count = max(1, round(BURST_FRACTION * horizon / ep_len))
        seg = horizon / count
        for i in range(count):
            start = i * seg + rng.uniform(0, max(0.0, seg - ep_len))
            episodes.append((start, start + ep_len))

    def rate_at(t_ms: float) -> float:
        for a, b in episodes:
            if a <= t_ms < b:
                return mean_rate_rps * BURST_FACTOR
        return mean_rate_rps

    # Thinning against the peak rate keeps the draw order seed-stable.
    peak = mean_rate_rps * (BURST_FACTOR if pattern == "bursty" else 1.0)
    t = 0.0
    while True:
        t += rng.expovariate(peak / 1000.0)
        if t >= horizon:
            break
        if rng.random() <= rate_at(t) / peak:
            out.append(t)
    return ArrivalTrace(pattern, out, mean_rate_rps)


def ingest_trace(path: str) -> dict:
    """CSV with columns (workflow, timestamp_ms). Returns workflow ->
    ArrivalTrace; malformed rows are reported with line numbers."""
    rows = {}
    errors = []
    warned = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if lineno == 1 and parts[:2] == ["workflow", "timestamp_ms"]:
                continue
            if len(parts) != 2:
                errors.append(f"line {lineno}: expected 2 columns, got {len(parts)}")
                continue
            try:
                ts = float(parts[1])
            except ValueError:
                errors.append(f"line {lineno}: non-numeric timestamp {parts[1]!r}")
                continue
            rows.setdefault(parts[0], []).append(ts)
    if errors:
        raise ConfigError("; ".join(errors))
    traces = {}
    for wf, stamps in rows.items():
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            warned = True
            stamps = sorted(stamps)
        traces[wf] = ArrivalTrace("trace", stamps)
    if warned:
        import sys
        print("warning: trace rows out of order; sorted", file=sys.stderr)
    return traces


# -- request materialization ---------------------------------------------------

def build_requests(wf: Workflow, trace: ArrivalTrace, seed: int,
                   rid_start: int = 0) -> list:
    """Pre-draw all per-request randomness (branch firing, payload sizes)."""
    rng = random.Random(f"requests:{wf.name}:{seed}")
    specs = []
    for i, t in enumerate(trace.timestamps_ms):
        fired = set()
        edge_bytes = {}
        for e in wf.edges:
            hit = e.probability >= 1.0 or rng.random() < e.probability
            size = e.size.sample(rng)
            if hit:
                fired.add((e.src, e.dst))
                edge_bytes[(e.src, e.dst)] = size
        specs.append(RequestSpec(
            rid=rid_start + i, workflow=wf.name, arrival_ms=t,
            edge_bytes=edge_bytes, fired=fired,
            input_bytes=wf.input_size.sample(rng),
            response_bytes=wf.response_size.sample(rng)))
    return specs


# -- SLO calibration -------------------------------------------------------------

def unloaded_runtime_ms(wf: Workflow, topo: Topology, placement: Placement,
                        engine_cfg: EngineConfig) -> float:
    """Critical-path runtime of one request with expected payload sizes on
    an otherwise idle server, using the reference (all optimizations on)
    transfer model so SLOs are identical across strategies."""
    from .dataplane import Dataplane, plan_latency_model
    from .topology import snapshot_matrix

    strat = strategy_preset("faastube")
    plane = Dataplane(topo, strat, snapshot_matrix(topo), engine_cfg.chunk_bytes,
                      engine_cfg.intra_gpu_map_ms)

    def loc(fid):
        kind, where = placement.mapping[fid]
        return Location(topo.node_of(where), where) if kind == "gpu" \
            else Location(where, None)

    def xfer(src_loc, dst_loc, size):
        plan = plane.fetch_plan(src_loc, dst_loc, size)
        latency = plan_latency_model(plan)
        plane.release_claim(plan)
        return latency

    done = {}
    for fid in wf.topo_order():
        f = wf.function(fid)
        where = loc(fid)
        ins = wf.in_edges(fid)
        if not ins:
            ready = 0.0 if where.on_host else xfer(
                Location(where.node, None), where, wf.input_size.expected_bytes())
        else:
            ready = max(done[e.src] + xfer(loc(e.src), where, e.size.expected_bytes())
                        for e in ins)
        done[fid] = ready + f.compute_latency_ms
    finish = 0.0
    for fid in wf.sinks():
        where = loc(fid)
        resp = 0.0 if where.on_host else xfer(
            where, Location(where.node, None), wf.response_size.expected_bytes())
        finish = max(finish, done[fid] + resp)
    return finish


def calibrate_slo(wf: Workflow, topo: Topology, placement: Placement,
                  engine_cfg: EngineConfig, slo_scale: float = 1.5):
    """Workflow SLO = scale x unloaded runtime; per-function stage SLOs
    split the workflow SLO proportionally to compute time."""
    runtime = unloaded_runtime_ms(wf, topo, placement, engine_cfg)
    wf.slo_ms = slo_scale * runtime
    total_compute = sum(f.compute_latency_ms for f in wf.functions) or 1.0
    for f in wf.functions:
        f.slo_ms = wf.slo_ms * f.compute_latency_ms / total_compute
        f.infer_latency_ms = f.compute_latency_ms
    return runtime


# -- experiment configuration ------------------------------------------------------

@dataclass
class WorkflowEntry:
    workflow: Workflow
    pattern: str = "sporadic"
    mean_rate_rps: float = 5.0
    slo_scale: float = 1.5
    trace: ArrivalTrace | None = None


@dataclass
class ExperimentConfig:
    topology: Topology
    workflows: list
    strategy: Strategy
    duration_s: float
    seed: int = 0
    occupancy_limit: int = 1
    engine: EngineConfig = field(default_factory=EngineConfig)
    drain_ms: float = 60000.0
    label: str = ""

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None) -> "ExperimentConfig":
        problems = []
        topo = None
        try:
            tdoc = doc.get("topology", {})
            if "file" in tdoc:
                topo = load_topology(tdoc["file"])
            else:
                preset = tdoc.get("preset", "dgx_v100")
                nodes = int(tdoc.get("nodes", 1))
                topo = build_cluster(preset, nodes) if nodes > 1 else build_preset(preset)
        except Exception as exc:
            problems.append(f"topology: {exc}")
        sdoc = doc.get("strategy", {"name": "faastube"})
        strategy = None
        try:
            toggles = {k: v for k, v in sdoc.items() if k != "name"}
            strategy = strategy_preset(sdoc.get("name", "faastube"), **toggles)
        except Exception as exc:
            problems.append(f"strategy: {exc}")
        tr = doc.get("trace", {})
        entries = []
        for wdoc in doc.get("workflows", [{"preset": "yelp"}]):
            try:
                wf = (load_workflow(wdoc["file"]) if "file" in wdoc
                      else preset_workflow(wdoc.get("preset", "yelp")))
                entries.append(WorkflowEntry(
                    workflow=wf,
                    pattern=wdoc.get("pattern", tr.get("pattern", "sporadic")),
                    mean_rate_rps=float(wdoc.get("mean_rate_rps",
                                                 tr.get("mean_rate_rps", 5.0))),
                    slo_scale=float(wdoc.get("slo_scale", 1.5))))
            except Exception as exc:
                problems.append(f"workflow {wdoc}: {exc}")
        engine_cfg = EngineConfig()
        costs = doc.get("costs", {})
        limits = doc.get("limits", {})
        for key, attr, scale in (
                ("chunk_mb", "chunk_bytes", 1e6),
                ("batch_chunks", "batch_chunks", 1),
                ("pinned_cost_ms_per_mb", "pinned_cost_ms_per_mb", 1),
                ("ring_capacity_mb", "ring_capacity_bytes", 1e6),
                ("pageable_rate_gbps", "pageable_rate_gbps", 1),
                ("native_alloc_ms", "native_alloc_ms", 1),
                ("intra_gpu_map_ms", "intra_gpu_map_ms", 1),
                ("local_lookup_ms", "local_lookup_ms", 1),
                ("global_lookup_ms", "global_lookup_ms", 1),
                ("sync_period_ms", "sync_period_ms", 1)):
            if key in costs:
                value = costs[key] * scale
                setattr(engine_cfg, attr, int(value) if attr.endswith("bytes")
                        or attr == "batch_chunks" else float(value))
        if "pool_floor_mb" in limits:
            engine_cfg.pool_floor_bytes = float(limits["pool_floor_mb"]) * 1e6
        if "capacity_limit_mb" in limits:
            engine_cfg.capacity_limit_bytes = float(limits["capacity_limit_mb"]) * 1e6
        occupancy = int(doc.get("placement", {}).get("occupancy_limit", 1))
        engine_cfg.occupancy_limit = occupancy
        if problems:
            raise ConfigError("; ".join(problems))
        return cls(
            topology=topo, workflows=entries, strategy=strategy,
            duration_s=float(tr.get("duration_s", doc.get("duration_s", 10.0))),
            seed=int(seed if seed is not None else doc.get("seed", 0)),
            occupancy_limit=occupancy, engine=engine_cfg,
            label=doc.get("label", ""))

    @classmethod
    def load(cls, path: str, seed: int | None = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, seed)

    def echo(self) -> dict:
        """The exact parameter values a run used, embedded in its report."""
        return {
            "label": self.label,
            "seed": self.seed,
            "duration_s": self.duration_s,
            "topology": self.topology.name,
            "strategy": {
                "name": self.strategy.name,
                "host_oriented": self.strategy.host_oriented,
                "parallel_pcie": self.strategy.parallel_pcie,
                "unified_interface": self.strategy.unified_interface,
                "pcie_sched": self.strategy.pcie_sched,
                "nvlink_sched": self.strategy.nvlink_sched,
                "pool": self.strategy.pool,
                "migration": self.strategy.migration,
            },
            "workflows": [
                {"name": e.workflow.name, "pattern": e.pattern,
                 "mean_rate_rps": e.mean_rate_rps, "slo_scale": e.slo_scale,
                 "slo_ms": round(e.workflow.slo_ms, 6) if e.workflow.slo_ms else None,
                 "definition": e.workflow.to_dict()}
                for e in self.workflows
            ],
            "costs": {
                "chunk_bytes": self.engine.chunk_bytes,
                "batch_chunks": self.engine.batch_chunks,
                "pinned_cost_ms_per_mb": self.engine.pinned_cost_ms_per_mb,
                "native_alloc_ms": self.engine.native_alloc_ms,
                "pool_floor_bytes": self.engine.pool_floor_bytes,
                "capacity_limit_bytes": self.engine.capacity_limit_bytes,
            },
        }


# -- running --------------------------------------------------------------------

def prepare_engine(cfg: ExperimentConfig) -> Engine:
    engine = Engine(cfg.topology, cfg.strategy, cfg.engine, cfg.seed)
    occupancy = {}
    rid = 0
    for entry in cfg.workflows:
        placement = place(entry.workflow, cfg.topology, occupancy,
                          cfg.occupancy_limit)
        for fid, (kind, where) in placement.mapping.items():
            if kind == "gpu":
                occupancy[where] = occupancy.get(where, 0) + 1
        calibrate_slo(entry.workflow, cfg.topology, placement, cfg.engine,
                      entry.slo_scale)
        trace = entry.trace or gen_workload(entry.pattern, entry.mean_rate_rps,
                                            cfg.duration_s, cfg.seed)
        requests = build_requests(entry.workflow, trace, cfg.seed, rid_start=rid)
        rid += len(requests) + 1000
        engine.add_workflow(entry.workflow, placement, requests)
    return engine


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Run one configuration; returns the report dict and, when out_dir is
    given, writes CSV/JSON/figures there atomically."""
    engine = prepare_engine(cfg)
    metrics = engine.run_until(cfg.duration_s * 1000.0 + cfg.drain_ms)
    report = {
        "config": cfg.echo(),
        "summary": metrics.summary(cfg.duration_s * 1000.0),
    }
    if out_dir is not None:
        from . import report as report_mod
        report_mod.write_run_report(out_dir, cfg, metrics, report)
    return report


def max_throughput(cfg: ExperimentConfig, slo_ms: float | None = None,
                   rate_hi: float = 256.0, iterations: int = 10) -> dict:
    """Binary search for the highest offered rate whose P99 stays within
    the SLO with a bounded queue (>= 95% of offered requests completed)."""
    if len(cfg.workflows) != 1:
        raise ConfigError("max_throughput expects a single-workflow config")
    entry = cfg.workflows[0]

    def trial(rate: float):
        probe = ExperimentConfig(
            topology=cfg.topology, workflows=[WorkflowEntry(
                workflow=entry.workflow, pattern=entry.pattern,
                mean_rate_rps=rate, slo_scale=entry.slo_scale)],
            strategy=cfg.strategy, duration_s=cfg.duration_s, seed=cfg.seed,
            occupancy_limit=cfg.occupancy_limit, engine=cfg.engine)
        rep = run_experiment(probe)["summary"]
        offered = rate * cfg.duration_s
        ok = (rep.get("requests_completed", 0) >= 0.95 * offered
              and rep.get("p99_ms") is not None
              and rep["p99_ms"] <= (slo_ms if slo_ms else entry.workflow.slo_ms or 1e12))
        return ok, rep

    lo, hi = 0.0, None
    rate = 1.0
    last_ok = None
    while rate <= rate_hi:
        ok, rep = trial(rate)
        if ok:
            lo, last_ok = rate, rep
            rate *= 2
        else:
            hi = rate
            break
    if hi is None:
        return {"max_rps": lo, "summary": last_ok}
    if lo == 0.0:
        return {"max_rps": 0.0, "summary": None,
                "diagnostic": "SLO unachievable at any probed rate"}
    for _ in range(iterations):
        mid = (lo + hi) / 2
        ok, rep = trial(mid)
        if ok:
            lo, last_ok = mid, rep
        else:
            hi = mid
    return {"max_rps": round(lo, 3), "summary": last_ok}


def compare(configs: list, out_dir: str | None = None) -> list:
    """Side-by-side table for configs differing only in strategy."""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    base = configs[0]
    for other in configs[1:]:
        if other.topology.name != base.topology.name:
            raise ConfigError("compare: topologies differ")
        if [e.workflow.name for e in other.workflows] != \
                [e.workflow.name for e in base.workflows]:
            raise ConfigError("compare: workflow sets differ")
        if (other.seed, other.duration_s) != (base.seed, base.duration_s):
            raise ConfigError("compare: trace parameters differ")
    rows = []
    baseline_p99 = None
    for cfg in configs:
        summary = run_experiment(cfg)["summary"]
        p99 = summary.get("p99_ms")
        if baseline_p99 is None:
            baseline_p99 = p99
        reduction = (None if not p99 or not baseline_p99
                     else round(100.0 * (baseline_p99 - p99) / baseline_p99, 3))
        rows.append({
            "strategy": cfg.strategy.name, "label": cfg.label,
            "p50_ms": summary.get("p50_ms"), "p99_ms": p99,
            "throughput_rps": summary.get("throughput_rps"),
            "slo_violation_rate": summary.get("slo_violation_rate"),
            "latency_reduction_vs_first_pct": reduction,
        })
    if out_dir is not None:
        from . import report as report_mod
        report_mod.write_compare_report(out_dir, rows)
    return rows
