"""Data-passing strategy presets and their toggles.

The host-oriented baselines stage every inter-gFunc payload through host
memory; the GPU-oriented ones exchange data in GPU memory and differ in
how much scheduling and memory management they layer on top.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

STRATEGY_NAMES = ("faastube", "faastube_star", "infless_plus", "deepplan_plus")


@dataclass(frozen=True)
class Strategy:
    name: str
    host_oriented: bool            # stage gFunc-to-gFunc data through host memory
    parallel_pcie: bool            # use all PCIe roots for host<->GPU payloads
    unified_interface: bool        # local pipe lookups instead of per-op RPC
    pcie_sched: bool               # SLO-aware partitioning + warm pinned ring
    nvlink_sched: bool             # parallel NVLink paths (else direct edge only)
    pool: str                      # "autoscale" | "cache_all" | "none"
    migration: str                 # "queue_aware" | "lru" | "none"

    def gpu_store(self) -> bool:
        return not self.host_oriented

    def with_toggles(self, **kwargs) -> "Strategy":
        return replace(self, **kwargs)


_PRESETS = {
    # Host-oriented, single PCIe link, sequential copies through host memory.
    "infless_plus": Strategy(
        "infless_plus", host_oriented=True, parallel_pcie=False,
        unified_interface=True, pcie_sched=False, nvlink_sched=False,
        pool="none", migration="none"),
    # Host-oriented but drives all PCIe roots in parallel with native sharing.
    "deepplan_plus": Strategy(
        "deepplan_plus", host_oriented=True, parallel_pcie=True,
        unified_interface=True, pcie_sched=False, nvlink_sched=False,
        pool="none", migration="none"),
    # GPU-oriented on every link, but direct NVLink paths only and
    # temporary (uncached) pinned and GPU allocations.
    "faastube_star": Strategy(
        "faastube_star", host_oriented=False, parallel_pcie=True,
        unified_interface=True, pcie_sched=False, nvlink_sched=False,
        pool="none", migration="none"),
    # Everything on.
    "faastube": Strategy(
        "faastube", host_oriented=False, parallel_pcie=True,
        unified_interface=True, pcie_sched=True, nvlink_sched=True,
        pool="autoscale", migration="queue_aware"),
}


def strategy_preset(name: str, **overrides) -> Strategy:
    if name not in _PRESETS:
        raise ValueError(f"unknown strategy {name!r} (known: {sorted(_PRESETS)})")
    strat = _PRESETS[name]
    return strat.with_toggles(**overrides) if overrides else strat
