"""tubesim: discrete-event simulator for GPU-oriented inter-function data
passing in serverless inference workflows."""

__version__ = "0.1.0"

from .strategies import Strategy, strategy_preset
from .topology import BandwidthMatrix, Link, Topology, build_preset, snapshot_matrix
from .workflow import Workflow, preset_workflow

__all__ = [
    "BandwidthMatrix", "Link", "Strategy", "Topology", "Workflow",
    "build_preset", "preset_workflow", "snapshot_matrix", "strategy_preset",
]
