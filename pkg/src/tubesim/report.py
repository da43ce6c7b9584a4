"""Report rendering: delimited per-request output, JSON summaries and
matplotlib figures written next to them.

Files are written atomically (tmp + rename) so parallel sweeps never leave
half-written reports; CSV/JSON bytes are deterministic for a fixed run.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .simcore import PHASES, Metrics

CSV_COLUMNS = ("rid", "workflow", "arrival_ms", "end_ms", "latency_ms",
               "queuing_ms", "host_to_gfunc_ms", "gfunc_to_gfunc_ms",
               "compute_ms", "internode_ms", "slo_ms", "slo_met")

_PHASE_COLORS = {
    "queuing": "#bbbbbb",
    "host_to_gfunc": "#4c72b0",
    "gfunc_to_gfunc": "#dd8452",
    "compute": "#55a868",
    "internode": "#c44e52",
}


def _atomic_write(path: str, data: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def requests_csv(metrics: Metrics) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for rec in metrics.completed():
        latency = rec["end_ms"] - rec["arrival_ms"]
        met = int(latency <= rec["slo_ms"] + 1e-9)
        lines.append(",".join([
            str(rec["rid"]), rec["workflow"], _fmt(rec["arrival_ms"]),
            _fmt(rec["end_ms"]), _fmt(latency),
            _fmt(rec["queuing"]), _fmt(rec["host_to_gfunc"]),
            _fmt(rec["gfunc_to_gfunc"]), _fmt(rec["compute"]),
            _fmt(rec["internode"]),
            _fmt(rec["slo_ms"]) if rec["slo_ms"] != float("inf") else "inf",
            str(met)]))
    return "\n".join(lines) + "\n"


def memory_csv(metrics: Metrics) -> str:
    lines = ["time_ms,pool_bytes,stored_bytes,migrated_bytes"]
    for t, pool, stored, migrated in metrics.pool_timeline:
        lines.append(f"{_fmt(t)},{_fmt(pool)},{_fmt(stored)},{_fmt(migrated)}")
    return "\n".join(lines) + "\n"


def write_run_report(out_dir: str, cfg, metrics: Metrics, report: dict):
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "requests.csv"), requests_csv(metrics))
    _atomic_write(os.path.join(out_dir, "summary.json"),
                  json.dumps(report, indent=2, sort_keys=True) + "\n")
    _atomic_write(os.path.join(out_dir, "memory_timeline.csv"), memory_csv(metrics))
    phase_breakdown_figure(metrics, os.path.join(out_dir, "phase_breakdown.png"))
    latency_cdf_figure(metrics, os.path.join(out_dir, "latency_cdf.png"))
    if metrics.pool_timeline:
        memory_timeline_figure(metrics, os.path.join(out_dir, "memory_timeline.png"))


def phase_breakdown_figure(metrics: Metrics, path: str):
    done = metrics.completed()
    if not done:
        return
    workflows = sorted({r["workflow"] for r in done})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bottoms = [0.0] * len(workflows)
    for phase in PHASES:
        means = []
        for wf in workflows:
            vals = [r[phase] for r in done if r["workflow"] == wf]
            means.append(sum(vals) / len(vals))
        ax.bar(workflows, means, bottom=bottoms, label=phase,
               color=_PHASE_COLORS[phase])
        bottoms = [b + m for b, m in zip(bottoms, means)]
    ax.set_ylabel("mean latency (ms)")
    ax.set_title("per-phase latency breakdown")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def latency_cdf_figure(metrics: Metrics, path: str):
    lats = sorted(metrics.latencies())
    if not lats:
        return
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ys = [(i + 1) / len(lats) for i in range(len(lats))]
    ax.plot(lats, ys, drawstyle="steps-post")
    ax.set_xlabel("end-to-end latency (ms)")
    ax.set_ylabel("CDF")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def memory_timeline_figure(metrics: Metrics, path: str):
    ts = [row[0] for row in metrics.pool_timeline]
    pool = [row[1] / 1e6 for row in metrics.pool_timeline]
    stored = [row[2] / 1e6 for row in metrics.pool_timeline]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(ts, pool, label="pool MB", drawstyle="steps-post")
    ax.plot(ts, stored, label="stored MB", drawstyle="steps-post")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("MB")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def compare_csv(rows: list) -> str:
    cols = ["strategy", "label", "p50_ms", "p99_ms", "throughput_rps",
            "slo_violation_rate", "latency_reduction_vs_first_pct"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join("" if row[c] is None else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def write_compare_report(out_dir: str, rows: list):
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "compare.csv"), compare_csv(rows))
    _atomic_write(os.path.join(out_dir, "compare.json"),
                  json.dumps(rows, indent=2, sort_keys=True) + "\n")
    labels = [r["label"] or r["strategy"] for r in rows]
    p99 = [r["p99_ms"] or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.bar(labels, p99, color="#4c72b0")
    ax.set_ylabel("P99 latency (ms)")
    ax.set_title("strategy comparison")
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "compare.png"), dpi=120)
    plt.close(fig)
