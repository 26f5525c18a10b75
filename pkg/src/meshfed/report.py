"""Run artifacts: delimited and structured metric exports plus figures.

Column orders are stable and documented in docs/metrics-format.md.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .sim import MetricsLog


def _structured(log: MetricsLog) -> dict:
    return {
        "scenario": log.scenario,
        "node_columns": ["tick", "node", "round", "mode", "loss", "dist_to_mean",
                         "peer_count", "digest"],
        "node_rows": [list(r) for r in log.node_rows],
        "transport_columns": ["tick", "frames_sent", "frames_delivered",
                              "frames_dropped", "frames_in_flight"],
        "transport_rows": [list(r) for r in log.transport_rows],
        "events": log.events,
        "summary": log.summary(),
    }


def render_figures(log: MetricsLog, out_dir: Path) -> list:
    """Loss, consensus-distance and traffic curves as PNG files."""
    written = []

    losses = defaultdict(list)
    dists = {}
    for tick, node, _round, _mode, loss, dist, _peers, _digest in log.node_rows:
        if loss is not None:
            losses[node].append((tick, loss))
        if dist is not None:
            dists.setdefault(tick, []).append(dist)

    fig, ax = plt.subplots(figsize=(7, 4))
    for node in sorted(losses):
        series = losses[node]
        ax.plot([t for t, _ in series], [v for _, v in series], label=node, linewidth=1)
    ax.set_xlabel("tick")
    ax.set_ylabel("local loss")
    ax.set_title(f"{log.scenario}: per-node training loss")
    if losses:
        ax.set_yscale("log")
        if len(losses) <= 12:
            ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "loss.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    ticks = sorted(dists)
    if ticks:
        ax.plot(ticks, [max(dists[t]) for t in ticks], color="tab:red", linewidth=1.2)
        ax.set_yscale("log")
    ax.set_xlabel("tick")
    ax.set_ylabel("consensus distance")
    ax.set_title(f"{log.scenario}: max distance to community mean")
    fig.tight_layout()
    path = out_dir / "consensus.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    if log.transport_rows:
        ticks = [r[0] for r in log.transport_rows]
        for idx, label in ((1, "sent"), (2, "delivered"), (3, "dropped")):
            ax.plot(ticks, [r[idx] for r in log.transport_rows], label=label, linewidth=1)
        ax.legend(fontsize=8)
    ax.set_xlabel("tick")
    ax.set_ylabel("frames (cumulative)")
    ax.set_title(f"{log.scenario}: transport traffic")
    fig.tight_layout()
    path = out_dir / "traffic.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    return written


def write_outputs(log: MetricsLog, out_dir, figures: bool = True) -> list:
    """Write every export; returns the list of paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in (
        ("metrics.csv", log.nodes_csv()),
        ("transport.csv", log.transport_csv()),
        ("frames.csv", log.frames_csv()),
        ("events.jsonl", log.events_jsonl()),
        ("metrics.json", json.dumps(_structured(log), indent=2, sort_keys=True) + "\n"),
        ("summary.json", json.dumps(log.summary(), indent=2, sort_keys=True) + "\n"),
    ):
        path = out_dir / name
        path.write_text(content, encoding="utf-8")
        written.append(path)
    if figures:
        written.extend(render_figures(log, out_dir))
    return written
