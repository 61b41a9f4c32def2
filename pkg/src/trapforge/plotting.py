"""Figures written next to CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .dataset_ops import ClassStats, FlowRecord  # noqa: E402
from .packet_model import BENIGN  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "trapforge",
}

BENIGN_COLOR = "#4c72b0"
ATTACK_COLOR = "#c44e52"

# PNG metadata normally embeds the matplotlib version; drop it so digests are stable
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_class_distribution(stats: ClassStats, path: str | Path, title: str = "Class distribution") -> Path:
    with plt.rc_context(STYLE):
        labels = list(stats.counts)
        height = max(3.0, 0.25 * len(labels) + 1.0)
        fig, ax = plt.subplots(figsize=(7, height), layout="constrained")
        colors = [BENIGN_COLOR if lbl == BENIGN else ATTACK_COLOR for lbl in labels]
        y = range(len(labels))
        ax.barh(y, [stats.counts[k] for k in labels], color=colors)
        ax.set_yticks(list(y), labels)
        ax.invert_yaxis()
        for i, k in enumerate(labels):
            ax.annotate(
                f" {stats.counts[k]:,} ({stats.proportions[k] * 100:.1f}%)",
                (stats.counts[k], i),
                va="center",
                fontsize=7,
            )
        ax.set_xlabel("packets")
        ax.set_title(f"{title} (N={stats.total:,})")
        ax.margins(x=0.25)
        return _save(fig, Path(path))


def plot_flow_sizes(flows: Sequence[FlowRecord], path: str | Path) -> Path:
    """Histogram of packets per flow, benign vs attack, log-scaled counts."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5), layout="constrained")
        benign = [f.pkt_count for f in flows if f.label == BENIGN]
        attack = [f.pkt_count for f in flows if f.label not in (BENIGN, None)]
        top = max([f.pkt_count for f in flows], default=1)
        bins = range(1, top + 2) if top <= 50 else 50
        if benign:
            ax.hist(benign, bins=bins, alpha=0.7, color=BENIGN_COLOR, label=f"benign ({len(benign)})")
        if attack:
            ax.hist(attack, bins=bins, alpha=0.7, color=ATTACK_COLOR, label=f"attack ({len(attack)})")
        if benign or attack:
            ax.set_yscale("log")
            ax.legend(frameon=False)
        ax.set_xlabel("packets per flow")
        ax.set_ylabel("flows")
        ax.set_title(f"Flow sizes ({len(flows):,} flows)")
        return _save(fig, Path(path))
