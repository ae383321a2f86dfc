"""Per-category structural statistics of a built corpus.

"Path length" is deliberately reported under both readings, labeled
apart: the node count of each stroke path and its geometric arc length
on the canvas. Everything is accumulated in one streaming pass and
round-trips exactly through the CSV emission.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import SketchGraph
from .store import CorpusReader

__all__ = [
    "ARC_BIN_WIDTH",
    "ARC_NUM_BINS",
    "CategoryStats",
    "compute_stats",
    "write_stats_csv",
    "read_stats_csv",
    "emit_plots",
]

ARC_BIN_WIDTH = 16.0
ARC_NUM_BINS = 24  # final bin absorbs overflow; canvas diagonal is ~360


@dataclass
class CategoryStats:
    category: str
    sample_count: int = 0
    avg_stroke_count: float = 0.0
    avg_nodes: float = 0.0
    avg_edges: float = 0.0
    avg_components: float = 0.0
    avg_density: float = 0.0
    avg_stroke_arc_length: float = 0.0
    node_count_hist: Counter = field(default_factory=Counter)  # per-stroke node counts
    arc_length_hist: list[int] = field(default_factory=lambda: [0] * ARC_NUM_BINS)

    def histogram_mass(self) -> int:
        return sum(self.node_count_hist.values())


class _Accumulator:
    def __init__(self, category: str):
        self.category = category
        self.n = 0
        self.strokes = 0
        self.nodes = 0
        self.edges = 0
        self.components = 0
        self.density = 0.0
        self.stroke_arc = 0.0
        self.node_hist: Counter = Counter()
        self.arc_hist = [0] * ARC_NUM_BINS

    def add(self, graph: SketchGraph) -> None:
        n = graph.num_nodes()
        m = int(graph.edges.shape[0])
        s = graph.num_strokes()
        self.n += 1
        self.strokes += s
        self.nodes += n
        self.edges += m
        self.components += s  # one path component per stroke by construction
        self.density += m / (n * (n - 1) / 2.0)
        feats = graph.node_features
        for start, count in graph.stroke_spans:
            self.node_hist[count] += 1
            if count >= 2:
                seg = feats[start : start + count, :2]
                arc = float(np.hypot(np.diff(seg[:, 0]), np.diff(seg[:, 1])).sum())
            else:
                arc = 0.0
            self.stroke_arc += arc
            b = min(int(arc // ARC_BIN_WIDTH), ARC_NUM_BINS - 1)
            self.arc_hist[b] += 1

    def finish(self) -> CategoryStats:
        stats = CategoryStats(category=self.category, sample_count=self.n)
        if self.n:
            stats.avg_stroke_count = self.strokes / self.n
            stats.avg_nodes = self.nodes / self.n
            stats.avg_edges = self.edges / self.n
            stats.avg_components = self.components / self.n
            stats.avg_density = self.density / self.n
        if self.strokes:
            stats.avg_stroke_arc_length = self.stroke_arc / self.strokes
        stats.node_count_hist = self.node_hist
        stats.arc_length_hist = self.arc_hist
        return stats


AGGREGATE = "__all__"


def compute_stats(
    reader: CorpusReader | Iterable[SketchGraph],
    names: Sequence[str] | None = None,
) -> list[CategoryStats]:
    """One streaming pass; returns per-category stats plus an aggregate row
    (category name ``__all__``) covering every record."""
    accs: dict[int, _Accumulator] = {}
    total = _Accumulator(AGGREGATE)

    def label_name(lid: int) -> str:
        if names is not None and 0 <= lid < len(names):
            return names[lid]
        return f"class{lid}"

    for graph in reader:
        acc = accs.get(graph.label_id)
        if acc is None:
            acc = accs[graph.label_id] = _Accumulator(label_name(graph.label_id))
        acc.add(graph)
        total.add(graph)

    result = [accs[k].finish() for k in sorted(accs)]
    result.append(total.finish())
    return result


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

_SCALAR_COLS = [
    "category",
    "sample_count",
    "avg_stroke_count",
    "avg_nodes",
    "avg_edges",
    "avg_components",
    "avg_density",
    "avg_stroke_arc_length",
]


def write_stats_csv(stats: list[CategoryStats], out_dir: str | Path) -> tuple[Path, Path]:
    """Emit ``stats.csv`` (one row per category) and ``histograms.csv``
    (category, kind, bin, count). Floats are written with repr so the
    files reproduce the numbers exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scalar_path = out_dir / "stats.csv"
    with open(scalar_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SCALAR_COLS)
        for s in stats:
            writer.writerow(
                [
                    s.category,
                    s.sample_count,
                    repr(s.avg_stroke_count),
                    repr(s.avg_nodes),
                    repr(s.avg_edges),
                    repr(s.avg_components),
                    repr(s.avg_density),
                    repr(s.avg_stroke_arc_length),
                ]
            )
    hist_path = out_dir / "histograms.csv"
    with open(hist_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "kind", "bin", "count"])
        for s in stats:
            for k in sorted(s.node_count_hist):
                writer.writerow([s.category, "stroke_node_count", k, s.node_count_hist[k]])
            for b, c in enumerate(s.arc_length_hist):
                if c:
                    writer.writerow([s.category, "stroke_arc_length", b, c])
    return scalar_path, hist_path


def read_stats_csv(out_dir: str | Path) -> list[CategoryStats]:
    """Inverse of :func:`write_stats_csv`."""
    out_dir = Path(out_dir)
    stats: dict[str, CategoryStats] = {}
    order: list[str] = []
    with open(out_dir / "stats.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            s = CategoryStats(
                category=row["category"],
                sample_count=int(row["sample_count"]),
                avg_stroke_count=float(row["avg_stroke_count"]),
                avg_nodes=float(row["avg_nodes"]),
                avg_edges=float(row["avg_edges"]),
                avg_components=float(row["avg_components"]),
                avg_density=float(row["avg_density"]),
                avg_stroke_arc_length=float(row["avg_stroke_arc_length"]),
            )
            stats[s.category] = s
            order.append(s.category)
    with open(out_dir / "histograms.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            s = stats[row["category"]]
            if row["kind"] == "stroke_node_count":
                s.node_count_hist[int(row["bin"])] = int(row["count"])
            else:
                s.arc_length_hist[int(row["bin"])] = int(row["count"])
    return [stats[c] for c in order]


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def emit_plots(stats: list[CategoryStats], out_dir: str | Path) -> list[Path]:
    """One two-panel histogram SVG per category plus a scatter of category
    averages; returns the written paths (CSV files included)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = list(write_stats_csv(stats, out_dir))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    per_category = [s for s in stats if s.category != AGGREGATE and s.sample_count > 0]
    for s in per_category:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        ks = sorted(s.node_count_hist)
        ax1.bar(ks, [s.node_count_hist[k] for k in ks], width=0.9)
        ax1.set_xlabel("stroke path length (nodes)")
        ax1.set_ylabel("strokes")
        centers = (np.arange(ARC_NUM_BINS) + 0.5) * ARC_BIN_WIDTH
        ax2.bar(centers, s.arc_length_hist, width=ARC_BIN_WIDTH * 0.9)
        ax2.set_xlabel("stroke path length (canvas arc units)")
        fig.suptitle(s.category)
        fig.tight_layout()
        path = out_dir / f"hist_{s.category}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if per_category:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.5, 3.4))
        xs = [s.avg_stroke_count for s in per_category]
        for ax, key, label in (
            (ax1, "avg_nodes_per_stroke", "avg path length (nodes/stroke)"),
            (ax2, "avg_stroke_arc_length", "avg path length (arc units)"),
        ):
            if key == "avg_nodes_per_stroke":
                ys = [s.avg_nodes / max(s.avg_stroke_count, 1e-12) for s in per_category]
            else:
                ys = [s.avg_stroke_arc_length for s in per_category]
            ax.scatter(xs, ys)
            for s, x, y in zip(per_category, xs, ys):
                ax.annotate(s.category, (x, y), fontsize=6)
            ax.set_xlabel("avg stroke count")
            ax.set_ylabel(label)
        fig.tight_layout()
        path = out_dir / "stroke_count_vs_path_length.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
