"""Stroke-sketch ingestion: NDJSON parsing and fixed-size graph construction.

A sketch arrives as timestamped pen strokes and leaves as a 100-node
spatiotemporal graph: per stroke, points are resampled at uniform arc
length, chained into a path, and stamped with coordinates on a 256x256
canvas plus a drawing-order clock normalized to [0, 1].
"""

from __future__ import annotations

import gzip
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NUM_NODES",
    "CANVAS_MAX",
    "RawStroke",
    "RawSketch",
    "SketchGraph",
    "MalformedJson",
    "SchemaError",
    "EmptySketch",
    "BudgetTooSmall",
    "parse_ndjson_line",
    "iter_ndjson",
    "normalize_canvas",
    "allocate_node_budget",
    "resample_stroke",
    "build_graph",
    "load_manifest",
]

log = logging.getLogger(__name__)

NUM_NODES = 100
CANVAS_MAX = 255.0


class MalformedJson(ValueError):
    """Line is not parseable JSON."""


class SchemaError(ValueError):
    """JSON parsed but does not look like a stroke-sketch record."""


class EmptySketch(ValueError):
    """Record contains zero strokes."""


class BudgetTooSmall(ValueError):
    """Node budget cannot satisfy per-stroke minimum counts."""


@dataclass
class RawStroke:
    """One pen-down trajectory: parallel coordinate lists, optional times (ms)."""

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray | None = None

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.ndim != 1 or self.xs.shape != self.ys.shape or self.xs.size < 1:
            raise SchemaError("stroke coordinate lists must be equal-length and non-empty")
        if self.ts is not None:
            self.ts = np.asarray(self.ts, dtype=np.float64)
            if self.ts.shape != self.xs.shape:
                raise SchemaError("stroke timestamp list length differs from coordinates")
            if np.any(np.diff(self.ts) < 0):
                raise SchemaError("stroke timestamps must be non-decreasing")

    def __len__(self) -> int:
        return int(self.xs.size)

    def arc_length(self) -> float:
        return float(np.hypot(np.diff(self.xs), np.diff(self.ys)).sum())


@dataclass
class RawSketch:
    """A parsed sketch record: label, strokes in drawing order, recognized flag."""

    label: str
    strokes: list[RawStroke]
    recognized: bool = True

    def __post_init__(self):
        if not self.label:
            raise SchemaError("sketch label must be non-empty")
        if not self.strokes:
            raise EmptySketch("sketch has zero strokes")


@dataclass
class SketchGraph:
    """Fixed-size path-graph encoding of one sketch.

    node_features is [100, 3] float32 rows of [x, y, t'] with x, y on the
    0..255 canvas and t' the timestamp normalized by the sketch maximum.
    Edges connect consecutive samples within each stroke span only.
    """

    node_features: np.ndarray
    edges: np.ndarray
    label_id: int
    stroke_spans: list[tuple[int, int]] = field(default_factory=list)

    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])

    def num_strokes(self) -> int:
        return len(self.stroke_spans)

    def derived_edges(self) -> np.ndarray:
        """Path edges implied by the stroke spans (the storage-normative set)."""
        pairs = []
        for start, count in self.stroke_spans:
            for j in range(count - 1):
                pairs.append((start + j, start + j + 1))
        return np.asarray(pairs, dtype=np.int32).reshape(-1, 2)

    def validate(self, expected_nodes: int = NUM_NODES) -> None:
        """Raise ValueError on any structural invariant violation."""
        n = self.num_nodes()
        if n != expected_nodes:
            raise ValueError(f"graph has {n} nodes, expected {expected_nodes}")
        if self.node_features.shape != (n, 3):
            raise ValueError(f"node_features shape {self.node_features.shape} != ({n}, 3)")
        spans = self.stroke_spans
        if not spans:
            raise ValueError("graph has no stroke spans")
        cursor = 0
        for start, count in spans:
            if start != cursor or count < 1:
                raise ValueError("stroke spans must partition 0..n in order")
            cursor += count
        if cursor != n:
            raise ValueError(f"stroke spans cover {cursor} nodes, expected {n}")
        e = self.edges
        if e.size and (np.any(e[:, 0] == e[:, 1]) or np.any(e < 0) or np.any(e >= n)):
            raise ValueError("edges contain self-loops or out-of-range endpoints")
        canon = {(min(u, v), max(u, v)) for u, v in e.tolist()} if e.size else set()
        if len(canon) != len(e):
            raise ValueError("duplicate edges")
        derived = {(min(u, v), max(u, v)) for u, v in self.derived_edges().tolist()}
        if canon != derived:
            raise ValueError("edges do not match the stroke-span path structure")
        t = self.node_features[:, 2]
        if np.any(t < 0) or np.any(t > 1.0 + 1e-6):
            raise ValueError("temporal feature outside [0, 1]")
        xy = self.node_features[:, :2]
        if np.any(xy < -1e-4) or np.any(xy > CANVAS_MAX + 1e-4):
            raise ValueError("coordinates outside the canvas")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def parse_ndjson_line(line: str) -> RawSketch:
    """Parse a single stroke-record JSON line (raw or simplified schema)."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"unparseable JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError("record is not a JSON object")
    if "word" not in obj or "drawing" not in obj:
        raise SchemaError("record missing 'word' or 'drawing'")
    word = obj["word"]
    drawing = obj["drawing"]
    if not isinstance(word, str) or not word:
        raise SchemaError("'word' must be a non-empty string")
    if not isinstance(drawing, list):
        raise SchemaError("'drawing' must be a list of strokes")
    if len(drawing) == 0:
        raise EmptySketch("drawing has zero strokes")
    strokes = []
    for i, raw in enumerate(drawing):
        if not isinstance(raw, (list, tuple)) or len(raw) not in (2, 3):
            raise SchemaError(f"stroke {i} must be [xs, ys] or [xs, ys, ts]")
        try:
            stroke = RawStroke(raw[0], raw[1], raw[2] if len(raw) == 3 else None)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"stroke {i}: {exc}") from exc
        strokes.append(stroke)
    recognized = bool(obj.get("recognized", True))
    return RawSketch(label=word, strokes=strokes, recognized=recognized)


def iter_ndjson(path: str | Path) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, stripped line) from a file, gzip-aware."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, line


def load_manifest(path: str | Path) -> list[str]:
    """Category names, one per line; index order defines label ids."""
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(set(names)) != len(names):
        raise ValueError("manifest contains duplicate category names")
    if not names:
        raise ValueError("manifest is empty")
    return names


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def normalize_canvas(sketch: RawSketch) -> RawSketch:
    """Translate to the origin and scale uniformly so the longer axis spans
    exactly [0, 255]; single-point sketches land on the canvas center."""
    all_x = np.concatenate([s.xs for s in sketch.strokes])
    all_y = np.concatenate([s.ys for s in sketch.strokes])
    min_x, min_y = all_x.min(), all_y.min()
    extent = max(all_x.max() - min_x, all_y.max() - min_y)
    strokes = []
    for s in sketch.strokes:
        if extent <= 0:
            xs = np.full_like(s.xs, CANVAS_MAX / 2.0)
            ys = np.full_like(s.ys, CANVAS_MAX / 2.0)
        else:
            scale = CANVAS_MAX / extent
            xs = (s.xs - min_x) * scale
            ys = (s.ys - min_y) * scale
        strokes.append(RawStroke(xs, ys, None if s.ts is None else s.ts.copy()))
    return RawSketch(label=sketch.label, strokes=strokes, recognized=sketch.recognized)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Apportion ``total`` integer units proportionally to ``weights``.

    Remainder units go to the largest fractional parts; ties break toward
    the lower index (stable sort), so the result is deterministic.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(np.int64)
    frac = quota - counts
    leftover = total - int(counts.sum())
    if leftover > 0:
        order = np.argsort(-frac, kind="stable")
        counts[order[:leftover]] += 1
    return counts


def allocate_node_budget(
    arc_lengths: Sequence[float],
    point_counts: Sequence[int],
    total: int = NUM_NODES,
) -> list[int]:
    """Split the node budget across strokes proportionally to arc length.

    Single-point strokes take exactly one node; every other stroke takes at
    least two (so it contributes at least one edge). The remaining budget is
    apportioned by largest-remainder rounding over arc lengths.
    """
    arc = np.asarray(arc_lengths, dtype=np.float64)
    pts = np.asarray(point_counts, dtype=np.int64)
    if arc.shape != pts.shape or arc.ndim != 1 or arc.size == 0:
        raise ValueError("arc_lengths and point_counts must be equal-length, non-empty")
    if np.any(arc < 0):
        raise ValueError("arc lengths must be non-negative")
    singles = pts == 1
    minima = np.where(singles, 1, 2)
    if total < int(minima.sum()):
        raise BudgetTooSmall(f"budget {total} < required minimum {int(minima.sum())}")

    counts = np.zeros(arc.size, dtype=np.int64)
    counts[singles] = 1
    multi = ~singles
    pool = total - int(singles.sum())
    if not multi.any():
        # degenerate all-dots sketch: sum-to-total wins over the exactly-one rule
        if total > arc.size:
            counts = counts + _largest_remainder(total - int(arc.size), np.ones(arc.size))
        return [int(c) for c in counts]

    alloc = _largest_remainder(pool, arc[multi])
    # pull the under-minimum strokes up to 2, taking back from the largest
    deficit = int(np.maximum(0, 2 - alloc).sum())
    alloc = np.maximum(alloc, 2)
    while deficit > 0:
        donor = int(np.argmax(alloc))
        take = min(deficit, int(alloc[donor]) - 2)
        alloc[donor] -= take
        deficit -= take
    counts[multi] = alloc
    return [int(c) for c in counts]


def resample_stroke(stroke: RawStroke, k: int, t0: float = 0.0) -> np.ndarray:
    """Sample ``k`` points at uniform arc-length spacing along the stroke.

    Returns [k, 3] rows of (x, y, t). Coordinates and times interpolate
    linearly between the bracketing raw points; for k >= 2 both endpoints
    are included, k == 1 takes the arc-length midpoint. Strokes without
    timestamps tick one unit per raw point starting at ``t0``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(stroke)
    times = stroke.ts if stroke.ts is not None else t0 + np.arange(n, dtype=np.float64)
    seg = np.hypot(np.diff(stroke.xs), np.diff(stroke.ys))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total > 0:
        param, stops = cum, total
    else:
        # zero-length trajectory (single or coincident points): walk by index
        param, stops = np.arange(n, dtype=np.float64), float(n - 1)
    if k == 1:
        targets = np.array([stops / 2.0])
    else:
        targets = np.linspace(0.0, stops, k)
    if n == 1:
        xs = np.full(k, stroke.xs[0])
        ys = np.full(k, stroke.ys[0])
        tt = np.full(k, times[0])
    else:
        xs = np.interp(targets, param, stroke.xs)
        ys = np.interp(targets, param, stroke.ys)
        tt = np.interp(targets, param, times)
    return np.stack([xs, ys, tt], axis=1)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def _merge_strokes(strokes: list[RawStroke], total: int) -> list[RawStroke]:
    """Merge strokes shortest-first into their temporal successor until the
    per-stroke minimum counts fit inside the node budget."""
    strokes = list(strokes)
    while True:
        minima = sum(1 if len(s) == 1 else 2 for s in strokes)
        if minima <= total or len(strokes) == 1:
            return strokes
        arcs = [s.arc_length() for s in strokes]
        i = int(np.argmin(arcs))
        j = i + 1 if i + 1 < len(strokes) else i - 1
        a, b = (i, j) if i < j else (j, i)
        first, second = strokes[a], strokes[b]
        ts = None
        if first.ts is not None and second.ts is not None:
            ts = np.concatenate([first.ts, second.ts])
        merged = RawStroke(
            np.concatenate([first.xs, second.xs]),
            np.concatenate([first.ys, second.ys]),
            ts,
        )
        strokes[a] = merged
        del strokes[b]
        log.debug("merged stroke %d into %d to fit node budget", i, j)


EdgeAugmentHook = Callable[[np.ndarray, list[tuple[int, int]]], Sequence[tuple[int, int]]]


def build_graph(
    sketch: RawSketch,
    label_id: int,
    total_nodes: int = NUM_NODES,
    edge_augment: EdgeAugmentHook | None = None,
) -> SketchGraph:
    """Convert a canvas-normalized sketch into its fixed-size path graph.

    Node order follows stroke order; each stroke becomes one connected
    path component. ``edge_augment``, when given, receives the node
    features and spans after path construction and may return extra edges
    (structure-enhancement hook; nothing ships enabled).
    """
    strokes = _merge_strokes(sketch.strokes, total_nodes)
    counts = allocate_node_budget(
        [s.arc_length() for s in strokes],
        [len(s) for s in strokes],
        total=total_nodes,
    )

    synthetic_clock = any(s.ts is None for s in strokes)
    features = np.empty((total_nodes, 3), dtype=np.float64)
    spans: list[tuple[int, int]] = []
    cursor = 0
    clock_offset = 0.0
    for stroke, k in zip(strokes, counts):
        use = stroke
        if synthetic_clock and stroke.ts is not None:
            use = RawStroke(stroke.xs, stroke.ys, None)  # one clock for the whole sketch
        pts = resample_stroke(use, k, t0=clock_offset)
        features[cursor : cursor + k] = pts
        spans.append((cursor, k))
        cursor += k
        clock_offset += len(stroke)
    assert cursor == total_nodes

    t_max = features[:, 2].max()
    if t_max > 0:
        features[:, 2] /= t_max
    else:
        features[:, 2] = 0.0
        log.warning("sketch has zero time span; temporal feature zeroed (label_id=%d)", label_id)

    edges: list[tuple[int, int]] = []
    for start, count in spans:
        edges.extend((start + j, start + j + 1) for j in range(count - 1))

    if edge_augment is not None:
        seen = {(min(u, v), max(u, v)) for u, v in edges}
        for u, v in edge_augment(features.copy(), list(spans)):
            u, v = int(u), int(v)
            if u == v or not (0 <= u < total_nodes and 0 <= v < total_nodes):
                raise ValueError(f"edge hook produced invalid edge ({u}, {v})")
            key = (min(u, v), max(u, v))
            if key not in seen:
                seen.add(key)
                edges.append((u, v))

    return SketchGraph(
        node_features=features.astype(np.float32),
        edges=np.asarray(edges, dtype=np.int32).reshape(-1, 2),
        label_id=int(label_id),
        stroke_spans=spans,
    )
