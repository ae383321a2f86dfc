"""Procedural stroke-sketch generator emitting QuickDraw-style NDJSON.

Ten parametric shape categories with jitter, rotation, variable sampling
density and pen-speed timestamps. Noisy variants (heavy jitter plus a
stray scribble stroke) are marked recognized=false, so variant filtering
has something to filter. Used by the demos and the test corpus; real
NDJSON drops work through the same pipeline.
"""

from __future__ import annotations

import gzip
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = ["SYNTH_CATEGORIES", "make_record", "write_synthetic_ndjson"]

SYNTH_CATEGORIES = [
    "circle",
    "square",
    "triangle",
    "star",
    "spiral",
    "zigzag",
    "house",
    "arrow",
    "wave",
    "ladder",
]


def _densify(corners: np.ndarray, points_per_unit: float, rng: np.random.Generator) -> np.ndarray:
    """Resample a corner polyline to roughly uniform spacing in unit space."""
    seg = np.hypot(*np.diff(corners, axis=0).T)
    total = seg.sum()
    n = max(int(total * points_per_unit * rng.uniform(0.75, 1.35)), len(corners))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.linspace(0.0, total, n)
    return np.stack([np.interp(t, cum, corners[:, 0]), np.interp(t, cum, corners[:, 1])], axis=1)


def _circle_arc(rng, turns: float = 1.0, r0: float = 1.0, r1: float = 1.0, n: int = 48) -> np.ndarray:
    t = np.linspace(0.0, 2 * math.pi * turns, n)
    r = np.linspace(r0, r1, n) * (1.0 + 0.03 * np.sin(t * rng.integers(2, 5) + rng.uniform(0, 6)))
    start = rng.uniform(0, 2 * math.pi)
    return np.stack([r * np.cos(t + start), r * np.sin(t + start)], axis=1)


def _shape_strokes(category: str, rng: np.random.Generator) -> list[np.ndarray]:
    """Strokes in unit space, one [n, 2] array per stroke."""
    pts = 14.0  # target points per unit length
    if category == "circle":
        return [_circle_arc(rng, turns=rng.uniform(0.97, 1.08))]
    if category == "square":
        c = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1], [-1, -1]], dtype=float)
        return [_densify(c, pts, rng)]
    if category == "triangle":
        c = np.array([[-1, -0.8], [1, -0.8], [0, 1.0], [-1, -0.8]], dtype=float)
        return [_densify(c, pts, rng)]
    if category == "star":
        k = 5
        ang = np.arange(2 * k + 1) * math.pi / k - math.pi / 2
        rad = np.where(np.arange(2 * k + 1) % 2 == 0, 1.0, rng.uniform(0.38, 0.5))
        c = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        return [_densify(c, pts, rng)]
    if category == "spiral":
        turns = rng.uniform(2.2, 3.2)
        n = int(40 * turns)
        t = np.linspace(0.0, 2 * math.pi * turns, n)
        r = t / (2 * math.pi * turns)
        return [np.stack([r * np.cos(t), r * np.sin(t)], axis=1)]
    if category == "zigzag":
        k = rng.integers(4, 7)
        xs = np.linspace(-1, 1, 2 * k + 1)
        ys = np.where(np.arange(2 * k + 1) % 2 == 0, -0.6, 0.6)
        return [_densify(np.stack([xs, ys], axis=1), pts, rng)]
    if category == "house":
        base = np.array([[-1, -1], [1, -1], [1, 0.3], [-1, 0.3], [-1, -1]], dtype=float)
        roof = np.array([[-1.1, 0.3], [0, 1.1], [1.1, 0.3]], dtype=float)
        door = np.array([[-0.25, -1], [-0.25, -0.3], [0.25, -0.3], [0.25, -1]], dtype=float)
        return [_densify(base, pts, rng), _densify(roof, pts, rng), _densify(door, pts, rng)]
    if category == "arrow":
        shaft = np.array([[-1, 0], [0.7, 0]], dtype=float)
        head = np.array([[0.25, 0.45], [0.85, 0.0], [0.25, -0.45]], dtype=float)
        return [_densify(shaft, pts, rng), _densify(head, pts, rng)]
    if category == "wave":
        periods = rng.uniform(1.6, 2.6)
        n = int(34 * periods)
        x = np.linspace(-1, 1, n)
        y = 0.55 * np.sin(x * periods * math.pi + rng.uniform(0, math.pi))
        return [np.stack([x, y], axis=1)]
    if category == "ladder":
        rails = [
            np.array([[-0.5, -1], [-0.5, 1]], dtype=float),
            np.array([[0.5, -1], [0.5, 1]], dtype=float),
        ]
        rungs = []
        for yy in np.linspace(-0.7, 0.7, rng.integers(3, 6)):
            rungs.append(np.array([[-0.5, yy], [0.5, yy]], dtype=float))
        return [_densify(s, pts, rng) for s in rails + rungs]
    raise ValueError(f"unknown synthetic category {category!r}")


def make_record(category: str, rng: np.random.Generator, noisy: bool = False) -> dict:
    """One QuickDraw-style raw record: word, recognized, drawing triplets."""
    strokes = _shape_strokes(category, rng)
    theta = rng.normal(0.0, 0.35 if noisy else 0.12)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    scale = rng.uniform(80, 220)
    offset = rng.uniform(40, 400, size=2)
    jitter = (0.05 if not noisy else 0.16) * rng.uniform(0.6, 1.4)

    drawing = []
    clock = rng.uniform(0, 80)
    for s in strokes:
        s = s + rng.normal(0.0, jitter, size=s.shape)
        if noisy and len(s) > 6 and rng.random() < 0.5:
            keep = np.sort(rng.choice(len(s), size=max(5, int(len(s) * 0.7)), replace=False))
            keep[0], keep[-1] = 0, len(s) - 1
            s = s[keep]
        xy = (s @ rot.T) * scale + offset
        dts = rng.uniform(6, 26, size=len(s))
        ts = clock + np.cumsum(dts) - dts[0]
        clock = ts[-1] + rng.uniform(120, 420)
        drawing.append(
            [
                [round(float(v), 2) for v in xy[:, 0]],
                [round(float(v), 2) for v in xy[:, 1]],
                [round(float(v), 1) for v in ts],
            ]
        )
    if noisy and rng.random() < 0.6:
        n = int(rng.integers(4, 9))
        scrawl = rng.uniform(0, 500, size=(n, 2))
        dts = rng.uniform(6, 26, size=n)
        ts = clock + np.cumsum(dts) - dts[0]
        drawing.append(
            [
                [round(float(v), 2) for v in scrawl[:, 0]],
                [round(float(v), 2) for v in scrawl[:, 1]],
                [round(float(v), 1) for v in ts],
            ]
        )
    return {"word": category, "recognized": not noisy, "drawing": drawing}


def write_synthetic_ndjson(
    path: str | Path,
    categories: Sequence[str] = tuple(SYNTH_CATEGORIES),
    per_class: int = 100,
    seed: int = 0,
    noisy_fraction: float = 0.25,
    compress: bool = False,
) -> Path:
    """Write ``per_class`` records per category, interleaved; a
    ``noisy_fraction`` of each class is the unrecognized noisy variant."""
    path = Path(path)
    rng = np.random.default_rng(seed)
    opener = gzip.open if compress else open
    with opener(path, "wt", encoding="utf-8") as fh:
        for i in range(per_class):
            for cat in categories:
                noisy = rng.random() < noisy_fraction
                fh.write(json.dumps(make_record(cat, rng, noisy=noisy)) + "\n")
    return path
