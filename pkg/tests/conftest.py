import json

import numpy as np
import pytest

import sketchgraphnet as sg
from sketchgraphnet.cli import build_corpus
from sketchgraphnet.synth import SYNTH_CATEGORIES, write_synthetic_ndjson


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A ~600-record 10-class corpus (variant R) shared by store/stats/cli tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    ndjson = write_synthetic_ndjson(root / "synth.ndjson", per_class=80, seed=11, noisy_fraction=0.25)
    manifest = root / "categories.txt"
    manifest.write_text("".join(c + "\n" for c in SYNTH_CATEGORIES), encoding="utf-8")
    summary = build_corpus([ndjson], manifest, root / "corpus", variant="R")
    return {
        "root": root,
        "ndjson": ndjson,
        "manifest": manifest,
        "prefix": root / "corpus",
        "data_path": root / "corpus.skgr",
        "summary": summary,
    }


@pytest.fixture()
def small_reader(small_corpus):
    return sg.open_corpus(small_corpus["data_path"])


def make_attn_params(rng, d=64, heads=8, scale=0.2, dtype=np.float32, with_bias=True):
    def w(name):
        return sg.Parameter((rng.standard_normal((d, d)) * scale).astype(dtype), name)

    bias = rng.standard_normal(d) * scale if with_bias else np.zeros(d)
    return sg.AttnParams(
        wq=w("wq"),
        wk=w("wk"),
        wv=w("wv"),
        wproj=w("wproj"),
        bproj=sg.Parameter(bias.astype(dtype), "bproj"),
        num_heads=heads,
    )


def random_dense_batch(rng, b, n, d, dtype=np.float32, requires_grad=True):
    """DenseBatch with random per-graph sizes (max size exactly n)."""
    sizes = rng.integers(1, n + 1, size=b)
    sizes[rng.integers(0, b)] = n
    n_total = int(sizes.sum())
    h = sg.Tensor(rng.standard_normal((n_total, d)).astype(dtype), requires_grad=requires_grad)
    topo = sg.GraphTopology(sizes=sizes, edges=np.empty((0, 2), np.int64))
    return h, topo, sg.to_dense_batch(h, topo)


def line_sketch_record(orientation: str, rng) -> dict:
    """A jittered straight segment; trivially separable by orientation."""
    n = int(rng.integers(12, 24))
    t = np.linspace(0, 1, n)
    if orientation == "horizontal":
        xs, ys = t * 200, 20 + rng.normal(0, 2.0, n)
    else:
        xs, ys = 20 + rng.normal(0, 2.0, n), t * 200
    ts = np.cumsum(rng.uniform(5, 20, n))
    return {
        "word": orientation,
        "recognized": True,
        "drawing": [[list(map(float, xs)), list(map(float, ys)), list(map(float, ts))]],
    }


def build_separable_graphs(count_per_class=50, seed=0):
    """Linearly separable two-class graph set used by the trainer oracle."""
    rng = np.random.default_rng(seed)
    graphs = []
    for label, orientation in enumerate(["horizontal", "vertical"]):
        for _ in range(count_per_class):
            sketch = sg.parse_ndjson_line(json.dumps(line_sketch_record(orientation, rng)))
            graphs.append(sg.build_graph(sg.normalize_canvas(sketch), label))
    return graphs
