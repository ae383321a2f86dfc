"""Training, evaluation, efficiency benchmarking and ablation harness.

The loop follows one fixed recipe: seeded shuffling, Adam with a cosine
schedule over total optimizer steps, per-epoch validation, best-so-far
checkpointing by validation top-1, and a final test pass with confusion
analysis and the batch-1 latency protocol (mean over repeated single
sample forwards).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor
from .attention import LogitStats, logit_stats, workspace_meter
from .ingest import SketchGraph
from .model import (
    ModelConfig,
    ModelParams,
    collate,
    forward,
    init_model_params,
    predict_topk,
)
from .optim import Adam, cosine_lr
from .store import CorpusReader
from .tensor import cross_entropy_label_smoothing, no_grad

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "NonFiniteLoss",
    "train",
    "evaluate",
    "measure_attention_workspace",
    "bench_attention",
    "ablate",
    "stability_probe",
    "write_report_files",
    "write_rows_csv",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 7
    lr0: float = 5e-4
    seed: int = 0
    split: tuple[float, float, float] = (0.9, 0.05, 0.05)
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr0 <= 0:
            raise ValueError("batch_size, epochs and lr0 must be positive")
        if self.workers != 1:
            raise ValueError("only the deterministic single-worker loader is implemented")


@dataclass
class MetricsReport:
    top1: float = 0.0
    top3: float = 0.0
    top5: float = 0.0
    per_class_accuracy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    loss_curve: list[float] = field(default_factory=list)
    val_top1_curve: list[float] = field(default_factory=list)
    epoch_wall_clock: list[float] = field(default_factory=list)
    peak_attention_workspace_bytes: int = 0
    latency_mean_ms: float | None = None
    latency_std_ms: float | None = None
    num_parameters: int = 0

    def best_and_worst_classes(self, k: int = 5) -> tuple[list[int], list[int]]:
        order = np.argsort(-self.per_class_accuracy, kind="stable")
        return [int(c) for c in order[:k]], [int(c) for c in order[::-1][:k]]


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN/Inf loss; carries per-layer logit stats."""

    def __init__(self, step: int, layer_stats: list[LogitStats]):
        lines = ", ".join(
            f"block{i}: max={s.max_logit:.3e} min={s.min_logit:.3e}" for i, s in enumerate(layer_stats)
        )
        super().__init__(f"non-finite loss at step {step} ({lines})")
        self.step = step
        self.layer_stats = layer_stats


def _fetch(dataset, indices) -> list[SketchGraph]:
    if isinstance(dataset, CorpusReader):
        return [dataset.get(int(i)) for i in indices]
    return [dataset[int(i)] for i in indices]


def _topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    pred = predict_topk(logits, k)
    return (pred == labels[:, None]).any(axis=1)


def _eval_logits(
    graphs: list[SketchGraph],
    params: ModelParams,
    config: ModelConfig,
    batch_size: int,
) -> np.ndarray:
    chunks = []
    with no_grad():
        for i in range(0, len(graphs), batch_size):
            batch = collate(graphs[i : i + batch_size])
            chunks.append(forward(batch, params, config, training=False).data)
    return np.concatenate(chunks, axis=0)


def evaluate(
    params: ModelParams,
    dataset,
    indices,
    config: ModelConfig,
    batch_size: int = 64,
    measure_latency: bool = False,
    latency_passes: int = 100,
) -> MetricsReport:
    """Top-1/3/5 accuracy, per-class accuracy and confusion matrix; the
    latency protocol averages repeated batch-1 forward passes."""
    graphs = _fetch(dataset, indices)
    if not graphs:
        raise ValueError("evaluate needs at least one sample")
    labels = np.array([g.label_id for g in graphs], dtype=np.int64)
    logits = _eval_logits(graphs, params, config, batch_size)
    c = config.num_classes
    pred1 = predict_topk(logits, 1)[:, 0]
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, pred1), 1)
    row_sums = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), row_sums, out=np.zeros(c, dtype=np.float64), where=row_sums > 0
    )
    report = MetricsReport(
        top1=float(_topk_hits(logits, labels, 1).mean()),
        top3=float(_topk_hits(logits, labels, min(3, c)).mean()),
        top5=float(_topk_hits(logits, labels, min(5, c)).mean()),
        per_class_accuracy=per_class,
        confusion=confusion,
        num_parameters=params.num_parameters(),
    )
    if measure_latency:
        times = []
        with no_grad():
            single = collate(graphs[:1])
            forward(single, params, config, training=False)  # warm the caches
            for i in range(latency_passes):
                g = graphs[i % len(graphs)]
                batch = collate([g])
                t0 = time.perf_counter()
                forward(batch, params, config, training=False)
                times.append((time.perf_counter() - t0) * 1e3)
        report.latency_mean_ms = float(np.mean(times))
        report.latency_std_ms = float(np.std(times))
    return report


def train(
    dataset,
    splits: tuple[np.ndarray, np.ndarray, np.ndarray],
    config: ModelConfig,
    train_config: TrainConfig,
    measure_latency: bool = False,
    log_every: int = 0,
) -> tuple[ModelParams, MetricsReport]:
    """Run the full recipe and return (best-validation params, report).

    Deterministic for a fixed (seed, config, dataset): parameter init,
    shuffling and dropout all derive from ``train_config.seed``.
    """
    train_idx, val_idx, test_idx = splits
    train_graphs = _fetch(dataset, train_idx)
    val_graphs = _fetch(dataset, val_idx)
    test_graphs = _fetch(dataset, test_idx)
    if not train_graphs:
        raise ValueError("empty training split")

    rng = np.random.default_rng(train_config.seed)
    tensor.manual_seed(train_config.seed)
    params = init_model_params(config, rng)
    opt = Adam(params.parameters(), lr=train_config.lr0)

    n = len(train_graphs)
    bs = train_config.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = steps_per_epoch * train_config.epochs

    workspace_meter.reset()
    report = MetricsReport(num_parameters=params.num_parameters())
    best_top1 = -1.0
    best_state: dict[str, np.ndarray] | None = None
    step = 0
    for epoch in range(train_config.epochs):
        t_epoch = time.perf_counter()
        perm = rng.permutation(n)
        for b0 in range(0, n, bs):
            batch = collate([train_graphs[i] for i in perm[b0 : b0 + bs]])
            logits = forward(batch, params, config, training=True)
            loss = cross_entropy_label_smoothing(logits, batch.labels, config.label_smoothing)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                probe: list[LogitStats] = []
                with no_grad():
                    forward(batch, params, config, training=False, probe=probe)
                raise NonFiniteLoss(step, probe)
            opt.zero_grad()
            loss.backward()
            opt.step(lr=cosine_lr(step, total_steps, train_config.lr0))
            report.loss_curve.append(loss_val)
            step += 1
            if log_every and step % log_every == 0:
                log.info("step %d/%d loss %.4f", step, total_steps, loss_val)
        report.epoch_wall_clock.append(time.perf_counter() - t_epoch)

        if val_graphs:
            val = evaluate(params, val_graphs, np.arange(len(val_graphs)), config, batch_size=bs)
            report.val_top1_curve.append(val.top1)
            if val.top1 > best_top1:
                best_top1 = val.top1
                best_state = params.clone_state()
        else:
            best_state = params.clone_state()

    if best_state is not None:
        params.load_state(best_state)
    report.peak_attention_workspace_bytes = workspace_meter.peak_bytes

    if len(test_graphs):
        test = evaluate(
            params,
            test_graphs,
            np.arange(len(test_graphs)),
            config,
            batch_size=bs,
            measure_latency=measure_latency,
        )
        report.top1, report.top3, report.top5 = test.top1, test.top3, test.top5
        report.per_class_accuracy = test.per_class_accuracy
        report.confusion = test.confusion
        report.latency_mean_ms = test.latency_mean_ms
        report.latency_std_ms = test.latency_std_ms
    return params, report


# ---------------------------------------------------------------------------
# efficiency benchmark (attention variants x depth)
# ---------------------------------------------------------------------------


def measure_attention_workspace(
    dataset,
    indices,
    config: ModelConfig,
    batch_size: int = 64,
    seed: int = 0,
) -> int:
    """Peak metered transient attention bytes over one forward+backward."""
    graphs = _fetch(dataset, indices[:batch_size])
    batch = collate(graphs)
    params = init_model_params(config, np.random.default_rng(seed))
    workspace_meter.reset()
    logits = forward(batch, params, config, training=True)
    loss = cross_entropy_label_smoothing(logits, batch.labels, config.label_smoothing)
    loss.backward()
    return workspace_meter.peak_bytes


def bench_attention(
    dataset,
    splits,
    base_config: ModelConfig,
    train_config: TrainConfig,
    blocks: Sequence[int] = (4, 6, 8),
    attention_variants: Sequence[str] = ("memeff", "naive"),
    acc_tolerance: float = 0.05,
    assert_gates: bool = True,
) -> list[dict]:
    """Depth-by-attention grid: per cell, metered peak attention workspace,
    mean epoch wall-clock and test top-1.

    Gates (when ``assert_gates``): the tiled path's workspace is strictly
    below the materializing path at every depth, and the two reach
    top-1 within ``acc_tolerance`` of each other.
    """
    rows = []
    for variant in attention_variants:
        for depth in blocks:
            config = replace(base_config, attention=variant, num_blocks=depth)
            mem = measure_attention_workspace(dataset, splits[0], config, train_config.batch_size, train_config.seed)
            _, report = train(dataset, splits, config, train_config)
            rows.append(
                {
                    "attention": variant,
                    "conv_blocks": depth,
                    "avg_memory_bytes": mem,
                    "avg_epoch_time_s": float(np.mean(report.epoch_wall_clock)),
                    "top1": report.top1,
                }
            )
            log.info("bench %s L=%d: mem=%d bytes, top1=%.4f", variant, depth, mem, report.top1)
    if assert_gates:
        by_key = {(r["attention"], r["conv_blocks"]): r for r in rows}
        for depth in blocks:
            me, na = by_key[("memeff", depth)], by_key[("naive", depth)]
            if me["avg_memory_bytes"] >= na["avg_memory_bytes"]:
                raise AssertionError(f"L={depth}: tiled workspace not below naive")
            if abs(me["top1"] - na["top1"]) > acc_tolerance:
                raise AssertionError(f"L={depth}: accuracy gap exceeds {acc_tolerance}")
    return rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "global_attention": [("full", {}), ("wo_global", {"use_global": False})],
    "temporal": [("full", {}), ("wo_temporal", {"use_temporal": False})],
    "kernel": [
        ("with_kernel", {"attention": "naive", "use_phi": True}),
        ("wo_kernel", {"attention": "naive", "use_phi": False}),
    ],
    "local_op": [("gin", {}), ("neighbor_mean", {"local_op": "mean"})],
    "pooling": [("mean", {}), ("sum", {"pooling": "sum"}), ("max", {"pooling": "max"})],
}


def ablate(
    dataset,
    splits,
    axis: str,
    base_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """Paired runs along one ablation axis under identical seeds.

    The first variant of each axis is the baseline; rows carry accuracy
    deltas against it. The kernel axis additionally records the
    per-layer max-logit profile under a stress initialization.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    rows = []
    for seed in seeds:
        base_top1: float | None = None
        for name, overrides in ABLATION_AXES[axis]:
            config = replace(base_config, **overrides)
            tc = replace(train_config, seed=seed)
            _, report = train(dataset, splits, config, tc)
            row = {
                "axis": axis,
                "variant": name,
                "seed": seed,
                "top1": report.top1,
                "top3": report.top3,
                "top5": report.top5,
            }
            if base_top1 is None:
                base_top1 = report.top1
                row["delta_top1"] = 0.0
            else:
                row["delta_top1"] = report.top1 - base_top1
            if axis == "kernel":
                phi_prof, raw_prof = stability_probe(
                    dataset, splits[0][: train_config.batch_size], config, seed=seed
                )
                active = phi_prof if config.use_phi else raw_prof
                row["layer_max_logits"] = "|".join(f"{v:.6g}" for v in active)
            rows.append(row)
            log.info("ablate %s/%s seed=%d top1=%.4f", axis, name, seed, report.top1)
    return rows


def stability_probe(
    dataset,
    indices,
    config: ModelConfig,
    seed: int = 0,
    qk_init_scale: float = 8.0,
) -> tuple[list[float], list[float]]:
    """Per-layer max pre-softmax logits under an adversarial large-magnitude
    query/key initialization, forward only.

    The stress init scales the query/key projections by ``qk_init_scale``
    and ties them (W_K = W_Q), giving Gram-structured logits whose raw
    maximum is max ||q||^2, the aligned-projection worst case that drives
    query-key overflow; the non-negative mapping can reach at most
    max ||relu(q)||^2 on the same states. The model runs once and both
    mappings are evaluated per block on that run's actual inputs; two
    independent trajectories would decorrelate at depth and reduce the
    comparison to extreme-value noise. Returns (phi_profile, raw_profile).
    """
    graphs = _fetch(dataset, indices)
    batch = collate(graphs)
    params = init_model_params(config, np.random.default_rng(seed), qk_init_scale=qk_init_scale)
    for block in params.blocks:
        block.att.wk.data = block.att.wq.data.copy()
    captured: list = []
    with no_grad():
        forward(batch, params, config, training=False, input_probe=captured)
    phi_profile = [logit_stats(dense, att, use_phi=True).max_logit for dense, att in captured]
    raw_profile = [logit_stats(dense, att, use_phi=False).max_logit for dense, att in captured]
    return phi_profile, raw_profile


# ---------------------------------------------------------------------------
# artifact emission
# ---------------------------------------------------------------------------


def write_report_files(report: MetricsReport, out_dir: str | Path, prefix: str = "metrics") -> list[Path]:
    """Dump metrics as CSVs plus an SVG of the loss / validation curves."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    scalar_path = out_dir / f"{prefix}.csv"
    with open(scalar_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["top1", repr(report.top1)])
        writer.writerow(["top3", repr(report.top3)])
        writer.writerow(["top5", repr(report.top5)])
        writer.writerow(["num_parameters", report.num_parameters])
        writer.writerow(["peak_attention_workspace_bytes", report.peak_attention_workspace_bytes])
        if report.latency_mean_ms is not None:
            writer.writerow(["latency_mean_ms", repr(report.latency_mean_ms)])
            writer.writerow(["latency_std_ms", repr(report.latency_std_ms)])
        for e, wc in enumerate(report.epoch_wall_clock):
            writer.writerow([f"epoch{e}_wall_clock_s", repr(wc)])
    written.append(scalar_path)

    if report.loss_curve:
        curve_path = out_dir / f"{prefix}_loss_curve.csv"
        with open(curve_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, v in enumerate(report.loss_curve):
                writer.writerow([i, repr(v)])
        written.append(curve_path)

    if report.confusion.size:
        conf_path = out_dir / f"{prefix}_confusion.csv"
        np.savetxt(conf_path, report.confusion, fmt="%d", delimiter=",")
        written.append(conf_path)

    if report.loss_curve:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
        ax1.plot(report.loss_curve, lw=0.8)
        ax1.set_xlabel("step")
        ax1.set_ylabel("training loss")
        if report.val_top1_curve:
            ax2.plot(range(1, len(report.val_top1_curve) + 1), report.val_top1_curve, marker="o")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation top-1")
        ax2.set_ylim(0, 1)
        fig.tight_layout()
        svg_path = out_dir / f"{prefix}_curves.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        written.append(svg_path)
    return written


def write_rows_csv(rows: list[dict], path: str | Path) -> Path:
    """Write a list of uniform dicts as CSV (bench / ablation tables)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)
    return path
