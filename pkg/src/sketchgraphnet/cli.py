"""Command-line surface for the whole pipeline.

Subcommands: build, stats, split, train, eval, bench, ablate, infer.
Each run writes a ``run_manifest.json`` capturing every config field plus
a content hash of the corpus it touched, so any result can be reproduced
from the manifest alone. Flag errors exit 2; pipeline errors exit 1 with
a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import ingest
from . import stats as stats_mod
from .model import (
    ModelConfig,
    collate,
    forward,
    load_checkpoint,
    load_model_config,
    predict_topk,
    save_checkpoint,
    save_model_config,
    softmax_probs,
)
from .store import (
    FLAG_SYNTHETIC_TS,
    FLAG_VARIANT_R,
    CorpusWriter,
    open_corpus,
    split_corpus,
    write_manifest,
)
from .tensor import no_grad
from .trainer import (
    TrainConfig,
    ablate,
    bench_attention,
    evaluate,
    train,
    write_report_files,
    write_rows_csv,
)

log = logging.getLogger(__name__)

EXCLUDED_CATEGORY = "line"


def default_data_dir() -> Path:
    return Path(os.environ.get("SKETCHGRAPHNET_DATA", "."))


def _resolve_input(path: str | Path) -> Path:
    """Relative input paths that don't exist locally are searched under
    the SKETCHGRAPHNET_DATA directory."""
    p = Path(path)
    if not p.is_absolute() and not p.exists():
        candidate = default_data_dir() / p
        if candidate.exists():
            return candidate
    return p


# ---------------------------------------------------------------------------
# corpus building
# ---------------------------------------------------------------------------


def build_corpus(
    inputs: list[str | Path],
    manifest_path: str | Path,
    out_prefix: str | Path,
    variant: str = "R",
    max_per_class: int = 0,
) -> dict:
    """Parse NDJSON inputs and write the corpus file pair.

    Variant R keeps only recognized records, A keeps everything; the
    recognized filter runs before the per-class cap. Unparseable lines
    and categories outside the manifest are skipped and counted.
    """
    if variant not in ("A", "R"):
        raise ValueError(f"variant must be A or R, got {variant!r}")
    names = ingest.load_manifest(manifest_path)
    if EXCLUDED_CATEGORY in names:
        log.warning("category %r is excluded from corpus builds; dropping it", EXCLUDED_CATEGORY)
        names = [n for n in names if n != EXCLUDED_CATEGORY]
        if not names:
            raise ValueError("manifest holds only excluded categories")
    label_of = {name: i for i, name in enumerate(names)}

    out_prefix = Path(out_prefix)
    data_path = out_prefix.with_suffix(".skgr")
    counts = np.zeros(len(names), dtype=np.int64)
    skipped = {"parse": 0, "unknown_category": 0, "filtered_variant": 0, "over_cap": 0, "excluded_category": 0}
    synthetic_ts = False

    flags = FLAG_VARIANT_R if variant == "R" else 0
    writer = CorpusWriter(data_path, num_classes=len(names), flags=flags)
    try:
        for source in inputs:
            for lineno, line in ingest.iter_ndjson(source):
                try:
                    sketch = ingest.parse_ndjson_line(line)
                except (ingest.MalformedJson, ingest.SchemaError, ingest.EmptySketch) as exc:
                    skipped["parse"] += 1
                    log.debug("%s:%d skipped: %s", source, lineno, exc)
                    continue
                if sketch.label == EXCLUDED_CATEGORY:
                    skipped["excluded_category"] += 1
                    continue
                label = label_of.get(sketch.label)
                if label is None:
                    skipped["unknown_category"] += 1
                    continue
                if variant == "R" and not sketch.recognized:
                    skipped["filtered_variant"] += 1
                    continue
                if max_per_class and counts[label] >= max_per_class:
                    skipped["over_cap"] += 1
                    continue
                if any(s.ts is None for s in sketch.strokes):
                    synthetic_ts = True
                graph = ingest.build_graph(ingest.normalize_canvas(sketch), label)
                writer.append(graph)
                counts[label] += 1
        if synthetic_ts:
            writer.flags |= FLAG_SYNTHETIC_TS
        header = writer.close()
    except Exception:
        raise
    if header.num_records == 0:
        raise ValueError("no records written; inputs empty or fully filtered")
    write_manifest(out_prefix.with_suffix(".manifest"), names)
    return {
        "records": header.num_records,
        "num_classes": header.num_classes,
        "flags": header.flags,
        "per_class_counts": {names[i]: int(c) for i, c in enumerate(counts)},
        "skipped": skipped,
        "data_path": str(data_path),
    }


# ---------------------------------------------------------------------------
# manifest plumbing
# ---------------------------------------------------------------------------


def _write_run_manifest(out_dir: Path, command: str, config: dict, corpus_hash: str | None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": config, "corpus_hash": corpus_hash}
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_splits(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return (
        np.asarray(data["train"], dtype=np.int64),
        np.asarray(data["val"], dtype=np.int64),
        np.asarray(data["test"], dtype=np.int64),
    )


def _model_config_from_args(args) -> ModelConfig:
    if args.model_config:
        config = load_model_config(args.model_config)
    else:
        config = ModelConfig()
    overrides = {}
    for key in ("hidden_dim", "num_blocks", "num_heads", "cheb_order", "pooling", "attention",
                "label_smoothing", "dropout", "block_q", "block_k"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return replace(config, **overrides) if overrides else config


def _corpus_names(corpus: str | Path) -> list[str]:
    manifest = _resolve_input(corpus).with_suffix(".manifest")
    if manifest.exists():
        return ingest.load_manifest(manifest)
    raise FileNotFoundError(f"corpus manifest not found: {manifest}")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_build(args) -> int:
    inputs = [_resolve_input(p) for p in args.input]
    summary = build_corpus(inputs, _resolve_input(args.manifest), args.out, args.variant, args.max_per_class)
    reader = open_corpus(summary["data_path"])
    config = {
        "inputs": [str(p) for p in args.input],
        "manifest": str(args.manifest),
        "out": str(args.out),
        "variant": args.variant,
        "max_per_class": args.max_per_class,
        "seed": args.seed,
        "summary": summary,
    }
    _write_run_manifest(Path(args.out).parent, "build", config, reader.content_hash())
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_stats(args) -> int:
    reader = open_corpus(_resolve_input(args.corpus))
    names = _corpus_names(args.corpus)
    stats = stats_mod.compute_stats(reader, names)
    out_dir = Path(args.out)
    if args.svg:
        written = stats_mod.emit_plots(stats, out_dir)
    else:
        written = list(stats_mod.write_stats_csv(stats, out_dir))
    config = {"corpus": str(args.corpus), "out": str(args.out), "svg": args.svg, "seed": args.seed}
    _write_run_manifest(out_dir, "stats", config, reader.content_hash())
    print(f"wrote {len(written)} files to {out_dir}")
    return 0


def _cmd_split(args) -> int:
    reader = open_corpus(_resolve_input(args.corpus))
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3:
        raise ValueError("--ratios needs three comma-separated numbers")
    train_idx, val_idx, test_idx = split_corpus(reader, ratios, seed=args.seed)
    payload = {
        "ratios": list(ratios),
        "seed": args.seed,
        "train": train_idx.tolist(),
        "val": val_idx.tolist(),
        "test": test_idx.tolist(),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload) + "\n", encoding="utf-8")
    config = {"corpus": str(args.corpus), "ratios": list(ratios), "seed": args.seed, "out": str(args.out)}
    _write_run_manifest(out.parent, "split", config, reader.content_hash())
    print(f"split sizes: train={len(train_idx)} val={len(val_idx)} test={len(test_idx)}")
    return 0


def _cmd_train(args) -> int:
    reader = open_corpus(_resolve_input(args.corpus))
    names = _corpus_names(args.corpus)
    splits = _load_splits(args.splits)
    config = _model_config_from_args(args)
    config = replace(config, num_classes=len(names))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for r in range(args.runs):
        tc = TrainConfig(
            batch_size=args.batch_size,
            epochs=args.epochs,
            lr0=args.lr0,
            seed=args.seed + r,
            workers=args.workers,
        )
        params, report = train(reader, splits, config, tc, measure_latency=False)
        results.append((tc.seed, params, report))
        print(f"run seed={tc.seed}: test top1={report.top1:.4f} top3={report.top3:.4f} top5={report.top5:.4f}")

    best_seed, best_params, best_report = max(results, key=lambda t: t[2].top1)
    spread = max(r.top1 for _, _, r in results) - min(r.top1 for _, _, r in results)
    save_checkpoint(best_params, out_dir / "checkpoint.npz")
    save_model_config(config, out_dir / "model_config.txt")
    write_manifest(out_dir / "labels.manifest", names)
    write_report_files(best_report, out_dir)

    config_dict = {
        "corpus": str(args.corpus),
        "splits": str(args.splits),
        "model_config": asdict(config),
        "train_config": {
            "batch_size": args.batch_size,
            "epochs": args.epochs,
            "lr0": args.lr0,
            "workers": args.workers,
        },
        "seed": args.seed,
        "runs": args.runs,
        "best_seed": best_seed,
        "top1_per_run": [r.top1 for _, _, r in results],
        "top1_spread": spread,
    }
    _write_run_manifest(out_dir, "train", config_dict, reader.content_hash())
    print(f"best run seed={best_seed}: top1={best_report.top1:.4f} (spread {spread:.4f})")
    return 0


def _load_run_dir(checkpoint: str | Path) -> tuple[ModelConfig, Path, list[str]]:
    run_dir = Path(checkpoint)
    if run_dir.is_file():
        run_dir = run_dir.parent
    config = load_model_config(run_dir / "model_config.txt")
    names = ingest.load_manifest(run_dir / "labels.manifest")
    return config, run_dir / "checkpoint.npz", names


def _cmd_eval(args) -> int:
    reader = open_corpus(_resolve_input(args.corpus))
    config, ckpt_path, names = _load_run_dir(args.checkpoint)
    params = load_checkpoint(ckpt_path, config)
    if args.splits:
        indices = _load_splits(args.splits)[2]
    else:
        indices = np.arange(len(reader))
    report = evaluate(params, reader, indices, config, batch_size=args.batch_size, measure_latency=True)
    out_dir = Path(args.out)
    write_report_files(report, out_dir, prefix="eval")
    config_dict = {
        "corpus": str(args.corpus),
        "checkpoint": str(args.checkpoint),
        "splits": str(args.splits) if args.splits else None,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    _write_run_manifest(out_dir, "eval", config_dict, reader.content_hash())
    best, worst = report.best_and_worst_classes()
    print(f"top1={report.top1:.4f} top3={report.top3:.4f} top5={report.top5:.4f}")
    print(f"latency over batch-1 passes: {report.latency_mean_ms:.2f} ms +- {report.latency_std_ms:.2f} ms")
    print("best classes:", [names[c] for c in best])
    print("worst classes:", [names[c] for c in worst])
    return 0


def _cmd_bench(args) -> int:
    reader = open_corpus(_resolve_input(args.corpus))
    splits = _load_splits(args.splits)
    names = _corpus_names(args.corpus)
    config = replace(_model_config_from_args(args), num_classes=len(names))
    tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr0=args.lr0, seed=args.seed)
    blocks = [int(x) for x in args.blocks.split(",")]
    rows = bench_attention(reader, splits, config, tc, blocks=blocks, acc_tolerance=args.acc_tolerance)
    out = Path(args.out)
    write_rows_csv(rows, out)
    config_dict = {
        "corpus": str(args.corpus),
        "splits": str(args.splits),
        "blocks": blocks,
        "epochs": args.epochs,
        "acc_tolerance": args.acc_tolerance,
        "seed": args.seed,
        "out": str(out),
    }
    _write_run_manifest(out.parent, "bench", config_dict, reader.content_hash())
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


def _cmd_ablate(args) -> int:
    reader = open_corpus(_resolve_input(args.corpus))
    splits = _load_splits(args.splits)
    names = _corpus_names(args.corpus)
    config = replace(_model_config_from_args(args), num_classes=len(names))
    tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr0=args.lr0, seed=args.seed)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(reader, splits, args.axis, config, tc, seeds=seeds)
    out = Path(args.out)
    write_rows_csv(rows, out)
    config_dict = {
        "corpus": str(args.corpus),
        "splits": str(args.splits),
        "axis": args.axis,
        "seeds": seeds,
        "epochs": args.epochs,
        "seed": args.seed,
        "out": str(out),
    }
    _write_run_manifest(out.parent, "ablate", config_dict, reader.content_hash())
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


def _cmd_infer(args) -> int:
    config, ckpt_path, names = _load_run_dir(args.checkpoint)
    params = load_checkpoint(ckpt_path, config)
    k = min(args.topk, len(names))
    for lineno, line in ingest.iter_ndjson(args.input):
        sketch = ingest.parse_ndjson_line(line)
        graph = ingest.build_graph(ingest.normalize_canvas(sketch), label_id=0)
        with no_grad():
            logits = forward(collate([graph]), params, config, training=False).data
        probs = softmax_probs(logits)[0]
        top = predict_topk(logits, k)[0]
        print(json.dumps({"line": lineno, "top": [[names[int(c)], float(probs[int(c)])] for c in top]}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model-config", default=None, help="key=value model config file")
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--num-blocks", type=int, default=None)
    p.add_argument("--num-heads", type=int, default=None)
    p.add_argument("--cheb-order", type=int, default=None)
    p.add_argument("--pooling", choices=["mean", "sum", "max"], default=None)
    p.add_argument("--attention", choices=["memeff", "naive"], default=None)
    p.add_argument("--label-smoothing", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--block-q", type=int, default=None)
    p.add_argument("--block-k", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchgraphnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="convert NDJSON sketches into a corpus")
    p.add_argument("--input", action="append", required=True, help="NDJSON file (.gz ok); repeatable")
    p.add_argument("--manifest", required=True, help="category manifest, one name per line")
    p.add_argument("--out", required=True, help="output prefix (writes PREFIX.skgr/.idx/.manifest)")
    p.add_argument("--variant", choices=["A", "R"], default="R")
    p.add_argument("--max-per-class", type=int, default=0, help="0 = unlimited")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("stats", help="structural statistics of a corpus")
    p.add_argument("--corpus", required=True, help="PREFIX.skgr path")
    p.add_argument("--out", required=True)
    p.add_argument("--no-svg", dest="svg", action="store_false")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("split", help="stratified train/val/test index split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ratios", default="0.9,0.05,0.05")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train the classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=7)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr0", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=1, help="independent runs; best is kept")
    p.add_argument("--workers", type=int, default=1)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (incl. batch-1 latency protocol)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True, help="training run directory")
    p.add_argument("--splits", default=None, help="use the test part; defaults to all records")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="attention variants x depth efficiency table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", default="4,6,8")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr0", type=float, default=5e-4)
    p.add_argument("--acc-tolerance", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="paired ablation runs along one axis")
    p.add_argument("--corpus", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True,
                   choices=["global_attention", "temporal", "kernel", "local_op", "pooling"])
    p.add_argument("--seeds", default="0")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr0", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("infer", help="classify sketches from an NDJSON file")
    p.add_argument("--checkpoint", required=True, help="training run directory")
    p.add_argument("--input", required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_infer)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SKETCHGRAPHNET_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface module errors as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
