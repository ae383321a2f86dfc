"""Train the hybrid classifier on a small synthetic corpus.

Builds a 10-class corpus, trains a reduced configuration for a few
epochs, evaluates with the batch-1 latency protocol, and saves loss and
validation curves. Takes a couple of minutes on one CPU core.
"""

from pathlib import Path

import numpy as np

import sketchgraphnet as sg
from sketchgraphnet.cli import build_corpus
from sketchgraphnet.model import ModelConfig, save_checkpoint
from sketchgraphnet.synth import SYNTH_CATEGORIES, write_synthetic_ndjson
from sketchgraphnet.trainer import TrainConfig, evaluate, train, write_report_files

OUT = Path("demo_out/training")
OUT.mkdir(parents=True, exist_ok=True)

print("=== data ===")
ndjson = write_synthetic_ndjson(OUT / "sketches.ndjson", per_class=150, seed=1, noisy_fraction=0.25)
manifest = OUT / "categories.txt"
manifest.write_text("".join(c + "\n" for c in SYNTH_CATEGORIES))
build_corpus([ndjson], manifest, OUT / "corpus", variant="R")
reader = sg.open_corpus(OUT / "corpus.skgr")
splits = sg.split_corpus(reader, (0.8, 0.1, 0.1), seed=0)
print(f"{len(reader)} records; splits {[len(s) for s in splits]}\n")

print("=== training (reduced config: d=64, 2 blocks, 3 epochs) ===")
config = ModelConfig(hidden_dim=64, num_blocks=2, num_classes=len(SYNTH_CATEGORIES))
tc = TrainConfig(batch_size=64, epochs=3, lr0=5e-4, seed=0)
params, report = train(reader, splits, config, tc, log_every=0)
for epoch, (wall, val) in enumerate(zip(report.epoch_wall_clock, report.val_top1_curve)):
    print(f"epoch {epoch}: {wall:5.1f}s  val top-1 {val:.3f}")
print(f"\ntest: top1={report.top1:.3f} top3={report.top3:.3f} top5={report.top5:.3f}")
print(f"parameters: {report.num_parameters:,}")
print(f"peak transient attention workspace during training: "
      f"{report.peak_attention_workspace_bytes:,} bytes")

print("\n=== batch-1 latency protocol ===")
lat = evaluate(params, reader, splits[2], config, measure_latency=True)
print(f"mean over 100 single-sample forward passes: "
      f"{lat.latency_mean_ms:.2f} ms +- {lat.latency_std_ms:.2f} ms")

print("\n=== confusion analysis ===")
names = sg.load_manifest(OUT / "corpus.manifest")
best, worst = report.best_and_worst_classes(3)
print("best classes: ", [f"{names[c]} ({report.per_class_accuracy[c]:.2f})" for c in best])
print("worst classes:", [f"{names[c]} ({report.per_class_accuracy[c]:.2f})" for c in worst])

save_checkpoint(params, OUT / "checkpoint.npz")
files = write_report_files(report, OUT)
print(f"\nsaved checkpoint and {len(files)} report files to {OUT}")
