"""Paired ablations and the attention-efficiency table on a small corpus.

Runs the global-attention ablation axis under identical seeds, prints the
per-depth attention benchmark (workspace, wall clock, accuracy for both
execution paths), and shows the stability probe that contrasts the two
query/key mappings under an adversarially scaled initialization.
"""

from pathlib import Path

import numpy as np

import sketchgraphnet as sg
from sketchgraphnet.cli import build_corpus
from sketchgraphnet.model import ModelConfig
from sketchgraphnet.synth import SYNTH_CATEGORIES, write_synthetic_ndjson
from sketchgraphnet.trainer import TrainConfig, ablate, bench_attention, stability_probe, write_rows_csv

OUT = Path("demo_out/ablation")
OUT.mkdir(parents=True, exist_ok=True)

ndjson = write_synthetic_ndjson(OUT / "sketches.ndjson", per_class=120, seed=3, noisy_fraction=0.25)
manifest = OUT / "categories.txt"
manifest.write_text("".join(c + "\n" for c in SYNTH_CATEGORIES))
build_corpus([ndjson], manifest, OUT / "corpus", variant="R")
reader = sg.open_corpus(OUT / "corpus.skgr")
splits = sg.split_corpus(reader, (0.8, 0.1, 0.1), seed=0)
config = ModelConfig(hidden_dim=64, num_blocks=2, num_classes=len(SYNTH_CATEGORIES))
tc = TrainConfig(batch_size=64, epochs=2, seed=0)

print("=== 1. global-attention ablation (paired seeds) ===")
rows = ablate(reader, splits, "global_attention", config, tc, seeds=(0, 1))
write_rows_csv(rows, OUT / "ablate_global.csv")
print(f"{'variant':<12} {'seed':>4} {'top1':>7} {'delta':>8}")
for r in rows:
    print(f"{r['variant']:<12} {r['seed']:>4} {r['top1']:>7.3f} {r['delta_top1']:>+8.3f}")

print("\n=== 2. attention benchmark across depths ===")
bench_rows = bench_attention(reader, splits, config, tc, blocks=(2, 4), acc_tolerance=0.2)
write_rows_csv(bench_rows, OUT / "bench.csv")
print(f"{'attention':<9} {'blocks':>6} {'workspace bytes':>16} {'epoch s':>8} {'top1':>7}")
for r in bench_rows:
    print(f"{r['attention']:<9} {r['conv_blocks']:>6} {r['avg_memory_bytes']:>16,} "
          f"{r['avg_epoch_time_s']:>8.1f} {r['top1']:>7.3f}")

print("\n=== 3. stability probe at depth 8 (adversarial query/key init) ===")
deep = ModelConfig(hidden_dim=64, num_blocks=8, num_classes=len(SYNTH_CATEGORIES),
                   attention="naive", use_phi=False)
with np.errstate(over="ignore", invalid="ignore"):
    phi_prof, raw_prof = stability_probe(reader, splits[0][:64], deep, seed=8, qk_init_scale=8.0)
print(f"{'layer':>5} {'mapped max-logit':>17} {'raw max-logit':>15} {'ratio':>6}")
for i, (p, r) in enumerate(zip(phi_prof, raw_prof)):
    print(f"{i:>5} {p:>17.3e} {r:>15.3e} {r / p:>6.2f}")
print("\nthe non-negative mapping keeps the logit magnitudes below the raw")
print("query-key interaction at every depth on the stressed run")
