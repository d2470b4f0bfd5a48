"""A tour of the synthetic benchmark.

Two domains share the same tissue-like generator.  The target only differs by
a small darkening of every colour channel, which is enough to fool a model
trained on the source.  This script generates both domains, prints split
sizes and class balance, and writes a few example images to ``demo_out/``.

    python demos/01_benchmark_tour.py
"""
from pathlib import Path

import numpy as np

from sfdadep import pnm
from sfdadep.experiments import debias_benchmark
from sfdadep.synthbench import generate_dataset

OUT = Path("demo_out/tour")

bench = debias_benchmark(seed=0)
source = generate_dataset(bench.source, bench.source_counts, bench.k)
target = generate_dataset(bench.target, bench.target_counts, bench.k)

for name, ds in (("source", source), ("target", target)):
    labels = np.array([s.label for s in ds["train"]])
    print(f"{name:6s} splits {ds.counts()}  train abnormal fraction {labels.mean():.2f}")

# The shift is subtle to the eye: mean colour per domain.
for name, ds in (("source", source), ("target", target)):
    px = np.stack([s.pixels for s in ds["train"]])
    print(f"{name:6s} mean RGB {np.round(px.mean(axis=(0, 1, 2)), 3)}")

# Abnormal images carry a blob mask; normal ones have an empty mask.
OUT.mkdir(parents=True, exist_ok=True)
for s in source["val_pxap"][:3] + source["train"][:3]:
    pnm.write(OUT / f"source_{s.id:04d}_label{s.label}.ppm", np.round(s.pixels * 255).astype(np.uint8))
    pnm.write(OUT / f"source_{s.id:04d}_mask.pgm", s.mask * 255)
    print(f"id {s.id}: label {s.label}, foreground {100 * s.mask.mean():.1f}% of pixels")
print(f"example images in {OUT}/")
