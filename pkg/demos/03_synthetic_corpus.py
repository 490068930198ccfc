#!/usr/bin/env python3
"""The seeded synthetic track corpus and the sampling plans built on top of it.

Generated frames mimic the prepared inspection imagery: ballast texture, two
rails, regular sleeper bands, and (for the anomalous class) dark decay blotches
confined to the sleepers, each with a ground-truth mask. Sampling plans then
realize the imbalance / data-scale designs exactly.
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from railfcdd.datapipe import (SyntheticSpec, generate_synthetic, sample_imbalanced,
                               split_manifest, synthesize_pair)

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

spec = SyntheticSpec(normal_count=4, anomalous_count=4, seed=42)
base, painted, mask = synthesize_pair(spec, 0)

fig, axes = plt.subplots(1, 3, figsize=(12, 4))
axes[0].imshow(base)
axes[0].set_title("normal frame")
axes[1].imshow(painted)
axes[1].set_title("with decay blotches")
axes[2].imshow(mask, cmap="gray")
axes[2].set_title("ground-truth mask")
for ax in axes:
    ax.set_xticks([]), ax.set_yticks([])
fig.tight_layout()
fig.savefig(OUT / "synthetic_frames.png")
print(f"blotch pixels: {mask.sum()}, frame differs only inside the mask:",
      bool((base[~mask] == painted[~mask]).all()))

with tempfile.TemporaryDirectory() as tmp:
    manifest = generate_synthetic(spec, tmp)
    print("generated counts (normal, anomalous):", manifest.counts())

    # the class-imbalance design: k x 800 normals against the full anomalous pool
    normal_pool = [it for it in manifest.items if it.label == 0] * 900  # pretend-large pool
    for i, it in enumerate(normal_pool):
        normal_pool[i] = type(it)(f"{it.frame_id}#{i}", it.path, it.label)
    anomalous_pool = [it for it in manifest.items if it.label == 1] * 250
    for i, it in enumerate(anomalous_pool):
        anomalous_pool[i] = type(it)(f"{it.frame_id}#{i}", it.path, it.label)
    for ratio in (1, 2, 3, 4):
        plan = sample_imbalanced(normal_pool[:3372], anomalous_pool[:872], ratio, seed=0,
                                 anomalous_count=872)
        print(f"imbalance {ratio}:1 ->", plan.counts())

    split = split_manifest(manifest, (65, 15, 20), seed=0)
    sizes = {s: len(split.split_items(s)) for s in ("train", "calibration", "test")}
    print("65:15:20 split of", len(split.items), "frames ->", sizes)
print(f"figures written to {OUT}/")
