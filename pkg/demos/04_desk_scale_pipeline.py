#!/usr/bin/env python3
"""End-to-end desk-scale run: corpus -> training -> metrics -> heatmaps.

By default this uses a reduced corpus (200 normal / 100 anomalous, 12 epochs)
that separates cleanly in a few minutes on a laptop CPU; pass --full for the
400/200, 30-epoch recipe used by the acceptance suite.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from railfcdd import datapipe, evalharness, heatmap, losses, model, scoring

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true", help="224^2, 400/200 frames, 30 epochs")
args = parser.parse_args()

spec = model.BackboneSpec()
if args.full:
    synth = datapipe.SyntheticSpec(normal_count=400, anomalous_count=200, seed=11)
    tc = losses.TrainConfig(seed=11)
else:
    synth = datapipe.SyntheticSpec(normal_count=200, anomalous_count=100, seed=11)
    tc = losses.TrainConfig(epochs=12, seed=11)

with tempfile.TemporaryDirectory() as tmp:
    manifest = datapipe.generate_synthetic(synth, tmp)
    manifest = datapipe.split_manifest(manifest, tc.split_ratio, tc.seed)
    print(f"corpus: {manifest.counts()}, splits:",
          {s: len(manifest.split_items(s)) for s in ("train", "calibration", "test")})

    weights, log = losses.train_fcdd(manifest, spec, tc, progress=True)

    calib_scores, calib_labels, _ = evalharness.score_manifest_split(
        weights, manifest, "calibration")
    threshold = scoring.best_f1_threshold(calib_scores, calib_labels)
    report = evalharness.evaluate(weights, manifest, threshold)
    print(f"\ncalibrated threshold {threshold:.3f}")
    print(f"test AUC {report.auc:.4f}  F1 {report.f1:.4f}  "
          f"P {report.precision:.4f}  R {report.recall:.4f}")

    # score histogram over the test split
    test_scores, test_labels, items = evalharness.score_manifest_split(
        weights, manifest, "test")
    scored = [scoring.ScoredFrame(it.frame_id, float(s), label=it.label)
              for s, it in zip(test_scores, items)]
    hist = scoring.score_histogram(scored, bins=16)
    (OUT / "score_histogram.png").write_bytes(hist.png_bytes)
    print(f"score-histogram overlap fraction: {hist.overlap_fraction:.3f}")

    # deterioration marks for the first few anomalous test frames
    anomalous = [it for it in items if it.label == 1][:3]
    frames = [datapipe.Frame(it.frame_id, datapipe.load_image(it.path)) for it in anomalous]
    results, failures = heatmap.batch_heatmaps(weights, frames)
    for (heat, rendered), it in zip(results, anomalous):
        stem = OUT / f"mark_{Path(it.path).stem}"
        heatmap.write_heatmap_files(heat, rendered, stem, backbone_id=weights.backbone_id)
    print(f"wrote {len(results)} deterioration-mark heatmaps to {OUT}/")
