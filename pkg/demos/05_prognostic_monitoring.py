#!/usr/bin/env python3
"""Risk-weighted scores across repeated inspections of the same track.

Frame scores are multiplied by a position-dependent derailment-risk weight
(higher on sharp curves), recorded per 0.6 m track bucket after every
inspection, and compared against the bucket's history so a deteriorating
sleeper is flagged before the next scheduled repair window.
"""

import tempfile
from pathlib import Path

import numpy as np

from railfcdd.clistore import InspectionHistory, prognostic_compare
from railfcdd.scoring import (RiskWeightEntry, RiskWeightTable, ScoredFrame,
                              risk_weighted_score)

# a small risk table: straight track, then a sharp curve at 120-180 m
table = RiskWeightTable([
    RiskWeightEntry(0.0, 120.0, curve_ratio=0.00, weight=1.0),
    RiskWeightEntry(120.0, 180.0, curve_ratio=0.12, weight=2.0),
])
for position in (60.0, 150.0, 500.0):
    weight, score, default_used = risk_weighted_score(5.0, position, table)
    note = " (outside the table: default weight)" if default_used else ""
    print(f"raw 5.0 at {position:5.1f} m -> weight {weight}, weighted {score}{note}")

# three inspections of the same stretch; one sleeper decays over time
rng = np.random.default_rng(1)
positions = np.arange(0.3, 30.0, 0.6)
decaying = 12  # index of the bucket that deteriorates

with tempfile.TemporaryDirectory() as tmp:
    history = InspectionHistory(Path(tmp) / "history", bucket_width_m=0.6)
    for inspection, (date, decay_boost) in enumerate(
            (("2026-04-01", 0.0), ("2026-06-01", 0.8), ("2026-08-01", 3.0))):
        scored = []
        for i, pos in enumerate(positions):
            raw = float(rng.uniform(0.8, 1.4)) + (decay_boost if i == decaying else 0.0)
            weight, weighted, _ = risk_weighted_score(raw, pos, table)
            scored.append(ScoredFrame(f"insp{inspection}:f{i}", raw, weight, weighted,
                                      track_position=float(pos),
                                      run_id=f"inspection-{inspection}"))
        appended, skipped, _ = history.record_inspection(f"inspection-{inspection}",
                                                         scored, date)
        print(f"{date}: recorded {appended} buckets")

    print("\nper-bucket trend vs. prior inspections (flag at 1.5x prior mean):")
    for bucket in history.buckets():
        report = prognostic_compare(history, bucket, window=5, factor=1.5)
        if report.flagged:
            rel = f"{100 * report.relative_change:+.0f}%"
            print(f"  bucket {bucket:3d} (~{bucket * 0.6:5.1f} m): latest "
                  f"{report.latest_score:.2f} vs prior mean {report.prior_mean:.2f} "
                  f"({rel}) -> FLAGGED for repair priority")
    unflagged = sum(1 for b in history.buckets()
                    if not prognostic_compare(history, b).flagged)
    print(f"  ({unflagged} other buckets show no significant change)")
