"""Per-frame anomaly scores, derailment-risk weighting, threshold calibration,
and score histograms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class RiskTableError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class RiskWeightEntry:
    start_m: float
    end_m: float
    curve_ratio: float
    weight: float

    def __post_init__(self):
        if self.end_m <= self.start_m:
            raise RiskTableError(f"empty position range [{self.start_m}, {self.end_m})")
        if self.weight < 0:
            raise RiskTableError("weights must be non-negative")


@dataclass
class RiskWeightTable:
    """Position-indexed derailment-risk weights; overlaps are rejected at load."""

    entries: list[RiskWeightEntry] = field(default_factory=list)
    default_weight: float = 1.0

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.start_m)
        for a, b in zip(self.entries, self.entries[1:]):
            if b.start_m < a.end_m:
                raise RiskTableError(
                    f"overlapping ranges [{a.start_m},{a.end_m}) and [{b.start_m},{b.end_m})")
        if self.default_weight < 0:
            raise RiskTableError("default_weight must be non-negative")

    def lookup(self, position_m: float | None) -> tuple[float, bool]:
        """(weight, default_used) for a track position; half-open ranges [start, end)."""
        if position_m is not None:
            for e in self.entries:
                if e.start_m <= position_m < e.end_m:
                    return e.weight, False
        return self.default_weight, True

    @classmethod
    def load(cls, path: Path | str, default_weight: float = 1.0) -> "RiskWeightTable":
        entries = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#") or row[0].strip() == "start_m":
                    continue
                start, end, ratio, weight = (float(c) for c in row[:4])
                entries.append(RiskWeightEntry(start, end, ratio, weight))
        return cls(entries, default_weight)

    def save(self, path: Path | str):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["start_m", "end_m", "curve_ratio", "weight"])
            for e in self.entries:
                writer.writerow([e.start_m, e.end_m, e.curve_ratio, e.weight])


@dataclass
class ScoredFrame:
    frame_id: str
    raw_score: float
    risk_weight: float = 1.0
    risk_weighted_score: float | None = None
    track_position: float | None = None
    label: int | None = None
    run_id: str = ""
    default_weight_used: bool = False

    def __post_init__(self):
        if self.raw_score < 0:
            raise ValueError("raw_score must be non-negative")
        if self.risk_weighted_score is None:
            self.risk_weighted_score = self.risk_weight * self.raw_score


@dataclass
class Threshold:
    value: float
    selection_rule: str
    calibration_run_id: str = ""


def anomaly_score(field_map) -> float:
    """Sum of all receptive-field elements (post-pseudo-Huber, so non-negative)."""
    values = np.asarray(field_map.values if hasattr(field_map, "values") else field_map,
                        dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("negative field element: apply pseudo_huber before scoring")
    return float(values.sum())


def risk_weighted_score(raw: float, position_m: float | None,
                        table: RiskWeightTable) -> tuple[float, float, bool]:
    """(weight, weighted score, default_used) for one frame."""
    if raw < 0:
        raise ValueError("raw score must be non-negative")
    weight, default_used = table.lookup(position_m)
    return weight, weight * raw, default_used


def score_frame(field_map, position_m: float | None = None,
                table: RiskWeightTable | None = None, run_id: str = "") -> ScoredFrame:
    raw = anomaly_score(field_map)
    table = table or RiskWeightTable()
    weight, weighted, default_used = risk_weighted_score(raw, position_m, table)
    return ScoredFrame(getattr(field_map, "frame_id", None) or "", raw, weight, weighted,
                       position_m, run_id=run_id, default_weight_used=default_used)


def _threshold_candidates(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([distinct[0] - 1.0], mids, [distinct[-1] + 1.0]))


def _f1_counts(scores, labels, threshold):
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    denom = 2 * tp + fp + fn
    return (2.0 * tp / denom) if denom else 0.0


def f1_at_threshold(scores, labels, threshold: float) -> float:
    return _f1_counts(np.asarray(scores, dtype=np.float64), np.asarray(labels), threshold)


def best_f1_threshold(scores, labels) -> float:
    """F1-maximizing threshold over all adjacent-score midpoints, ties to the highest."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    best_thr, best_f1 = None, -1.0
    for thr in _threshold_candidates(scores):
        f1 = _f1_counts(scores, labels, thr)
        if f1 > best_f1 or (f1 == best_f1 and thr > best_thr):
            best_thr, best_f1 = float(thr), f1
    return best_thr


def calibrate_threshold(scored: Sequence[ScoredFrame], use: str = "raw",
                        run_id: str = "") -> Threshold:
    """Pick the calibration threshold by midpoint sweep on labeled scores."""
    labeled = [s for s in scored if s.label is not None]
    labels = np.asarray([s.label for s in labeled])
    if not np.any(labels == 1):
        raise CalibrationError("calibration set has no anomalous samples")
    if not np.any(labels == 0):
        raise CalibrationError("calibration set has no normal samples")
    key = "raw_score" if use == "raw" else "risk_weighted_score"
    scores = np.asarray([getattr(s, key) for s in labeled], dtype=np.float64)
    value = best_f1_threshold(scores, labels)
    return Threshold(value, f"max_f1_midpoint_sweep[{use}]", run_id)


@dataclass
class HistogramResult:
    edges: np.ndarray
    normal_counts: np.ndarray
    anomalous_counts: np.ndarray
    overlap_fraction: float  # samples in bins occupied by both labels
    table_text: str
    png_bytes: bytes


def score_histogram(scored: Sequence[ScoredFrame], bins: int = 20,
                    use: str = "raw") -> HistogramResult:
    """Per-label equal-width binning over the combined score range, plus a plot."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not scored:
        raise ValueError("no scores to bin")
    key = "raw_score" if use == "raw" else "risk_weighted_score"
    values = np.asarray([getattr(s, key) for s in scored], dtype=np.float64)
    labels = np.asarray([s.label if s.label is not None else 0 for s in scored])
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        hi = lo + 1.0  # single-valued scores occupy one bin
    edges = np.linspace(lo, hi, bins + 1)
    normal_counts, _ = np.histogram(values[labels == 0], bins=edges)
    anomalous_counts, _ = np.histogram(values[labels == 1], bins=edges)
    both = (normal_counts > 0) & (anomalous_counts > 0)
    overlap = float((normal_counts[both].sum() + anomalous_counts[both].sum()) / len(values))

    lines = ["bin_lo,bin_hi,normal,anomalous"]
    for i in range(bins):
        lines.append(f"{edges[i]:.6g},{edges[i + 1]:.6g},{normal_counts[i]},{anomalous_counts[i]}")
    table_text = "\n".join(lines) + "\n"

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    centers = (edges[:-1] + edges[1:]) / 2.0
    width = (edges[1] - edges[0]) * 0.9
    ax.bar(centers, normal_counts, width=width, alpha=0.6, label="normal")
    ax.bar(centers, anomalous_counts, width=width, alpha=0.6, label="anomalous")
    ax.set_xlabel(f"{key} per frame")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png")
    plt.close(fig)

    return HistogramResult(edges, normal_counts, anomalous_counts, overlap, table_text,
                           buf.getvalue())


def write_score_log(scored: Sequence[ScoredFrame], path: Path | str):
    """CSV rows: run_id,frame_id,position_m,raw_score,risk_weight,risk_weighted_score,label."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "frame_id", "position_m", "raw_score", "risk_weight",
                         "risk_weighted_score", "label"])
        for s in scored:
            writer.writerow([s.run_id, s.frame_id,
                             "" if s.track_position is None else repr(float(s.track_position)),
                             repr(float(s.raw_score)), repr(float(s.risk_weight)),
                             repr(float(s.risk_weighted_score)),
                             "" if s.label is None else s.label])


def read_score_log(path: Path | str) -> list[ScoredFrame]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ScoredFrame(
                frame_id=row["frame_id"],
                raw_score=float(row["raw_score"]),
                risk_weight=float(row["risk_weight"]),
                risk_weighted_score=float(row["risk_weighted_score"]),
                track_position=float(row["position_m"]) if row["position_m"] else None,
                label=int(row["label"]) if row["label"] else None,
                run_id=row["run_id"]))
    return out
