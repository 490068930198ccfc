"""Detection metrics (AUC / precision / recall / F1) and the ablation grids
over imbalance ratio, data scale, and backbone choice."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import scoring
from .datapipe import DatasetManifest, load_image, sample_imbalanced, sample_scaled, split_manifest
from .losses import TrainConfig, pseudo_huber, train_fcdd
from .model import BackboneSpec, ModelWeights, forward_maps


class MetricInputError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricInputError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class PRF1Result:
    precision: float
    recall: float
    f1: float
    degenerate: bool  # some denominator was zero and yielded 0


@dataclass
class MetricsReport:
    auc: float
    f1: float
    precision: float
    recall: float
    threshold: float
    run_id: str = ""
    dataset_digest: str = ""
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {"auc": self.auc, "f1": self.f1, "precision": self.precision,
                "recall": self.recall, "threshold": self.threshold, "run_id": self.run_id,
                "dataset_digest": self.dataset_digest, "degenerate": self.degenerate}


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random anomalous score exceeds a random normal one; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricInputError("AUC needs both normal and anomalous samples")
    ranks = rankdata(scores, method="average")
    u = float(np.sum(ranks[labels == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def confusion_at(scores: Sequence[float], labels: Sequence[int],
                 threshold: float) -> ConfusionCounts:
    """Counts under the rule: score >= threshold predicts anomalous."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    return ConfusionCounts(tp=int(np.sum(pred & (labels == 1))),
                           fp=int(np.sum(pred & (labels == 0))),
                           tn=int(np.sum(~pred & (labels == 0))),
                           fn=int(np.sum(~pred & (labels == 1))))


def prf1(counts: ConfusionCounts) -> PRF1Result:
    degenerate = False
    if counts.tp + counts.fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = counts.tp / (counts.tp + counts.fp)
    if counts.tp + counts.fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = counts.tp / (counts.tp + counts.fn)
    if precision + recall == 0.0:
        return PRF1Result(precision, recall, 0.0, True)
    return PRF1Result(precision, recall, 2.0 * precision * recall / (precision + recall),
                      degenerate)


def score_manifest_split(weights: ModelWeights, manifest: DatasetManifest, split: str,
                         batch_size: int = 32):
    """(scores, labels, items) for one split: forward map -> pseudo-Huber -> score sum."""
    items = manifest.split_items(split)
    if not items:
        raise MetricInputError(f"manifest has no items in split {split!r}")
    scores = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        frames = [load_image(it.path) for it in chunk]
        for fmap in forward_maps(weights, frames, batch_size=batch_size):
            scores.append(scoring.anomaly_score(pseudo_huber(fmap)))
    labels = np.asarray([it.label for it in items])
    return np.asarray(scores, dtype=np.float64), labels, items


def evaluate(weights: ModelWeights, manifest: DatasetManifest, threshold: float,
             split: str = "test", run_id: str = "", batch_size: int = 32) -> MetricsReport:
    """Score a labeled split and report AUC plus thresholded precision/recall/F1."""
    scores, labels, _ = score_manifest_split(weights, manifest, split, batch_size)
    counts = confusion_at(scores, labels, threshold)
    p = prf1(counts)
    return MetricsReport(auc(scores, labels), p.f1, p.precision, p.recall, threshold,
                         run_id=run_id, dataset_digest=manifest.digest(),
                         degenerate=p.degenerate)


@dataclass
class AblationCell:
    setting: str
    report: MetricsReport | None
    error: str | None = None


@dataclass
class AblationGrid:
    axis: str
    cells: list[AblationCell] = field(default_factory=list)

    @property
    def best_by_f1(self) -> str | None:
        """Best setting by F1, ties broken by higher AUC."""
        scored = [(c.report.f1, c.report.auc, c.setting) for c in self.cells
                  if c.report is not None]
        if not scored:
            return None
        best = max(scored, key=lambda t: (t[0], t[1]))
        return best[2]

    @property
    def failures(self) -> list[tuple[str, str]]:
        return [(c.setting, c.error) for c in self.cells if c.error]


@dataclass
class AblationBase:
    """Shared ingredients for one ablation grid; one model is trained per cell."""

    train_config: TrainConfig
    backbone: BackboneSpec
    normal_pool: list = field(default_factory=list)
    anomalous_pool: list = field(default_factory=list)
    manifest: DatasetManifest | None = None  # fixed dataset (backbone axis)
    normal_basis: int = 800
    scale_units: tuple[int, int] = (2000, 1000)
    pretrained: str = "fetch"
    trunk_uris: dict = field(default_factory=dict)


AXES = ("imbalance_ratio", "data_scale", "backbone")


def _cell_manifest(axis: str, setting, base: AblationBase) -> DatasetManifest:
    seed = base.train_config.seed
    if axis == "imbalance_ratio":
        m = sample_imbalanced(base.normal_pool, base.anomalous_pool, int(setting), seed,
                              normal_basis=base.normal_basis)
    elif axis == "data_scale":
        m = sample_scaled(base.normal_pool, base.anomalous_pool, int(setting), seed,
                          normal_unit=base.scale_units[0], anomalous_unit=base.scale_units[1])
    else:
        if base.manifest is None:
            raise ValueError("backbone axis requires a fixed manifest")
        return base.manifest
    return split_manifest(m, base.train_config.split_ratio, seed)


def run_ablation(axis: str, settings: Sequence, base: AblationBase,
                 out_dir: Path | str | None = None):
    """Train/evaluate one cell per setting with a shared seed; emit the results table.

    Returns:
        (AblationGrid, table_text). Cell failures are recorded on the grid and
        the remaining cells still run.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if not settings:
        raise ValueError("settings must be non-empty")
    grid = AblationGrid(axis)
    for setting in settings:
        label = str(setting)
        try:
            if axis == "backbone":
                spec = BackboneSpec.for_backbone(label, base.backbone.input_side)
            else:
                spec = base.backbone
            manifest = _cell_manifest(axis, setting, base)
            weights, _ = train_fcdd(manifest, spec, base.train_config,
                                    pretrained=base.pretrained,
                                    trunk_uri=base.trunk_uris.get(spec.id))
            calib_scores, calib_labels, _ = score_manifest_split(
                weights, manifest, "calibration", base.train_config.batch_size)
            thr = scoring.best_f1_threshold(calib_scores, calib_labels)
            report = evaluate(weights, manifest, thr, split="test",
                              batch_size=base.train_config.batch_size)
            grid.cells.append(AblationCell(label, report))
        except Exception as exc:
            grid.cells.append(AblationCell(label, None, f"{type(exc).__name__}: {exc}"))
    table = format_ablation_table(grid)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"ablation_{axis}.txt").write_text(table)
        save_ablation_csv(grid, out_dir / f"ablation_{axis}.csv")
    return grid, table


_AXIS_HEADINGS = {"imbalance_ratio": "norm. : anom.", "data_scale": "norm. , anom.",
                  "backbone": "Backbone"}


def format_ablation_table(grid: AblationGrid) -> str:
    """Aligned plain-text table: setting, AUC, F1, Precision, Recall."""
    heading = _AXIS_HEADINGS.get(grid.axis, grid.axis)
    rows = [[heading, "AUC", "F1", "Precision", "Recall"]]
    for cell in grid.cells:
        if cell.report is None:
            rows.append([cell.setting, "failed", "-", "-", "-"])
        else:
            r = cell.report
            rows.append([cell.setting, f"{r.auc:.4f}", f"{r.f1:.4f}",
                         f"{r.precision:.4f}", f"{r.recall:.4f}"])
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    lines = ["  ".join(col.ljust(w) for col, w in zip(row, widths)).rstrip() for row in rows]
    best = grid.best_by_f1
    lines.append(f"best_by_f1: {best if best is not None else 'none'}")
    return "\n".join(lines) + "\n"


def save_ablation_csv(grid: AblationGrid, path: Path | str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "auc", "f1", "precision", "recall", "error"])
        for cell in grid.cells:
            if cell.report is None:
                writer.writerow([cell.setting, "", "", "", "", cell.error])
            else:
                r = cell.report
                writer.writerow([cell.setting, repr(r.auc), repr(r.f1), repr(r.precision),
                                 repr(r.recall), ""])


def save_metrics_csv(report: MetricsReport, path: Path | str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["auc", "f1", "precision", "recall", "threshold", "run_id",
                         "dataset_digest"])
        writer.writerow([repr(report.auc), repr(report.f1), repr(report.precision),
                         repr(report.recall), repr(report.threshold), report.run_id,
                         report.dataset_digest])


def parse_ablation_csv(path: Path | str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
