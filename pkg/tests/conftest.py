"""Shared fixtures.

The desk-scale fixture performs one full training run (224^2 synthetic corpus,
400 normal / 200 anomalous, 30 epochs at the default recipe) through the CLI and
is shared by the loss-curve, evaluation, and acceptance tests; the acceptance
determinism check repeats the run itself.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from railfcdd import clistore
from railfcdd.datapipe import DatasetManifest, SyntheticSpec, generate_synthetic, split_manifest
from railfcdd.losses import EpochRecord, TrainingLog
from railfcdd.model import ModelWeights

DESK_SEED = 11


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> DatasetManifest:
    """Small 64^2 synthetic corpus with splits, for fast trainer/harness tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    spec = SyntheticSpec(canvas_side=64, normal_count=40, anomalous_count=20, seed=5)
    manifest = generate_synthetic(spec, root)
    return split_manifest(manifest, (65, 15, 20), seed=5)


def desk_config(out_dir: Path) -> clistore.Config:
    return clistore.Config(
        out_dir=str(out_dir),
        seed=DESK_SEED,
        synthetic={"normal_count": 400, "anomalous_count": 200, "seed": DESK_SEED},
        train={"epochs": 30, "batch_size": 32, "seed": DESK_SEED},
    )


def parse_training_log(path: Path) -> TrainingLog:
    log = TrainingLog()
    for line in path.read_text().splitlines():
        fields = dict(token.split("=") for token in line.split())
        log.rows.append(EpochRecord(int(fields["epoch"]), float(fields["train_loss"]),
                                    float(fields["calib_auc"]), float(fields["calib_f1"]),
                                    float(fields["wall_seconds"])))
    return log


def new_run_dir(out_dir: Path, before: set) -> Path:
    """The single run directory created since the ``before`` snapshot."""
    created = set((out_dir / "runs").iterdir()) - before
    assert len(created) == 1, f"expected exactly one new run dir, got {created}"
    return created.pop()


def run_snapshot(out_dir: Path) -> set:
    runs = out_dir / "runs"
    return set(runs.iterdir()) if runs.exists() else set()


def run_desk_training(out_dir: Path) -> "DeskRun":
    """One full CLI train run; re-running with the same out_dir adds a second run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = desk_config(out_dir)
    cfg_path = out_dir / "config.json"
    cfg.save(cfg_path)
    before = run_snapshot(out_dir)
    t0 = time.time()
    status = clistore.cli_dispatch(["train", "--config", str(cfg_path)])
    elapsed = time.time() - t0
    assert status == 0, "desk-scale train command failed"
    run_dir = new_run_dir(out_dir, before)
    manifest = DatasetManifest.load(run_dir / "manifest.json")
    return DeskRun(
        out_dir=out_dir,
        run_dir=run_dir,
        manifest=manifest,
        weights=ModelWeights.load(run_dir / "weights.rfw"),
        log=parse_training_log(run_dir / "training_log.txt"),
        metrics=json.loads((run_dir / "metrics.json").read_text()),
        metrics_bytes=(run_dir / "metrics.json").read_bytes(),
        train_seconds=elapsed,
    )


@dataclass
class DeskRun:
    out_dir: Path
    run_dir: Path
    manifest: DatasetManifest
    weights: ModelWeights
    log: TrainingLog
    metrics: dict
    metrics_bytes: bytes
    train_seconds: float


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    return run_desk_training(tmp_path_factory.mktemp("desk_run"))
