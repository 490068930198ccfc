"""Command-line entry points, run configuration, the append-only run/inspection
store, and cross-inspection prognostic comparison."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import datapipe, evalharness, heatmap, scoring
from .losses import TrainConfig, train_fcdd
from .model import BackboneSpec, ModelWeights, geometry_of

COMMANDS = ("prepare", "synth", "train", "evaluate", "ablate", "heatmap", "score",
            "prognose", "history")

CACHE_ENV = "RAILFCDD_CACHE"


class ConfigError(ValueError):
    pass


class InsufficientHistoryError(ValueError):
    pass


class DuplicateRecordError(ValueError):
    pass


@dataclass
class Config:
    """Run configuration; defaults mirror the standard training recipe."""

    out_dir: str = "out"
    seed: int = 0
    manifest_path: str | None = None
    risk_table_path: str | None = None
    backbone: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    pretrained: str = "fetch"
    trunk_uris: dict = field(default_factory=dict)
    score_use: str = "raw"
    bucket_width_m: float = 0.6
    trend_factor: float = 1.5
    trend_window: int = 5
    heatmap_limit: int | None = None
    videos: list = field(default_factory=list)
    video_chainages: dict = field(default_factory=dict)
    crop_dims: tuple[int, int] | None = None
    resize_side: int | None = 224
    subsample_step: int = 4

    @classmethod
    def load(cls, path: Path | str) -> "Config":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"config {path}: unknown fields {sorted(unknown)}")
        cfg = cls(**payload)
        for name in ("manifest_path", "risk_table_path"):
            value = getattr(cfg, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"config field {name}: path {value!r} does not exist")
        return cfg

    def save(self, path: Path | str):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(**self.backbone) if self.backbone else BackboneSpec()

    def train_config(self, seed_override: int | None = None) -> TrainConfig:
        params = dict(self.train)
        params.setdefault("seed", self.seed)
        if seed_override is not None:
            params["seed"] = seed_override
        return TrainConfig(**params)

    def kernel_spec(self, spec: BackboneSpec) -> heatmap.GaussianKernelSpec:
        if self.kernel:
            return heatmap.GaussianKernelSpec(**self.kernel)
        return heatmap.GaussianKernelSpec.for_geometry(geometry_of(spec))

    def render_spec(self) -> heatmap.RenderSpec:
        return heatmap.RenderSpec(**self.render) if self.render else heatmap.RenderSpec()

    def risk_table(self) -> scoring.RiskWeightTable:
        if self.risk_table_path:
            return scoring.RiskWeightTable.load(self.risk_table_path)
        return scoring.RiskWeightTable()

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "railfcdd"))


# --- run records ---

def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunRecord:
    run_id: str
    created_utc: str
    command: str
    config_digest: str
    artifacts: dict  # name -> {"path": relative path, "sha256": digest}
    notes: str = ""

    def save(self, path: Path):
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path | str) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


class RunStore:
    """Append-only directory tree of per-run artifacts under <out_dir>/runs/."""

    def __init__(self, out_dir: Path | str):
        self.root = Path(out_dir)
        self.runs_dir = self.root / "runs"

    def new_run(self, command: str, config: Config) -> Path:
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        base = f"{stamp}-{config.digest()}"
        run_id = base
        n = 1
        while (self.runs_dir / run_id).exists():
            n += 1
            run_id = f"{base}-{n}"
        run_dir = self.runs_dir / run_id
        run_dir.mkdir()
        config.save(run_dir / "config.json")
        return run_dir

    def finalize(self, run_dir: Path, command: str, config: Config, notes: str = "") -> RunRecord:
        artifacts = {}
        for p in sorted(run_dir.rglob("*")):
            if p.is_file() and p.name != "record.json":
                artifacts[str(p.relative_to(run_dir))] = {
                    "path": str(p.relative_to(run_dir)), "sha256": _file_sha256(p)}
        record = RunRecord(run_dir.name, time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                           command, config.digest(), artifacts, notes)
        record.save(run_dir / "record.json")
        return record

    def verify(self, run_dir: Path | str) -> bool:
        """Referential integrity: every recorded artifact exists with its digest."""
        run_dir = Path(run_dir)
        record = RunRecord.load(run_dir / "record.json")
        for meta in record.artifacts.values():
            p = run_dir / meta["path"]
            if not p.exists() or _file_sha256(p) != meta["sha256"]:
                return False
        return True


# --- inspection history ---

@dataclass
class HistoryEntry:
    date: str
    run_id: str
    score: float


class InspectionHistory:
    """Per-position-bucket, append-only record of risk-weighted scores.

    Bucket CSVs are the source of truth; index.json is a derived accelerator
    that recover() can always rebuild, so a crash between the CSV append and
    the index update leaves a recoverable state.
    """

    def __init__(self, root: Path | str, bucket_width_m: float = 0.6):
        if bucket_width_m <= 0:
            raise ValueError("bucket width must be positive")
        self.root = Path(root)
        self.bucket_width_m = bucket_width_m

    def _bucket_of(self, position_m: float) -> int:
        return int(position_m // self.bucket_width_m)

    def _bucket_path(self, bucket: int) -> Path:
        return self.root / f"{bucket:08d}.csv"

    def buckets(self) -> list[int]:
        if not self.root.exists():
            return []
        return sorted(int(p.stem) for p in self.root.glob("*.csv"))

    def entries(self, bucket: int) -> list[HistoryEntry]:
        path = self._bucket_path(bucket)
        if not path.exists():
            return []
        out = []
        for line in path.read_text().splitlines():
            if not line or line.startswith("date,"):
                continue
            date, run_id, score = line.split(",")
            out.append(HistoryEntry(date, run_id, float(score)))
        out.sort(key=lambda e: e.date)
        return out

    def _acquire_lock(self, timeout_s: float = 10.0):
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / ".lock"
        deadline = time.time() + timeout_s
        while True:
            try:
                fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.close(fd)
                return lock
            except FileExistsError:
                if time.time() > deadline:
                    raise TimeoutError(f"history lock {lock} is stuck")
                time.sleep(0.05)

    def record_inspection(self, run_id: str, scored: Sequence[scoring.ScoredFrame],
                          date: str, fault_hook: Callable | None = None):
        """Append each positioned frame's risk-weighted score to its bucket.

        Frames sharing a bucket within one run are aggregated with max (worst
        hazard). Idempotent per (run_id, bucket): duplicates are skipped, never
        rewritten. Returns (appended, skipped, unpositioned) counts.
        """
        by_bucket: dict[int, float] = {}
        unpositioned = 0
        for s in scored:
            if s.track_position is None:
                unpositioned += 1
                continue
            b = self._bucket_of(s.track_position)
            by_bucket[b] = max(by_bucket.get(b, float("-inf")), float(s.risk_weighted_score))

        lock = self._acquire_lock()
        appended = skipped = 0
        try:
            for bucket in sorted(by_bucket):
                existing = {(e.run_id, bucket) for e in self.entries(bucket)}
                if (run_id, bucket) in existing:
                    skipped += 1
                    continue
                path = self._bucket_path(bucket)
                is_new = not path.exists()
                with open(path, "a", newline="") as fh:
                    if is_new:
                        fh.write("date,run_id,score\n")
                    fh.write(f"{date},{run_id},{by_bucket[bucket]!r}\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                appended += 1
            if fault_hook is not None:
                fault_hook()  # crash-injection point: CSVs written, index not yet
            self._write_index()
        finally:
            lock.unlink(missing_ok=True)
        return appended, skipped, unpositioned

    def _write_index(self):
        index = {}
        for bucket in self.buckets():
            path = self._bucket_path(bucket)
            index[str(bucket)] = {"entries": len(self.entries(bucket)),
                                  "sha256": _file_sha256(path)}
        tmp = self.root / "index.json.tmp"
        tmp.write_text(json.dumps(index, indent=1, sort_keys=True))
        os.replace(tmp, self.root / "index.json")

    def index(self) -> dict:
        path = self.root / "index.json"
        return json.loads(path.read_text()) if path.exists() else {}

    def is_consistent(self) -> bool:
        index = self.index()
        if sorted(index) != [str(b) for b in self.buckets()]:
            return False
        return all(index[str(b)]["sha256"] == _file_sha256(self._bucket_path(b))
                   for b in self.buckets())

    def recover(self):
        """Rebuild the derived index from the bucket CSVs (crash recovery)."""
        lock = self._acquire_lock()
        try:
            self._write_index()
        finally:
            lock.unlink(missing_ok=True)


@dataclass
class TrendReport:
    bucket: int
    latest_date: str
    latest_score: float
    prior_mean: float
    prior_max: float
    prior_n: int
    absolute_change: float
    relative_change: float | None
    flagged: bool
    factor: float

    def as_dict(self) -> dict:
        return asdict(self)


def prognostic_compare(history: InspectionHistory, bucket: int, window: int = 5,
                       factor: float = 1.5) -> TrendReport:
    """Compare the latest risk-weighted score in a bucket against its prior window."""
    entries = history.entries(bucket)
    if len(entries) < 2:
        raise InsufficientHistoryError(
            f"bucket {bucket} has {len(entries)} entries; need at least 2")
    latest = entries[-1]
    prior = entries[:-1][-window:]
    prior_scores = np.asarray([e.score for e in prior], dtype=np.float64)
    mean = float(prior_scores.mean())
    absolute = latest.score - mean
    relative = absolute / mean if mean > 0 else None
    flagged = latest.score > factor * mean if mean > 0 else latest.score > 0
    return TrendReport(bucket, latest.date, latest.score, mean, float(prior_scores.max()),
                       len(prior), absolute, relative, flagged, factor)


# --- pipeline steps shared by the subcommands ---

def _synth_manifest(cfg: Config, run_dir: Path) -> datapipe.DatasetManifest:
    params = dict(cfg.synthetic)
    params.setdefault("seed", cfg.seed)
    spec = datapipe.SyntheticSpec(**params)
    data_dir = Path(cfg.out_dir) / "synthetic" / f"seed{spec.seed}"
    manifest = datapipe.generate_synthetic(spec, data_dir)
    tc = cfg.train_config()
    manifest = datapipe.split_manifest(manifest, tc.split_ratio, tc.seed)
    manifest.save(run_dir / "manifest.json")
    return manifest


def _load_manifest(cfg: Config) -> datapipe.DatasetManifest:
    if not cfg.manifest_path:
        raise ConfigError("config field manifest_path is required for this command")
    return datapipe.DatasetManifest.load(cfg.manifest_path)


def _score_split(cfg: Config, weights: ModelWeights, manifest, split: str, run_id: str):
    table = cfg.risk_table()
    raw, labels, items = evalharness.score_manifest_split(
        weights, manifest, split, cfg.train_config().batch_size)
    scored = []
    for value, it in zip(raw, items):
        weight, weighted, default_used = scoring.risk_weighted_score(
            float(value), it.position_m, table)
        scored.append(scoring.ScoredFrame(it.frame_id, float(value), weight, weighted,
                                          it.position_m, it.label, run_id, default_used))
    return scored


def _cmd_synth(cfg: Config, args) -> int:
    store = RunStore(cfg.out_dir)
    run_dir = store.new_run("synth", cfg)
    manifest = _synth_manifest(cfg, run_dir)
    store.finalize(run_dir, "synth", cfg,
                   notes=f"normal/anomalous counts {manifest.counts()}")
    print(f"synthetic manifest: {run_dir / 'manifest.json'}")
    return 0


def _cmd_prepare(cfg: Config, args) -> int:
    store = RunStore(cfg.out_dir)
    run_dir = store.new_run("prepare", cfg)
    frames_dir = run_dir / "frames"
    frames_dir.mkdir()
    items = []
    for video in cfg.videos:
        frames = datapipe.subsample_frames(video, cfg.subsample_step)
        # track position by linear interpolation between the video's declared
        # start/end chainages (meters), when the config provides them
        chainage = (cfg.video_chainages.get(str(video))
                    or (cfg.video_chainages.get(frames[0].source_video_id) if frames else None))
        last_index = max((f.frame_index for f in frames), default=0)
        for frame in frames:
            position = None
            if chainage is not None:
                start_m, end_m = float(chainage[0]), float(chainage[1])
                fraction = frame.frame_index / last_index if last_index else 0.0
                position = start_m + (end_m - start_m) * fraction
            if cfg.crop_dims:
                frame = datapipe.crop_frame(frame, tuple(cfg.crop_dims))
            if cfg.resize_side:
                frame = datapipe.resize_frame(frame, cfg.resize_side)
            name = frame.frame_id.replace(":", "_").replace("/", "_") + ".png"
            datapipe.save_image(frames_dir / name, frame.pixels)
            items.append(datapipe.ManifestItem(frame.frame_id, str(frames_dir / name),
                                               label=None, position_m=position,
                                               provenance=f"prepare:{video}"))
    manifest = datapipe.DatasetManifest(items, {"kind": "prepared"}, cfg.seed)
    manifest.save(run_dir / "manifest.json")
    store.finalize(run_dir, "prepare", cfg, notes=f"{len(items)} frames")
    print(f"prepared {len(items)} frames into {frames_dir}")
    return 0


def _cmd_train(cfg: Config, args) -> int:
    store = RunStore(cfg.out_dir)
    run_dir = store.new_run("train", cfg)
    manifest = _synth_manifest(cfg, run_dir) if cfg.synthetic and not cfg.manifest_path \
        else _load_manifest(cfg)
    if not cfg.synthetic or cfg.manifest_path:
        manifest.save(run_dir / "manifest.json")
    spec = cfg.backbone_spec()
    tc = cfg.train_config(args.seed)
    weights, log = train_fcdd(manifest, spec, tc, log_path=run_dir / "training_log.txt",
                              progress=args.verbose, pretrained=cfg.pretrained,
                              trunk_uri=cfg.trunk_uris.get(spec.id))
    weights.save(run_dir / "weights.rfw")

    run_id = cfg.digest()  # deterministic id used inside metric files
    scored = _score_split(cfg, weights, manifest, "calibration", run_id)
    threshold = scoring.calibrate_threshold(scored, use=cfg.score_use, run_id=run_id)
    report = evalharness.evaluate(weights, manifest, threshold.value, split="test",
                                  run_id=run_id, batch_size=tc.batch_size)
    (run_dir / "metrics.json").write_text(json.dumps(
        {"calibration_threshold": threshold.value,
         "threshold_rule": threshold.selection_rule, "test": report.as_dict()},
        indent=2, sort_keys=True))
    evalharness.save_metrics_csv(report, run_dir / "metrics.csv")
    store.finalize(run_dir, "train", cfg)
    print(f"trained {spec.id}: test AUC {report.auc:.4f}, F1 {report.f1:.4f} "
          f"({run_dir})")
    return 0


def _cmd_evaluate(cfg: Config, args) -> int:
    store = RunStore(cfg.out_dir)
    run_dir = store.new_run("evaluate", cfg)
    manifest = _load_manifest(cfg)
    weights = ModelWeights.load(args.weights)
    run_id = cfg.digest()
    if args.threshold is not None:
        threshold = scoring.Threshold(args.threshold, "fixed", run_id)
    else:
        scored = _score_split(cfg, weights, manifest, "calibration", run_id)
        threshold = scoring.calibrate_threshold(scored, use=cfg.score_use, run_id=run_id)
    report = evalharness.evaluate(weights, manifest, threshold.value, split=args.split,
                                  run_id=run_id)
    (run_dir / "metrics.json").write_text(json.dumps(
        {"calibration_threshold": threshold.value,
         "threshold_rule": threshold.selection_rule, args.split: report.as_dict()},
        indent=2, sort_keys=True))
    evalharness.save_metrics_csv(report, run_dir / "metrics.csv")
    store.finalize(run_dir, "evaluate", cfg)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_ablate(cfg: Config, args) -> int:
    store = RunStore(cfg.out_dir)
    run_dir = store.new_run("ablate", cfg)
    settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    manifest = None
    normal_pool: list = []
    anomalous_pool: list = []
    if args.axis == "backbone":
        manifest = _synth_manifest(cfg, run_dir) if cfg.synthetic and not cfg.manifest_path \
            else _load_manifest(cfg)
    else:
        pool_manifest = _load_manifest(cfg) if cfg.manifest_path \
            else _synth_manifest(cfg, run_dir)
        normal_pool = [it for it in pool_manifest.items if it.label == 0]
        anomalous_pool = [it for it in pool_manifest.items if it.label == 1]
    base = evalharness.AblationBase(
        train_config=cfg.train_config(args.seed), backbone=cfg.backbone_spec(),
        normal_pool=normal_pool, anomalous_pool=anomalous_pool, manifest=manifest,
        normal_basis=args.normal_basis, scale_units=(args.scale_unit, args.scale_unit // 2),
        pretrained=cfg.pretrained, trunk_uris=cfg.trunk_uris)
    grid, table = evalharness.run_ablation(args.axis, settings, base,
                                           out_dir=run_dir / "tables")
    store.finalize(run_dir, "ablate", cfg, notes=f"best_by_f1={grid.best_by_f1}")
    print(table)
    return 0 if not grid.failures else 1


def _cmd_heatmap(cfg: Config, args) -> int:
    store = RunStore(cfg.out_dir)
    run_dir = store.new_run("heatmap", cfg)
    manifest = _load_manifest(cfg)
    weights = ModelWeights.load(args.weights)
    items = manifest.split_items(args.split) if args.split else manifest.items
    limit = cfg.heatmap_limit if args.limit is None else args.limit
    if limit:
        items = items[:limit]
    frames = [datapipe.Frame(it.frame_id, datapipe.load_image(it.path)) for it in items]
    kernel = cfg.kernel_spec(weights.spec)
    results, failures = heatmap.batch_heatmaps(weights, frames, kernel, cfg.render_spec())
    heat_dir = run_dir / "heatmaps"
    for (heat, rendered), it in zip(results, items):
        stem = heat_dir / Path(it.path).stem
        heatmap.write_heatmap_files(heat, rendered, stem, backbone_id=weights.backbone_id,
                                    dump_raw=args.dump_raw)
    if failures:
        (run_dir / "failures.json").write_text(json.dumps(failures, indent=2))
    store.finalize(run_dir, "heatmap", cfg, notes=f"{len(results)} ok, {len(failures)} failed")
    print(f"wrote {len(results)} heatmaps to {heat_dir}" +
          (f" ({len(failures)} failures)" if failures else ""))
    return 0 if not failures else 1


def _cmd_score(cfg: Config, args) -> int:
    store = RunStore(cfg.out_dir)
    run_dir = store.new_run("score", cfg)
    manifest = _load_manifest(cfg)
    weights = ModelWeights.load(args.weights)
    run_id = run_dir.name
    scored = _score_split(cfg, weights, manifest, args.split, run_id)
    scoring.write_score_log(scored, run_dir / "scores.csv")
    labeled = [s for s in scored if s.label is not None]
    if labeled and {s.label for s in labeled} == {0, 1}:
        hist = scoring.score_histogram(labeled, bins=args.bins, use=cfg.score_use)
        (run_dir / "histogram.csv").write_text(hist.table_text)
        (run_dir / "histogram.png").write_bytes(hist.png_bytes)
        print(f"histogram overlap fraction: {hist.overlap_fraction:.4f}")
    store.finalize(run_dir, "score", cfg, notes=f"{len(scored)} frames")
    print(f"score log: {run_dir / 'scores.csv'}")
    return 0


def _cmd_history(cfg: Config, args) -> int:
    history = InspectionHistory(Path(cfg.out_dir) / "history", cfg.bucket_width_m)
    if args.record:
        scored = scoring.read_score_log(args.record)
        run_id = scored[0].run_id if scored and scored[0].run_id else Path(args.record).stem
        appended, skipped, unpositioned = history.record_inspection(
            run_id, scored, args.date or time.strftime("%Y-%m-%d"))
        print(f"recorded {appended} buckets ({skipped} duplicates skipped, "
              f"{unpositioned} frames without position)")
        return 0
    if args.recover:
        history.recover()
        print("index rebuilt from bucket files")
        return 0
    buckets = history.buckets()
    print(f"{len(buckets)} buckets")
    for b in buckets:
        entries = history.entries(b)
        span = (f"{entries[0].date} .. {entries[-1].date}" if entries else "empty")
        print(f"  bucket {b} ({b * cfg.bucket_width_m:.1f} m): {len(entries)} entries, {span}")
    return 0


def _cmd_prognose(cfg: Config, args) -> int:
    history = InspectionHistory(Path(cfg.out_dir) / "history", cfg.bucket_width_m)
    buckets = [args.bucket] if args.bucket is not None else history.buckets()
    reports = []
    for b in buckets:
        try:
            reports.append(prognostic_compare(history, b, window=cfg.trend_window,
                                              factor=cfg.trend_factor))
        except InsufficientHistoryError:
            if args.bucket is not None:
                raise
    payload = [r.as_dict() for r in reports]
    print(json.dumps(payload, indent=2, sort_keys=True))
    flagged = [r for r in reports if r.flagged]
    if flagged:
        print(f"# {len(flagged)} bucket(s) flagged above {cfg.trend_factor}x prior mean",
              file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="railfcdd",
        description="One-class deterioration detection for railway track imagery")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override the config output directory")
        p.add_argument("--verbose", action="store_true")

    common(sub.add_parser("prepare", help="video -> subsampled/cropped/resized frames"))
    common(sub.add_parser("synth", help="generate the seeded synthetic corpus"))
    common(sub.add_parser("train", help="train the one-class detector"))

    p = sub.add_parser("evaluate", help="metrics on a labeled split")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("ablate", help="run one ablation grid")
    common(p)
    p.add_argument("--axis", required=True, choices=evalharness.AXES)
    p.add_argument("--settings", required=True, help="comma-separated settings")
    p.add_argument("--normal-basis", type=int, default=800, dest="normal_basis")
    p.add_argument("--scale-unit", type=int, default=2000, dest="scale_unit")

    p = sub.add_parser("heatmap", help="render deterioration-mark heatmaps")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--dump-raw", action="store_true", dest="dump_raw")

    p = sub.add_parser("score", help="risk-weighted score log + histogram")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("history", help="record score logs into the inspection history")
    common(p)
    p.add_argument("--record", default=None, help="scores.csv to record")
    p.add_argument("--date", default=None, help="inspection date (YYYY-MM-DD)")
    p.add_argument("--recover", action="store_true", help="rebuild the history index")

    p = sub.add_parser("prognose", help="compare latest scores against prior inspections")
    common(p)
    p.add_argument("--bucket", type=int, default=None)
    return parser


_HANDLERS = {"prepare": _cmd_prepare, "synth": _cmd_synth, "train": _cmd_train,
             "evaluate": _cmd_evaluate, "ablate": _cmd_ablate, "heatmap": _cmd_heatmap,
             "score": _cmd_score, "history": _cmd_history, "prognose": _cmd_prognose}


def cli_dispatch(argv: Sequence[str]) -> int:
    """Parse and execute one command; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = Config.load(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    try:
        return _HANDLERS[args.command](cfg, args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv: Sequence[str] | None = None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
