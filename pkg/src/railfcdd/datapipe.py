"""Data preparation: video subsampling, cropping/resizing, scene filtering,
imbalance- and scale-controlled sampling, split assignment, and the seeded
synthetic corpus used for desk-scale experiments."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

SHADOW_CLASSES = ("shadow", "whole_dark", "without_shadow")
SURFACE_CLASSES = ("grassy", "decayed_sleeper", "normal_no_grass")

SPLITS = ("train", "calibration", "test")


class VideoReadError(RuntimeError):
    pass


class InsufficientPoolError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Frame:
    frame_id: str
    pixels: np.ndarray
    source_video_id: str | None = None
    frame_index: int = 0
    track_position: float | None = None
    stage: str = "raw"
    scene_labels: "SceneLabel | None" = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")


@dataclass
class SceneLabel:
    shadow_class: str | None = None
    surface_class: str | None = None
    confidences: dict = field(default_factory=dict)


@dataclass
class ManifestItem:
    frame_id: str
    path: str
    label: int | None
    split: str | None = None
    position_m: float | None = None
    provenance: str = ""


@dataclass
class DatasetManifest:
    """Declarative listing of labeled samples, sampling plan, and splits."""

    items: list[ManifestItem]
    sampling_plan: dict = field(default_factory=dict)
    seed: int | None = None
    provenance: str = ""

    def __post_init__(self):
        ids = [it.frame_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate frame ids in manifest")

    def counts(self) -> tuple[int, int]:
        normal = sum(1 for it in self.items if it.label == 0)
        anomalous = sum(1 for it in self.items if it.label == 1)
        return normal, anomalous

    def split_items(self, split: str) -> list[ManifestItem]:
        return [it for it in self.items if it.split == split]

    def digest(self) -> str:
        blob = json.dumps([asdict(it) for it in self.items], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path: Path | str):
        payload = {"sampling_plan": self.sampling_plan, "seed": self.seed,
                   "provenance": self.provenance,
                   "items": [asdict(it) for it in self.items]}
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text())
        items = [ManifestItem(**it) for it in payload["items"]]
        return cls(items, payload.get("sampling_plan", {}), payload.get("seed"),
                   payload.get("provenance", ""))


def load_image(path: Path | str) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"))


def save_image(path: Path | str, pixels: np.ndarray):
    from PIL import Image

    Image.fromarray(pixels.astype(np.uint8)).save(path)


def subsample_frames(video, step: int = 4, video_id: str | None = None) -> list[Frame]:
    """Keep frames at indices 0, step, 2*step, ... from a video file or frame iterable."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if isinstance(video, (str, Path)):
        return list(_iter_video(Path(video), step))
    vid = video_id or "frames"
    out = []
    for idx, pixels in enumerate(video):
        if idx % step == 0:
            out.append(Frame(f"{vid}:{idx:06d}", np.asarray(pixels), vid, idx))
    return out


def _iter_video(path: Path, step: int) -> Iterable[Frame]:
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise VideoReadError(f"cannot open video container {path}")
    vid = path.stem
    idx = 0
    got_any = False
    while True:
        ok, bgr = cap.read()
        if not ok:
            break
        got_any = True
        if idx % step == 0:
            yield Frame(f"{vid}:{idx:06d}", bgr[:, :, ::-1].copy(), vid, idx)
        idx += 1
    cap.release()
    if not got_any:
        raise VideoReadError(f"no decodable frames in {path}")


def subsampled_count(total_frames: int, step: int = 4) -> int:
    if step < 1:
        raise ValueError("step must be >= 1")
    return math.ceil(total_frames / step)


def crop_frame(frame: Frame, crop_dims: tuple[int, int] = (1280, 2560),
               h_offset: int = 0, v_offset: int = 0) -> Frame:
    """Crop horizontally centered, vertically anchored to the bottom (near-track region)."""
    ch, cw = crop_dims
    h, w = frame.pixels.shape[:2]
    if h < ch or w < cw:
        raise ValueError(f"source {h}x{w} smaller than crop {ch}x{cw}")
    top = h - ch - v_offset
    left = (w - cw) // 2 + h_offset
    if top < 0 or left < 0 or left + cw > w:
        raise ValueError("crop offsets push the window outside the source")
    pixels = frame.pixels[top:top + ch, left:left + cw].copy()
    return replace(frame, pixels=pixels, stage="cropped")


def resize_frame(frame: Frame, side: int = 224) -> Frame:
    """Bilinear resize to side x side."""
    import cv2

    if side < 1:
        raise ValueError("side must be >= 1")
    pixels = cv2.resize(frame.pixels, (side, side), interpolation=cv2.INTER_LINEAR)
    return replace(frame, pixels=pixels, stage="resized")


# --- scene filters (3-way classifiers used to denoise the frame pool) ---

class SceneClassifier:
    """Wraps a trained 3-way torch classifier with its class names."""

    def __init__(self, net, classes: Sequence[str], input_side: int):
        self.net = net
        self.classes = tuple(classes)
        self.input_side = input_side
        self.family = ("shadow" if self.classes == SHADOW_CLASSES
                       else "surface" if self.classes == SURFACE_CLASSES else "custom")

    def predict(self, frames: Sequence[Frame]) -> list[tuple[str, float]]:
        import torch

        if not frames:
            return []
        x = torch.from_numpy(np.stack([
            _to_classifier_input(f.pixels, self.input_side) for f in frames]))
        self.net.eval()
        with torch.no_grad():
            probs = torch.softmax(self.net(x), dim=1).numpy()
        out = []
        for p in probs:
            k = int(np.argmax(p))
            out.append((self.classes[k], float(p[k])))
        return out


def _to_classifier_input(pixels: np.ndarray, side: int) -> np.ndarray:
    import cv2

    img = cv2.resize(pixels, (side, side), interpolation=cv2.INTER_LINEAR)
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _tiny_classifier(n_classes: int):
    import torch.nn as nn

    def block(cin, cout):
        return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True), nn.MaxPool2d(2)]

    return nn.Sequential(*block(3, 16), *block(16, 32), *block(32, 64),
                         nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(64, n_classes))


def scene_filter_train(labeled: Sequence[tuple[Frame, int]], classes: Sequence[str],
                       backbone: str = "tiny", *, batch_size: int = 32, epochs: int = 15,
                       seed: int = 0, input_side: int = 64, learning_rate: float = 1e-3,
                       holdout_fraction: float = 0.2, pretrained: str = "fetch"):
    """Train a 3-way scene classifier by generic supervised fine-tuning.

    Returns:
        (SceneClassifier, holdout_accuracy)
    """
    import torch
    import torch.nn as nn

    classes = tuple(classes)
    counts = {k: 0 for k in range(len(classes))}
    for _, label in labeled:
        counts[int(label)] = counts.get(int(label), 0) + 1
    missing = [classes[k] for k, n in counts.items() if n < 2]
    if missing:
        raise ValueError(f"need at least 2 examples per class; short on {missing}")

    torch.manual_seed(seed)
    if backbone == "tiny":
        net = _tiny_classifier(len(classes))
    elif backbone in ("resnet18", "resnet101"):
        from torchvision import models

        from .model import PretrainedFetchError

        builder = models.resnet18 if backbone == "resnet18" else models.resnet101
        if pretrained == "fetch":
            weights_enum = (models.ResNet18_Weights.IMAGENET1K_V1 if backbone == "resnet18"
                            else models.ResNet101_Weights.IMAGENET1K_V1)
            try:
                net = builder(weights=weights_enum)
            except Exception as exc:
                raise PretrainedFetchError(
                    f"could not fetch pretrained parameters for {backbone}: {exc}") from exc
        else:
            net = builder(weights=None)
        net.fc = nn.Linear(net.fc.in_features, len(classes))
    else:
        raise ValueError(f"unknown scene-filter backbone {backbone!r}")

    x = torch.from_numpy(np.stack([
        _to_classifier_input(f.pixels, input_side) for f, _ in labeled]))
    y = torch.tensor([int(lbl) for _, lbl in labeled], dtype=torch.long)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labeled))
    n_hold = max(1, int(round(holdout_fraction * len(labeled))))
    hold_idx = torch.from_numpy(order[:n_hold].copy())
    train_idx = torch.from_numpy(order[n_hold:].copy())

    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    ce = nn.CrossEntropyLoss()
    for _ in range(epochs):
        net.train()
        perm = rng.permutation(len(train_idx))
        for start in range(0, len(perm), batch_size):
            idx = train_idx[torch.from_numpy(perm[start:start + batch_size].copy())]
            opt.zero_grad()
            loss = ce(net(x[idx]), y[idx])
            loss.backward()
            opt.step()

    net.eval()
    with torch.no_grad():
        pred = net(x[hold_idx]).argmax(dim=1)
    accuracy = float((pred == y[hold_idx]).float().mean())
    return SceneClassifier(net, classes, input_side), accuracy


def scene_filter_apply(classifier: SceneClassifier, frames: Sequence[Frame]):
    """Annotate every frame with its scene label; returns (frames, class counts)."""
    counts = {c: 0 for c in classifier.classes}
    predictions = classifier.predict(frames)
    annotated = []
    for frame, (label, conf) in zip(frames, predictions):
        scene = frame.scene_labels or SceneLabel()
        if classifier.family == "shadow":
            scene = replace(scene, shadow_class=label,
                            confidences={**scene.confidences, label: conf})
        else:
            scene = replace(scene, surface_class=label,
                            confidences={**scene.confidences, label: conf})
        annotated.append(replace(frame, scene_labels=scene))
        counts[label] += 1
    return annotated, counts


# --- sampling plans ---

def _draw(pool: Sequence[ManifestItem], count: int, rng, what: str) -> list[ManifestItem]:
    if count > len(pool):
        raise InsufficientPoolError(f"need {count} {what} items, pool has {len(pool)}")
    idx = rng.choice(len(pool), size=count, replace=False)
    return [replace(pool[i]) for i in sorted(idx)]


def sample_imbalanced(normal_pool: Sequence[ManifestItem], anomalous_pool: Sequence[ManifestItem],
                      ratio: int, seed: int, normal_basis: int = 800,
                      anomalous_count: int | None = None) -> DatasetManifest:
    """k:1 imbalance grid: k * normal_basis normals against the full anomalous pool."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    rng = np.random.default_rng(seed)
    n_normal = ratio * normal_basis
    n_anom = len(anomalous_pool) if anomalous_count is None else anomalous_count
    normals = _draw(normal_pool, n_normal, rng, "normal")
    anomalies = _draw(anomalous_pool, n_anom, rng, "anomalous")
    for it in normals:
        it.label = 0
    for it in anomalies:
        it.label = 1
    plan = {"kind": "imbalance", "ratio": ratio, "normal_basis": normal_basis,
            "normal": n_normal, "anomalous": n_anom}
    return DatasetManifest(normals + anomalies, plan, seed)


def sample_scaled(normal_pool: Sequence[ManifestItem], anomalous_pool: Sequence[ManifestItem],
                  scale_step: int, seed: int, normal_unit: int = 2000,
                  anomalous_unit: int = 1000) -> DatasetManifest:
    """Data-scale grid at a fixed 2:1 imbalance: (2000*s, 1000*s) samples."""
    if scale_step < 1:
        raise ValueError("scale_step must be >= 1")
    rng = np.random.default_rng(seed)
    n_normal = normal_unit * scale_step
    n_anom = anomalous_unit * scale_step
    normals = _draw(normal_pool, n_normal, rng, "normal")
    anomalies = _draw(anomalous_pool, n_anom, rng, "anomalous")
    for it in normals:
        it.label = 0
    for it in anomalies:
        it.label = 1
    plan = {"kind": "scale", "step": scale_step, "normal": n_normal, "anomalous": n_anom}
    return DatasetManifest(normals + anomalies, plan, seed)


def pool_datasets(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    """Union of disjoint manifests; counts are the sums, provenance kept per item."""
    if not manifests:
        raise ManifestError("nothing to pool")
    items = []
    for m in manifests:
        items.extend(replace(it) for it in m.items)
    plan = {"kind": "pooled", "sources": [m.sampling_plan for m in manifests]}
    return DatasetManifest(items, plan, manifests[0].seed,
                           provenance=";".join(m.provenance for m in manifests if m.provenance))


def largest_remainder_split(n: int, ratio: Sequence[int]) -> list[int]:
    exact = [n * r / 100.0 for r in ratio]
    base = [int(math.floor(e)) for e in exact]
    leftover = n - sum(base)
    order = sorted(range(len(ratio)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def split_manifest(manifest: DatasetManifest, ratio: Sequence[int] = (65, 15, 20),
                   seed: int = 0) -> DatasetManifest:
    """Assign train/calibration/test stratified by label, largest-remainder rounding."""
    ratio = tuple(int(r) for r in ratio)
    if len(ratio) != 3 or min(ratio) <= 0 or sum(ratio) != 100:
        raise ValueError("ratio must be three positive parts summing to 100")
    if not manifest.items:
        raise ManifestError("cannot split an empty manifest")
    rng = np.random.default_rng(seed)
    items = [replace(it) for it in manifest.items]
    for label in sorted({it.label for it in items}):
        idx = [i for i, it in enumerate(items) if it.label == label]
        perm = rng.permutation(len(idx))
        sizes = largest_remainder_split(len(idx), ratio)
        cursor = 0
        for split, size in zip(SPLITS, sizes):
            for j in perm[cursor:cursor + size]:
                items[idx[j]].split = split
            cursor += size
    return DatasetManifest(items, dict(manifest.sampling_plan, split_ratio=list(ratio)),
                           manifest.seed, manifest.provenance)


# --- synthetic desk-scale corpus ---

@dataclass
class SyntheticSpec:
    """Geometry and defect model of the generated track images."""

    canvas_side: int = 224
    normal_count: int = 400
    anomalous_count: int = 200
    seed: int = 0
    sleeper_pitch: int | None = None
    sleeper_height: int | None = None
    rail_width: int | None = None
    blotch_count: tuple[int, int] = (1, 3)
    blotch_radius: tuple[int, int] | None = None
    blotch_darkening: float = 0.15
    position_spacing_m: float = 0.5

    def __post_init__(self):
        if self.normal_count < 1 or self.anomalous_count < 1:
            raise ValueError("counts must be >= 1")
        side = self.canvas_side
        if self.sleeper_pitch is None:
            self.sleeper_pitch = side // 4
        if self.sleeper_height is None:
            self.sleeper_height = max(6, side // 9)
        if self.rail_width is None:
            self.rail_width = max(3, side // 28)
        if self.blotch_radius is None:
            self.blotch_radius = (max(3, side // 28), max(6, side // 12))


def _rng_for(spec: SyntheticSpec, kind: str, index: int, stream: int):
    return np.random.default_rng(np.random.SeedSequence(
        [spec.seed, 1 if kind == "anomalous" else 0, index, stream]))


def _sleeper_bands(spec: SyntheticSpec) -> list[tuple[int, int]]:
    side, pitch, height = spec.canvas_side, spec.sleeper_pitch, spec.sleeper_height
    bands = []
    y = pitch // 2
    while y + height <= side:
        bands.append((y, y + height))
        y += pitch
    return bands


def _render_base(spec: SyntheticSpec, rng) -> np.ndarray:
    side = spec.canvas_side
    ballast = gaussian_filter(rng.normal(118.0, 26.0, (side, side)), 1.2)
    # dark pockets between stones: the same coarse speckle statistics the decay
    # uses, present on ballast in every class, so "dark speckle somewhere nearby"
    # is never by itself evidence of deterioration
    pockets = gaussian_filter(rng.normal(0.0, 1.0, (side, side)), 2.5)
    ballast = np.where(pockets > np.quantile(pockets, 0.8), ballast * 0.35, ballast)
    img = np.stack([ballast, ballast * 0.985, ballast * 0.955], axis=-1)

    for y0, y1 in _sleeper_bands(spec):
        grain = gaussian_filter(rng.normal(0.0, 16.0, (y1 - y0, side)), (0.6, 5.0))
        wood = np.array([152.0, 120.0, 88.0]) + rng.normal(0.0, 6.0, 3)
        img[y0:y1] = wood[None, None, :] + grain[:, :, None] * np.array([1.0, 0.9, 0.75])

    rail_w = spec.rail_width
    for cx in (int(side * 0.25), int(side * 0.75)):
        img[:, cx - rail_w // 2: cx + rail_w // 2 + 1] *= 0.5
        img[:, cx] = np.minimum(img[:, cx] + 140.0, 230.0)  # polished running surface

    shade = np.linspace(-6.0, 6.0, side)[:, None, None] * rng.uniform(0.3, 1.0)
    img = img + shade + rng.normal(0.0, 3.0, img.shape)
    return np.clip(img, 0.0, 255.0)


def _paint_decay(img: np.ndarray, spec: SyntheticSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    side = spec.canvas_side
    bands = _sleeper_bands(spec)
    mask = np.zeros((side, side), dtype=bool)
    n_blotches = int(rng.integers(spec.blotch_count[0], spec.blotch_count[1] + 1))
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(n_blotches):
        y0, y1 = bands[int(rng.integers(len(bands)))]
        rx = float(rng.uniform(*spec.blotch_radius))
        ry = float(rng.uniform(spec.blotch_radius[0], max(spec.blotch_radius[0] + 1,
                                                          (y1 - y0) * 0.8)))
        cx = float(rng.uniform(rx, side - rx))
        cy = float(rng.uniform(y0 + 1, y1 - 1))
        ellipse = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        wobble = gaussian_filter(rng.normal(0.0, 1.0, (side, side)), 4.0)
        region = ellipse & (wobble > np.quantile(wobble[ellipse], 0.15))
        band_slice = np.zeros_like(mask)
        band_slice[y0:y1] = True
        region &= band_slice
        if not region.any():
            region = ellipse & band_slice
        mask |= region

    # rot interior: coarse two-tone speckle (black holes between lighter splinters),
    # not a flat stain, so the defect carries more contrast in its interior than
    # along its rim and the response map peaks inside the region
    speckle = gaussian_filter(rng.normal(0.0, 1.0, (side, side)), 2.5)
    holes = speckle > np.median(speckle)
    dark = np.where(holes, spec.blotch_darkening, spec.blotch_darkening + 0.70)
    scale = np.where(mask, dark, 1.0)
    out = img * scale[:, :, None]
    # decayed wood drifts toward desaturated gray-brown
    gray = out.mean(axis=2, keepdims=True)
    out = np.where(mask[:, :, None], 0.6 * out + 0.4 * gray, out)
    return np.clip(out, 0.0, 255.0), mask


def synthesize_image(spec: SyntheticSpec, kind: str, index: int):
    """One synthetic frame; returns (pixels uint8, mask bool) — mask empty for normals."""
    base = _render_base(spec, _rng_for(spec, kind, index, 0))
    if kind == "normal":
        return base.round().astype(np.uint8), np.zeros(base.shape[:2], dtype=bool)
    painted, mask = _paint_decay(base, spec, _rng_for(spec, kind, index, 1))
    return painted.round().astype(np.uint8), mask


def synthesize_pair(spec: SyntheticSpec, index: int):
    """(base uint8, anomalous uint8, mask) for one anomalous frame: identical off-mask."""
    base = _render_base(spec, _rng_for(spec, "anomalous", index, 0))
    painted, mask = _paint_decay(base, spec, _rng_for(spec, "anomalous", index, 1))
    return base.round().astype(np.uint8), painted.round().astype(np.uint8), mask


def generate_synthetic(spec: SyntheticSpec, out_dir: Path | str) -> DatasetManifest:
    """Write the seeded synthetic corpus with per-image ground-truth blotch masks."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    position = 0
    for kind, count, label in (("normal", spec.normal_count, 0),
                               ("anomalous", spec.anomalous_count, 1)):
        for i in range(count):
            pixels, mask = synthesize_image(spec, kind, i)
            name = f"{kind}_{i:04d}.png"
            save_image(out_dir / name, pixels)
            if kind == "anomalous":
                Image.fromarray(mask).convert("1").save(out_dir / f"{kind}_{i:04d}_mask.png")
            items.append(ManifestItem(
                frame_id=f"synth:{kind}:{i:04d}", path=str(out_dir / name), label=label,
                position_m=position * spec.position_spacing_m,
                provenance=f"synthetic:seed={spec.seed}"))
            position += 1
    plan = {"kind": "synthetic", "normal": spec.normal_count,
            "anomalous": spec.anomalous_count, "canvas_side": spec.canvas_side}
    manifest = DatasetManifest(items, plan, spec.seed, provenance=f"synthetic:seed={spec.seed}")
    manifest.save(out_dir / "manifest.json")
    return manifest


def mask_path_for(item: ManifestItem) -> Path | None:
    p = Path(item.path)
    candidate = p.with_name(p.stem + "_mask.png")
    return candidate if candidate.exists() else None


def load_mask(path: Path | str) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path)) > 0
