"""One-class losses and the training loop.

Numpy implementations are the reference contract (used by tests and scoring);
the torch mirrors at the bottom drive gradient-based training and are checked
against the numpy path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# Upper bound on exp(-A) before the anomalous log term; caps the per-sample
# loss at -log(1e-7) ~ 16.118 so a zero-mean anomalous map never yields NaN/Inf.
SATURATION_LIMIT = 1.0 - 1e-7

TRAIN_SPLIT = "train"
CALIBRATION_SPLIT = "calibration"
TEST_SPLIT = "test"


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns NaN; carries epoch/batch indices."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"training loss became NaN at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def _as_values(m) -> np.ndarray:
    return np.asarray(m.values if hasattr(m, "values") else m, dtype=np.float64)


def pseudo_huber(value):
    """sqrt(v^2 + 1) - 1 elementwise; scalars, arrays, or FeatureMaps.

    Uses v^2 / (1 + sqrt(v^2 + 1)) which is the same quantity without the
    cancellation near zero.
    """
    if hasattr(value, "values"):  # FeatureMap-like: return same type
        from dataclasses import replace

        return replace(value, values=pseudo_huber(value.values))
    v = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("pseudo_huber requires finite input")
    out = v * v / (1.0 + np.sqrt(v * v + 1.0))
    return float(out) if np.isscalar(value) or out.ndim == 0 else out


@dataclass
class SvddConfig:
    """Hypersphere center for the data-description objective."""

    center: np.ndarray
    radius_mode: str = "fixed-center"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not np.all(np.isfinite(self.center)):
            raise ValueError("center must be finite")


def initial_center(maps: Sequence) -> np.ndarray:
    """Standard center choice: mean of the initial normal-sample mapping outputs."""
    stack = np.stack([_as_values(m) for m in maps])
    return stack.mean(axis=0)


def svdd_objective(maps: Sequence, config: SvddConfig) -> float:
    """Mean squared distance of mapping outputs to the hypersphere center."""
    c = config.center
    total = 0.0
    for m in maps:
        v = _as_values(m)
        if v.shape != c.shape:
            raise ValueError(f"map shape {v.shape} does not match center {c.shape}")
        d = v - c
        total += float(np.sum(d * d))
    return total / len(maps)


def _validate_batch(maps: Sequence, labels: Sequence) -> tuple[np.ndarray, np.ndarray]:
    arr = np.stack([_as_values(m) for m in maps])
    z = np.asarray(labels)
    if arr.shape[0] != z.shape[0] or arr.shape[0] < 1:
        raise ValueError("need equally many maps and labels, at least one")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("labels must be 0 (normal) or 1 (anomalous)")
    if np.any(arr < 0):
        raise ValueError("maps must be non-negative (apply pseudo_huber first)")
    return arr, z.astype(np.float64)


@dataclass
class FcddLossResult:
    total: float
    per_sample: np.ndarray
    saturated: int  # anomalous samples whose log term hit the clamp


def fcdd_loss_terms(maps: Sequence, labels: Sequence) -> FcddLossResult:
    """Per-sample losses: mean map value for normals, -log(1 - exp(-mean)) for anomalies."""
    arr, z = _validate_batch(maps, labels)
    a = arr.reshape(arr.shape[0], -1).mean(axis=1)
    e = np.exp(-a)
    saturated = int(np.sum((z == 1) & (e > SATURATION_LIMIT)))
    e = np.minimum(e, SATURATION_LIMIT)
    per_sample = (1.0 - z) * a - z * np.log1p(-e)
    return FcddLossResult(float(per_sample.mean()), per_sample, saturated)


def fcdd_loss(maps: Sequence, labels: Sequence, field_dims: tuple[int, int] | None = None) -> float:
    """Batch loss over post-pseudo-Huber receptive-field maps."""
    if field_dims is not None:
        arr0 = _as_values(maps[0])
        if arr0.shape != tuple(field_dims):
            raise ValueError(f"maps are {arr0.shape}, expected {field_dims}")
    return fcdd_loss_terms(maps, labels).total


def fcdd_loss_gradient(maps: Sequence, labels: Sequence) -> np.ndarray:
    """Gradient of fcdd_loss w.r.t. every map element, shape (n, u, v).

    Normal samples contribute 1/(n*uv) per element; anomalous ones
    -exp(-A)/(1-exp(-A))/(n*uv) with A the sample's map mean. Samples in the
    saturated (clamped) regime have zero gradient, matching the capped loss.
    """
    arr, z = _validate_batch(maps, labels)
    n = arr.shape[0]
    uv = arr[0].size
    a = arr.reshape(n, -1).mean(axis=1)
    e = np.exp(-a)
    coeff = np.where(z == 0, 1.0, -e / (1.0 - np.minimum(e, SATURATION_LIMIT)))
    coeff = np.where((z == 1) & (e > SATURATION_LIMIT), 0.0, coeff)
    grad = np.broadcast_to((coeff / (n * uv))[:, None], (n, uv)).reshape(arr.shape)
    return grad.copy()


def one_class_cross_entropy(ells: Sequence[float], labels: Sequence) -> float:
    """Cross-entropy one-class loss on per-sample inlier scores ell in (0, 1)."""
    ells = np.asarray(ells, dtype=np.float64)
    z = np.asarray(labels, dtype=np.float64)
    return float(-np.mean((1.0 - z) * np.log(ells) + z * np.log(1.0 - ells)))


def substituted_loss(h_values: Sequence[float], labels: Sequence) -> float:
    """Same loss written directly in per-sample pseudo-Huber values h >= 0."""
    h = np.asarray(h_values, dtype=np.float64)
    z = np.asarray(labels, dtype=np.float64)
    return float(np.mean((1.0 - z) * h - z * np.log1p(-np.exp(-h))))


@dataclass
class TrainConfig:
    """Optimizer and split settings; defaults follow the training recipe."""

    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-4
    gradient_decay: float = 0.9
    squared_gradient_decay: float = 0.99
    seed: int = 0
    split_ratio: tuple[int, int, int] = (65, 15, 20)
    epsilon: float = 1e-8  # optimizer epsilon; no weight decay
    freeze_trunk: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("learning_rate", "gradient_decay", "squared_gradient_decay"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        self.split_ratio = tuple(int(r) for r in self.split_ratio)
        if len(self.split_ratio) != 3 or min(self.split_ratio) <= 0 or sum(self.split_ratio) != 100:
            raise ValueError("split_ratio must be three positive parts summing to 100")

    def digest(self) -> str:
        import hashlib
        import json

        blob = json.dumps(self.__dict__, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    calib_auc: float
    calib_f1: float
    wall_seconds: float
    saturated: int = 0

    def line(self) -> str:
        return (
            f"epoch={self.epoch} train_loss={self.train_loss:.8f} "
            f"calib_auc={self.calib_auc:.6f} calib_f1={self.calib_f1:.6f} "
            f"wall_seconds={self.wall_seconds:.3f}"
        )


@dataclass
class TrainingLog:
    """Append-only per-epoch record; wall_seconds is excluded from equality."""

    rows: list[EpochRecord] = field(default_factory=list)
    optimizer: str = "adam"
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    path: Path | None = None

    def append(self, row: EpochRecord):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(row.line() + "\n")

    def numbers(self) -> list[tuple]:
        return [(r.epoch, r.train_loss, r.calib_auc, r.calib_f1) for r in self.rows]

    def same_numbers(self, other: "TrainingLog") -> bool:
        return self.numbers() == other.numbers()


def train_fcdd(manifest, spec, tc: TrainConfig, *, log_path: Path | str | None = None,
               progress: bool = False, pretrained: str = "fetch",
               trunk_uri: str | None = None):
    """Train the one-class detector on a split manifest.

    Composes the backbone forward map, elementwise pseudo-Huber, and fcdd_loss,
    optimized with Adam (decay factors and epsilon from ``tc``). Fixed seed gives
    a reproducible log and final weights.

    Returns:
        (ModelWeights, TrainingLog)
    """
    import torch

    from . import scoring
    from .evalharness import auc as compute_auc
    from .model import build_backbone

    train_items = manifest.split_items(TRAIN_SPLIT)
    calib_items = manifest.split_items(CALIBRATION_SPLIT)
    test_items = manifest.split_items(TEST_SPLIT)
    for name, items in ((TRAIN_SPLIT, train_items), (CALIBRATION_SPLIT, calib_items),
                        (TEST_SPLIT, test_items)):
        if not items:
            raise ValueError(f"manifest has an empty {name!r} partition")

    weights = build_backbone(spec, tc.seed, pretrained=pretrained,
                             freeze_trunk=tc.freeze_trunk, trunk_uri=trunk_uri)
    net = weights.module
    x_train, z_train = _load_tensor(train_items, spec.input_side)
    x_calib, z_calib = _load_tensor(calib_items, spec.input_side)

    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=tc.learning_rate, eps=tc.epsilon,
                           betas=(tc.gradient_decay, tc.squared_gradient_decay))
    rng = np.random.default_rng(tc.seed)
    log = TrainingLog(epsilon=tc.epsilon, path=Path(log_path) if log_path else None)

    n = x_train.shape[0]
    for epoch in range(1, tc.epochs + 1):
        t0 = time.time()
        net.train()
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_saturated = 0
        for bi, start in enumerate(range(0, n, tc.batch_size)):
            idx = torch.from_numpy(order[start:start + tc.batch_size].copy())
            xb, zb = x_train[idx], z_train[idx]
            opt.zero_grad()
            hmap = pseudo_huber_t(net(xb))
            loss, saturated = fcdd_loss_t(hmap, zb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, bi)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * xb.shape[0]
            epoch_saturated += saturated
        train_loss = epoch_loss / n

        calib_scores = _score_tensor(net, x_calib, tc.batch_size)
        calib_labels = z_calib.numpy().astype(int)
        calib_auc = compute_auc(calib_scores, calib_labels)
        thr = scoring.best_f1_threshold(calib_scores, calib_labels)
        calib_f1 = scoring.f1_at_threshold(calib_scores, calib_labels, thr)
        row = EpochRecord(epoch, train_loss, calib_auc, calib_f1,
                          time.time() - t0, epoch_saturated)
        log.append(row)
        if progress:
            print(row.line(), flush=True)

    weights.training_config_digest = tc.digest()
    return weights, log


def _load_tensor(items, input_side: int):
    import torch

    from .datapipe import load_image

    imgs = []
    labels = []
    for it in items:
        img = load_image(it.path)
        if img.shape[0] != input_side or img.shape[1] != input_side:
            raise ValueError(f"{it.path}: expected {input_side}^2 input, got {img.shape[:2]}")
        imgs.append(img.astype(np.float32) / 255.0)
        labels.append(it.label)
    x = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy())
    z = torch.tensor(labels, dtype=torch.float32)
    return x, z


def _score_tensor(net, x, batch_size: int) -> np.ndarray:
    """Per-frame anomaly scores (sum of the post-pseudo-Huber map)."""
    import torch

    net.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            hmap = pseudo_huber_t(net(x[start:start + batch_size]))
            scores.append(hmap.sum(dim=(-2, -1)).reshape(-1).numpy())
    return np.concatenate(scores).astype(np.float64)


# --- torch mirrors of the numpy reference functions ---

def pseudo_huber_t(x):
    import torch

    return torch.sqrt(x * x + 1.0) - 1.0


def fcdd_loss_t(hmaps, z):
    """Torch twin of fcdd_loss on a (n, 1, u, v) or (n, u, v) post-Huber batch."""
    import torch

    a = hmaps.reshape(hmaps.shape[0], -1).mean(dim=1)
    e = torch.exp(-a)
    saturated = int(((z == 1) & (e > SATURATION_LIMIT)).sum())
    e = e.clamp(max=SATURATION_LIMIT)
    loss = ((1.0 - z) * a - z * torch.log1p(-e)).mean()
    return loss, saturated
