"""Full-resolution deterioration-mark heatmaps from receptive-field maps.

Each field cell contributes one amplitude-weighted 2D Gaussian centered at its
receptive-field center; the accumulated canvas is rendered with a saturating
display range of [min, min + (max - min) * q].
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelWeights, ReceptiveFieldGeometry, forward_maps, geometry_of

_DUMP_MAGIC = b"HMAP"


class GeometryError(ValueError):
    pass


@dataclass
class GaussianKernelSpec:
    """Kernel width and truncation radius; 4 sigma keeps the lost mass < 0.01%."""

    sigma: float
    support_radius: float | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.support_radius is None:
            self.support_radius = 4.0 * self.sigma
        if self.support_radius < 3.0 * self.sigma:
            raise ValueError("support_radius must be at least 3 sigma")

    @classmethod
    def for_geometry(cls, geom: ReceptiveFieldGeometry) -> "GaussianKernelSpec":
        return cls(sigma=geom.total_stride / 2.0)


@dataclass
class Heatmap:
    values: np.ndarray
    frame_id: str | None = None
    sigma_used: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("heatmap must be 2D")


@dataclass
class RenderSpec:
    quartile: float = 0.25
    colormap_id: str = "jet"
    bounds_mode: str = "per_image"  # or "global"

    def __post_init__(self):
        if not 0.0 < self.quartile <= 1.0:
            raise ValueError("quartile must lie in (0, 1]")
        if self.bounds_mode not in ("per_image", "global"):
            raise ValueError("bounds_mode must be 'per_image' or 'global'")


@dataclass
class RenderResult:
    png_bytes: bytes
    bounds: tuple[float, float]
    degenerate: bool
    colormap_id: str
    quartile: float

    def metadata(self, **extra) -> dict:
        md = {"display_min": self.bounds[0], "display_max": self.bounds[1],
              "degenerate_range": self.degenerate, "colormap": self.colormap_id,
              "quartile": self.quartile}
        md.update(extra)
        return md


def gaussian_upsample(field_map, geom: ReceptiveFieldGeometry, kernel: GaussianKernelSpec,
                      out_dims: tuple[int, int]) -> Heatmap:
    """Accumulate one truncated Gaussian per field cell onto an (h, w) canvas.

    Cell (x, y) with amplitude d adds d * G2(center(x, y), sigma), where the
    Gaussian is evaluated on the pixel grid and clipped at the canvas edge.
    """
    values = np.asarray(field_map.values if hasattr(field_map, "values") else field_map,
                        dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")
    h, w = int(out_dims[0]), int(out_dims[1])
    u, v = values.shape
    last_center = (geom.center(u - 1, v - 1))
    if geom.center(0, 0)[0] < 0 or last_center[0] > h - 1 or last_center[1] > w - 1:
        raise GeometryError(
            f"receptive-field centers fall outside the {h}x{w} canvas")

    canvas = np.zeros((h, w), dtype=np.float64)
    amp = 1.0 / (2.0 * np.pi * kernel.sigma ** 2)
    inv2s2 = 1.0 / (2.0 * kernel.sigma ** 2)
    radius = float(kernel.support_radius)
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    for x in range(u):
        c1 = geom.offset + x * geom.total_stride
        r0 = max(0, int(np.ceil(c1 - radius)))
        r1 = min(h - 1, int(np.floor(c1 + radius)))
        if r1 < r0:
            continue
        gr = np.exp(-((rows[r0:r1 + 1] - c1) ** 2) * inv2s2)
        for y in range(v):
            d = values[x, y]
            if d == 0.0:
                continue
            c2 = geom.offset + y * geom.total_stride
            q0 = max(0, int(np.ceil(c2 - radius)))
            q1 = min(w - 1, int(np.floor(c2 + radius)))
            if q1 < q0:
                continue
            gc = np.exp(-((cols[q0:q1 + 1] - c2) ** 2) * inv2s2)
            canvas[r0:r1 + 1, q0:q1 + 1] += (d * amp) * np.outer(gr, gc)

    return Heatmap(canvas, getattr(field_map, "frame_id", None), kernel.sigma)


def render(heat: Heatmap, spec: RenderSpec, bounds: tuple[float, float] | None = None) -> RenderResult:
    """Render a heatmap to PNG bytes under the saturating display-range rule."""
    from matplotlib import colormaps
    from PIL import Image

    values = heat.values
    if bounds is None:
        lo = float(values.min())
        hi = lo + (float(values.max()) - lo) * spec.quartile
    else:
        lo, hi = float(bounds[0]), float(bounds[1])
    degenerate = hi <= lo
    if degenerate:
        norm = np.zeros_like(values)
    else:
        norm = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    cmap = colormaps[spec.colormap_id]
    rgb = (cmap(norm)[..., :3] * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    return RenderResult(buf.getvalue(), (lo, hi), degenerate, spec.colormap_id, spec.quartile)


def batch_heatmaps(weights: ModelWeights, frames, kernel: GaussianKernelSpec | None = None,
                   spec: RenderSpec | None = None):
    """Heatmap + rendered image per frame; per-frame failures are reported, not raised.

    Returns:
        (results, failures): results is a list of (Heatmap, RenderResult) in frame
        order for the frames that succeeded; failures is a list of (index, error
        message) for those that did not.
    """
    from .losses import pseudo_huber

    spec = spec or RenderSpec()
    geom = geometry_of(weights.spec)
    kernel = kernel or GaussianKernelSpec.for_geometry(geom)
    side = weights.spec.input_side

    results: list[tuple[Heatmap, RenderResult]] = []
    failures: list[tuple[int, str]] = []
    heats: list[Heatmap | None] = []
    for i, frame in enumerate(frames):
        try:
            fmap = forward_maps(weights, [frame])[0]
            heat = gaussian_upsample(pseudo_huber(fmap), geom, kernel, (side, side))
            heats.append(heat)
        except Exception as exc:
            heats.append(None)
            failures.append((i, f"{type(exc).__name__}: {exc}"))

    global_bounds = None
    if spec.bounds_mode == "global":
        ok = [h.values for h in heats if h is not None]
        if ok:
            lo = min(float(v.min()) for v in ok)
            hi = max(float(v.max()) for v in ok)
            global_bounds = (lo, lo + (hi - lo) * spec.quartile)
    for heat in heats:
        if heat is None:
            continue
        results.append((heat, render(heat, spec, bounds=global_bounds)))
    return results, failures


def write_heatmap_files(heat: Heatmap, rendered: RenderResult, stem: Path | str,
                        backbone_id: str | None = None, dump_raw: bool = False) -> dict:
    """Write <stem>.png plus a JSON sidecar (and optionally <stem>.f32 raw grid)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".png").write_bytes(rendered.png_bytes)
    meta = rendered.metadata(frame_id=heat.frame_id, sigma=heat.sigma_used,
                             backbone_id=backbone_id)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if dump_raw:
        save_heatmap_grid(heat, stem.with_suffix(".f32"))
    return meta


def save_heatmap_grid(heat: Heatmap, path: Path | str):
    """Raw dump: 16-byte header (magic, h, w, reserved) + little-endian float32 grid."""
    h, w = heat.values.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<III", h, w, 0))
        fh.write(heat.values.astype("<f4").tobytes())


def load_heatmap_grid(path: Path | str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _DUMP_MAGIC:
            raise ValueError(f"{path}: not a heatmap grid dump")
        h, w, _ = struct.unpack("<III", fh.read(12))
        return np.frombuffer(fh.read(), dtype="<f4").reshape(h, w).astype(np.float64)
