"""Backbone mappings from an input frame to a low-resolution receptive-field map.

Every registered backbone ends in a 1x1 single-channel projection so its output
is a u x v map (28 x 28 for the default 224^2 input, total stride 8). Deeper
pretrained trunks are truncated at the last layer whose grid is still >= the
target resolution, with one exact strided bridge convolution when needed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

_MAGIC = b"RFDDWTS1"

CNN27_ID = "CNN27"
VGG16_ID = "VGG16"
RESNET101_ID = "ResNet101"
INCEPTIONV3_ID = "InceptionV3"

# CNN27 layer accounting: 13 [conv3x3 + batchnorm] blocks (26 layers) plus the
# final 1x1 projection = 27; three 2x2 max-pool stages (uncounted) give stride 8.
# Blocks are front-loaded to keep the receptive field compact (88 px at stride 8),
# which keeps the output map localized around each cell's center.
CNN27_STAGE_BLOCKS = (4, 4, 3, 2)
CNN27_STAGE_WIDTHS = (4, 8, 16, 32)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class UnknownBackboneError(ValueError):
    pass


class PretrainedFetchError(RuntimeError):
    """Pretrained trunk parameters could not be fetched; never falls back silently."""


class ConfigurationError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass
class BackboneSpec:
    id: str = CNN27_ID
    input_side: int = 224
    u: int = 28
    v: int = 28
    truncation_point: str = ""
    head: str = "conv1x1"

    def __post_init__(self):
        if self.u < 1 or self.v < 1:
            raise ConfigurationError("u and v must be >= 1")
        if self.input_side % self.u or self.input_side % self.v:
            raise ConfigurationError(
                f"input_side {self.input_side} does not evenly cover a {self.u}x{self.v} grid")
        if self.id == CNN27_ID and self.truncation_point:
            raise ConfigurationError("CNN27 has no truncation point")

    @classmethod
    def for_backbone(cls, backbone_id: str, input_side: int = 224) -> "BackboneSpec":
        """Spec with the grid implied by the backbone's total stride of 8."""
        if backbone_id not in _REGISTRY:
            raise UnknownBackboneError(f"unknown backbone id {backbone_id!r}")
        if input_side % 8:
            raise ConfigurationError("input_side must be a multiple of the total stride 8")
        side = input_side // 8
        return cls(id=backbone_id, input_side=input_side, u=side, v=side,
                   truncation_point=_REGISTRY[backbone_id].truncation_point)


@dataclass
class ReceptiveFieldGeometry:
    total_stride: float
    field_extent: float
    offset: float

    def __post_init__(self):
        if self.total_stride <= 0:
            raise ConfigurationError("total_stride must be positive")
        if self.offset < 0:
            raise ConfigurationError("offset must be non-negative")

    def center(self, x: int, y: int) -> tuple[float, float]:
        return (self.offset + x * self.total_stride, self.offset + y * self.total_stride)


@dataclass
class FeatureMap:
    """u x v single-channel output of a backbone mapping."""

    values: np.ndarray
    frame_id: str | None = None
    backbone_id: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeMismatchError("feature map must be 2D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")


class _InputNorm(nn.Module):
    """Fixed per-channel normalization in front of a pretrained trunk."""

    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _compose_extent(layers) -> int:
    """Receptive-field side from a sequence of (kernel, stride) summaries."""
    extent, jump = 1, 1
    for k, s in layers:
        extent += (k - 1) * jump
        jump *= s
    return extent


def bridge_conv_params(r_in: int, r_out: int) -> tuple[int, int, int]:
    """Kernel/stride/padding of one conv mapping an r_in grid exactly onto r_out."""
    if r_in < r_out:
        raise ConfigurationError(f"cannot bridge {r_in} up to {r_out}")
    candidates = sorted({max(1, round(r_in / r_out)), max(1, r_in // r_out),
                         -(-r_in // r_out)})
    best = None
    for s in candidates:
        r = r_in - s * (r_out - 1)
        # smallest kernel >= 3 with k - 2p == r  (exact output size, p >= 0)
        k = r if r >= 3 else r + 2 * ((3 - r + 1) // 2)
        p = (k - r) // 2
        if k <= r_in and p >= 0 and (best is None or k < best[0]):
            best = (k, s, p)
    if best is None:
        raise ConfigurationError(f"no single-conv bridge from {r_in} to {r_out}")
    return best


def _fetch_guard(loader: Callable, what: str):
    try:
        return loader()
    except Exception as exc:  # urllib errors, HTTP failures, checksum mismatches
        raise PretrainedFetchError(
            f"could not fetch pretrained parameters for {what}: {exc}") from exc


def trunk_cache_dir() -> Path:
    import os

    return Path(os.environ.get("RAILFCDD_CACHE", Path.home() / ".cache" / "railfcdd"))


def _load_trunk_uri(model: nn.Module, uri: str, what: str):
    """Fill a torchvision model from a state dict at a config-declared URI."""
    def load():
        state = torch.hub.load_state_dict_from_url(
            uri, model_dir=str(trunk_cache_dir() / "trunks"), map_location="cpu",
            check_hash=False)
        model.load_state_dict(state)
        return model
    return _fetch_guard(load, f"{what} ({uri})")


def _build_cnn27(spec: BackboneSpec, seed: int, pretrained: str, freeze_trunk: bool,
                 trunk_uri: str | None = None):
    torch.manual_seed(seed)
    layers: list[nn.Module] = []
    cin = 3
    for si, (nblocks, width) in enumerate(zip(CNN27_STAGE_BLOCKS, CNN27_STAGE_WIDTHS)):
        for _ in range(nblocks):
            layers += [nn.Conv2d(cin, width, 3, padding=1, bias=False),
                       nn.BatchNorm2d(width),
                       nn.LeakyReLU(0.01, inplace=True)]
            cin = width
        if si < 3:
            layers.append(nn.MaxPool2d(2))
    layers.append(nn.Conv2d(cin, 1, 1))
    return nn.Sequential(*layers)


def _deeper_builder(spec: BackboneSpec, seed: int, pretrained: str, freeze_trunk: bool,
                    trunk_uri: str | None = None):
    from torchvision import models

    bid = spec.id
    if bid == VGG16_ID:
        if pretrained == "fetch" and trunk_uri:
            tv = _load_trunk_uri(models.vgg16(weights=None), trunk_uri, bid)
        elif pretrained == "fetch":
            tv = _fetch_guard(lambda: models.vgg16(weights=models.VGG16_Weights.IMAGENET1K_V1), bid)
        else:
            tv = models.vgg16(weights=None)
        trunk = tv.features[:23]  # through conv4_3 + relu, 512 x 28 x 28 at 224^2
        channels = 512
    elif bid == RESNET101_ID:
        if pretrained == "fetch" and trunk_uri:
            tv = _load_trunk_uri(models.resnet101(weights=None), trunk_uri, bid)
        elif pretrained == "fetch":
            tv = _fetch_guard(
                lambda: models.resnet101(weights=models.ResNet101_Weights.IMAGENET1K_V1), bid)
        else:
            tv = models.resnet101(weights=None)
        trunk = nn.Sequential(tv.conv1, tv.bn1, tv.relu, tv.maxpool, tv.layer1, tv.layer2)
        channels = 512
    elif bid == INCEPTIONV3_ID:
        if pretrained == "fetch" and trunk_uri:
            tv = _load_trunk_uri(
                models.inception_v3(weights=None, aux_logits=True, init_weights=False),
                trunk_uri, bid)
        elif pretrained == "fetch":
            tv = _fetch_guard(
                lambda: models.inception_v3(weights=models.Inception_V3_Weights.IMAGENET1K_V1), bid)
        else:
            tv = models.inception_v3(weights=None, aux_logits=True, init_weights=True)
        trunk = nn.Sequential(tv.Conv2d_1a_3x3, tv.Conv2d_2a_3x3, tv.Conv2d_2b_3x3,
                              tv.maxpool1, tv.Conv2d_3b_1x1, tv.Conv2d_4a_3x3)
        channels = 192
    else:
        raise UnknownBackboneError(f"unknown backbone id {bid!r}")

    with torch.no_grad():
        probe = trunk(torch.zeros(1, 3, spec.input_side, spec.input_side))
    grid = probe.shape[-1]
    if grid < spec.u:
        raise ConfigurationError(
            f"{bid} trunk grid {grid} is below the target {spec.u} at input {spec.input_side}")

    if freeze_trunk:
        for p in trunk.parameters():
            p.requires_grad = False

    torch.manual_seed(seed)  # trunk is seed-independent; head (and bridge) vary per seed
    extra: list[nn.Module] = []
    if grid > spec.u:
        k, s, p = bridge_conv_params(grid, spec.u)
        extra.append(nn.Conv2d(channels, channels, k, stride=s, padding=p))
        extra.append(nn.LeakyReLU(0.01, inplace=True))
    extra.append(nn.Conv2d(channels, 1, 1))
    return nn.Sequential(_InputNorm(_IMAGENET_MEAN, _IMAGENET_STD), trunk, *extra)


@dataclass(frozen=True)
class _BackboneDef:
    builder: Callable
    rf_layers: tuple
    truncation_point: str


_REGISTRY: dict[str, _BackboneDef] = {
    CNN27_ID: _BackboneDef(
        _build_cnn27,
        tuple([(3, 1)] * 4 + [(2, 2)] + [(3, 1)] * 4 + [(2, 2)] + [(3, 1)] * 3
              + [(2, 2)] + [(3, 1)] * 2 + [(1, 1)]),
        ""),
    VGG16_ID: _BackboneDef(
        _deeper_builder,
        tuple([(3, 1), (3, 1), (2, 2)] * 2 + [(3, 1), (3, 1), (3, 1), (2, 2)]
              + [(3, 1), (3, 1), (3, 1)]),
        "features.22"),
    RESNET101_ID: _BackboneDef(
        _deeper_builder,
        ((7, 2), (3, 2)) + ((3, 1),) * 3 + ((3, 2),) + ((3, 1),) * 3,
        "layer2"),
    INCEPTIONV3_ID: _BackboneDef(
        _deeper_builder,
        ((3, 2), (3, 1), (3, 1), (3, 2), (1, 1), (3, 1), (2, 2)),
        "Conv2d_4a_3x3"),
}


def register_backbone(backbone_id: str, builder: Callable, rf_layers=((1, 1),),
                      truncation_point: str = ""):
    """Register a custom backbone builder under a new id."""
    if backbone_id in _REGISTRY:
        raise ValueError(f"backbone id {backbone_id!r} already registered")
    _REGISTRY[backbone_id] = _BackboneDef(builder, tuple(rf_layers), truncation_point)


def registered_backbones() -> list[str]:
    return list(_REGISTRY)


@dataclass
class ModelWeights:
    """Live network plus the metadata needed to rebuild it bit-exactly."""

    backbone_id: str
    spec: BackboneSpec
    module: nn.Module
    trainable_mask: dict[str, bool]
    seed: int
    training_config_digest: str = ""

    def parameter_blob(self) -> bytes:
        parts = []
        for name, tensor in self.module.state_dict().items():
            parts.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path: Path | str):
        state = self.module.state_dict()
        tensors = [{"name": k, "shape": list(v.shape), "dtype": str(v.numpy().dtype),
                    "trainable": bool(self.trainable_mask.get(k, False))}
                   for k, v in state.items()]
        blob = self.parameter_blob()
        header = json.dumps({
            "backbone_id": self.backbone_id,
            "spec": asdict(self.spec),
            "seed": self.seed,
            "training_config_digest": self.training_config_digest,
            "blob_sha256": hashlib.sha256(blob).hexdigest(),
            "tensors": tensors,
        }, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(blob)

    @classmethod
    def load(cls, path: Path | str) -> "ModelWeights":
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC:
                raise ValueError(f"{path}: not a weight container")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode())
            blob = fh.read()
        if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
            raise ValueError(f"{path}: parameter blob digest mismatch")
        spec = BackboneSpec(**header["spec"])
        weights = build_backbone(spec, header["seed"], pretrained="none")
        state = {}
        offset = 0
        for meta in header["tensors"]:
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += count * 4
            arr = raw.reshape(meta["shape"]).astype(meta["dtype"])
            state[meta["name"]] = torch.from_numpy(arr.copy())
        weights.module.load_state_dict(state)
        saved_mask = {m["name"]: m["trainable"] for m in header["tensors"]}
        weights.trainable_mask = {}
        for name, p in weights.module.named_parameters():
            p.requires_grad = saved_mask.get(name, True)
            weights.trainable_mask[name] = p.requires_grad
        weights.training_config_digest = header["training_config_digest"]
        return weights


def build_backbone(spec: BackboneSpec, seed: int, *, pretrained: str = "fetch",
                   freeze_trunk: bool = False, trunk_uri: str | None = None) -> ModelWeights:
    """Construct a backbone per its spec.

    ``pretrained`` applies to the deeper variants only: "fetch" loads the trunk
    parameters from ``trunk_uri`` (any URL torch.hub accepts, cached under
    RAILFCDD_CACHE) or from the published torchvision source, raising
    PretrainedFetchError when unavailable; "none" initializes the trunk randomly
    (explicit opt-in, e.g. offline tests). CNN27 is always randomly initialized
    from the seed.
    """
    if spec.id not in _REGISTRY:
        raise UnknownBackboneError(f"unknown backbone id {spec.id!r}")
    if pretrained not in ("fetch", "none"):
        raise ValueError("pretrained must be 'fetch' or 'none'")
    builder = _REGISTRY[spec.id].builder
    module = builder(spec, seed, pretrained, freeze_trunk, trunk_uri)
    module.eval()
    mask = {name: p.requires_grad for name, p in module.named_parameters()}
    return ModelWeights(spec.id, spec, module, mask, seed)


def geometry_of(spec: BackboneSpec) -> ReceptiveFieldGeometry:
    """Stride/offset/extent of the spec's receptive-field grid."""
    if spec.input_side % spec.u or spec.input_side % spec.v:
        raise ConfigurationError("non-integral stride")
    stride_u = spec.input_side // spec.u
    stride_v = spec.input_side // spec.v
    if stride_u != stride_v:
        raise ConfigurationError("anisotropic grids are not supported")
    bdef = _REGISTRY.get(spec.id)
    extent = _compose_extent(bdef.rf_layers) if bdef is not None else float(stride_u)
    return ReceptiveFieldGeometry(total_stride=float(stride_u), field_extent=float(extent),
                                  offset=stride_u / 2.0)


def forward_map(weights: ModelWeights, frame) -> FeatureMap:
    """Map one frame through the backbone to its u x v receptive-field map."""
    pixels = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame)
    side = weights.spec.input_side
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[:2] != (side, side):
        raise ShapeMismatchError(
            f"expected a {side}x{side}x3 frame, got {getattr(pixels, 'shape', None)}")
    x = pixels.astype(np.float32)
    if pixels.dtype == np.uint8:
        x /= 255.0
    tensor = torch.from_numpy(x.transpose(2, 0, 1).copy())[None]
    weights.module.eval()
    with torch.no_grad():
        out = weights.module(tensor)
    values = out[0, 0].numpy()
    if values.shape != (weights.spec.u, weights.spec.v):
        raise ShapeMismatchError(
            f"backbone produced {values.shape}, spec declares {(weights.spec.u, weights.spec.v)}")
    if not np.all(np.isfinite(values)):
        raise ValueError("backbone produced non-finite map values")
    return FeatureMap(values, getattr(frame, "frame_id", None), weights.backbone_id)


def forward_maps(weights: ModelWeights, frames, batch_size: int = 32) -> list[FeatureMap]:
    """Batched forward_map over many frames (same contract, one eval pass)."""
    out: list[FeatureMap] = []
    arrs = []
    ids = []
    side = weights.spec.input_side
    for frame in frames:
        pixels = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[:2] != (side, side):
            raise ShapeMismatchError(f"expected {side}x{side}x3 frames")
        x = pixels.astype(np.float32)
        if pixels.dtype == np.uint8:
            x /= 255.0
        arrs.append(x.transpose(2, 0, 1))
        ids.append(getattr(frame, "frame_id", None))
    weights.module.eval()
    with torch.no_grad():
        for start in range(0, len(arrs), batch_size):
            batch = torch.from_numpy(np.stack(arrs[start:start + batch_size]))
            maps = weights.module(batch)[:, 0].numpy()
            for i, values in enumerate(maps):
                out.append(FeatureMap(values, ids[start + i], weights.backbone_id))
    return out
