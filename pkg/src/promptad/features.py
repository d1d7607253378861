"""Offline feature maps for the reconstruction model.

Features come either from a built-in frozen mini CNN (a stack of randomly
initialized conv stages, kept fixed forever) or from sibling feature files
produced by an external exporter. Each stage output is resized to a common
fusion grid and concatenated along channels, so the token count and channel
budget are fully determined by the spec.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError
from .fileio import load_feature_file
from . import tensor as T

BUILTIN_KIND = "builtin-mini-cnn"
FEATURE_FILE_KIND = "feature-file"


@dataclass(frozen=True)
class BackboneSpec:
    """Where features come from and what shape they take."""

    kind: str = BUILTIN_KIND
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    fusion_size: tuple[int, int] = (8, 8)
    seed: int = 7

    def __post_init__(self):
        if self.kind not in (BUILTIN_KIND, FEATURE_FILE_KIND):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage channels must be positive, got {self.stage_channels}")

    @property
    def channels(self) -> int:
        return int(sum(self.stage_channels))


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check the (H, W, 3) float-in-[0,1] contract and return float32."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    if image.shape[0] < 32 or image.shape[1] < 32:
        raise ShapeError(f"image must be at least 32x32, got {image.shape[:2]}")
    image = image.astype(np.float32)
    if not np.isfinite(image).all():
        raise ShapeError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ShapeError("image values must lie in [0, 1]")
    return image


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


class MiniBackbone:
    """Frozen random conv pyramid: conv3x3 -> batchnorm(eval) -> relu -> pool.

    Weights are drawn once from a seeded normal distribution and never
    trained; the point is stable, texture-sensitive features, not accuracy.
    The batch-norm running statistics are calibrated once on seeded noise
    images so eval-mode normalization emits unit-scale channels (without
    this every stage compounds arbitrary channel scales and downstream
    reconstruction losses are badly conditioned). Everything stays a pure
    function of the spec.
    """

    CALIBRATION_IMAGES = 8
    CALIBRATION_SIZE = 64

    def __init__(self, spec: BackboneSpec):
        if spec.kind != BUILTIN_KIND:
            raise ConfigError(f"MiniBackbone requires kind={BUILTIN_KIND!r}")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.stages = []
        cin = 3
        for cout in spec.stage_channels:
            std = np.sqrt(2.0 / (9 * cin))
            self.stages.append({
                "w": rng.normal(0.0, std, size=(3, 3, cin, cout)).astype(np.float32),
                "b": np.zeros(cout, dtype=np.float32),
                "gamma": np.ones(cout, dtype=np.float32),
                "beta": np.zeros(cout, dtype=np.float32),
                "mean": np.zeros(cout, dtype=np.float32),
                "var": np.ones(cout, dtype=np.float32),
            })
            cin = cout
        self._calibrate(np.random.default_rng([spec.seed, 101]))

    def _calibrate(self, rng: np.random.Generator) -> None:
        n, size = self.CALIBRATION_IMAGES, self.CALIBRATION_SIZE
        x = T.Tensor(rng.random((n, size, size, 3)).astype(np.float32))
        for stage in self.stages:
            pre = T.conv2d_3x3(x, T.Tensor(stage["w"]), T.Tensor(stage["b"]))
            flat = pre.data.reshape(-1, pre.data.shape[-1])
            stage["mean"] = flat.mean(axis=0).astype(np.float32)
            stage["var"] = (flat.var(axis=0) + 1e-3).astype(np.float32)
            post = T.batch_norm(pre, T.Tensor(stage["gamma"]), T.Tensor(stage["beta"]),
                                stage["mean"], stage["var"], training=False)
            x = T.avg_pool2x2(T.relu(post))

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for stage in self.stages:
            for key in ("w", "b", "gamma", "beta", "mean", "var"):
                digest.update(stage[key].tobytes())
        return digest.hexdigest()

    def extract(self, image: np.ndarray) -> np.ndarray:
        """Fused multi-stage features, shape fusion_size + (sum(channels),)."""
        image = validate_image(image)
        factor = 2 ** len(self.stages)
        h, w = image.shape[:2]
        if h % factor or w % factor:
            raise ShapeError(f"image size {h}x{w} not divisible by {factor}")
        fh, fw = self.spec.fusion_size
        x = T.Tensor(image)
        collected = []
        for stage in self.stages:
            x = T.conv2d_3x3(x, T.Tensor(stage["w"]), T.Tensor(stage["b"]))
            x = T.batch_norm(x, T.Tensor(stage["gamma"]), T.Tensor(stage["beta"]),
                             stage["mean"], stage["var"], training=False)
            x = T.relu(x)
            x = T.avg_pool2x2(x)
            collected.append(T.bilinear_resize(x, fh, fw).data)
        return np.concatenate(collected, axis=-1)


_backbones: dict[BackboneSpec, MiniBackbone] = {}


def get_backbone(spec: BackboneSpec) -> MiniBackbone:
    if spec not in _backbones:
        _backbones[spec] = MiniBackbone(spec)
    return _backbones[spec]


def extract_features(image: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    """Run the frozen built-in backbone on one image."""
    if spec.kind != BUILTIN_KIND:
        raise ConfigError(f"extract_features requires kind={BUILTIN_KIND!r}, got {spec.kind!r}")
    return get_backbone(spec).extract(image)


def features_for_path(path, spec: BackboneSpec) -> np.ndarray:
    """Features for a dataset entry, honoring the spec's source kind.

    For the feature-file kind, ``<image>.onip`` (the image path with its
    suffix replaced) is loaded instead of running any network; a raw
    ``*.onip`` path is loaded directly.
    """
    from pathlib import Path

    path = Path(path)
    if spec.kind == FEATURE_FILE_KIND:
        fpath = path if path.suffix == ".onip" else path.with_suffix(".onip")
        fm = load_feature_file(fpath)
        if fm.shape[2] != spec.channels:
            raise ShapeError(f"{fpath}: has {fm.shape[2]} channels, spec expects {spec.channels}")
        return fm
    return extract_features(load_image(path), spec)


def pool_feature(fm: np.ndarray) -> np.ndarray:
    """Global average over the spatial grid: one value per channel."""
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ShapeError(f"expected (h, w, c) feature map, got {fm.shape}")
    return fm.mean(axis=(0, 1))
