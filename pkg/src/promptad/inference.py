"""Class-agnostic test-time pipeline.

A prompt pool holds one normal exemplar per class; at test time the pool
entry with the highest cosine similarity (over globally pooled features)
guides reconstruction, and the anomaly map fuses the channelwise L2
reconstruction error with the refiner's probability map.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DatasetError
from .features import BackboneSpec, extract_features, features_for_path, pool_feature
from .model import ReconstructionModel
from .trainer import DatasetIndex
from . import tensor as T


@dataclass
class PromptPoolEntry:
    class_id: str
    features: np.ndarray
    pooled: np.ndarray


@dataclass
class PromptPool:
    entries: list[PromptPoolEntry]
    backbone_spec: BackboneSpec


@dataclass
class ScoreMap:
    s: np.ndarray
    s_rec: np.ndarray
    mhat: np.ndarray
    alpha: float
    image_score: float
    class_selected: str = ""


def build_prompt_pool(index: DatasetIndex, backbone_spec: BackboneSpec,
                      seed: int = 0) -> PromptPool:
    """One randomly chosen normal training image per class, pre-featurized."""
    rng = np.random.default_rng([seed, 9231])
    entries = []
    for cls in index.classes:
        paths = index.train_paths[cls]
        if not paths:
            raise DatasetError(f"class {cls!r} has no training images for the prompt pool")
        pick = int(rng.integers(0, len(paths)))
        feats = features_for_path(paths[pick], backbone_spec)
        pooled = pool_feature(feats)
        norm = float(np.linalg.norm(pooled))
        if norm <= 0.0:
            raise DatasetError(f"prompt for class {cls!r} pooled to a zero vector")
        entries.append(PromptPoolEntry(cls, feats, pooled))
    return PromptPool(entries, backbone_spec)


def select_prompt(test_feature: np.ndarray, pool: PromptPool) -> PromptPoolEntry:
    """Cosine-similarity argmax over the pool; ties go to the lowest class id."""
    if not pool.entries:
        raise ConfigError("prompt pool is empty")
    v = pool_feature(test_feature)
    nv = float(np.linalg.norm(v))
    if nv <= 0.0:
        warnings.warn("test feature pooled to a zero vector; falling back to first class")
        return pool.entries[0]
    sims = np.array([float(v @ e.pooled) / (nv * float(np.linalg.norm(e.pooled)))
                     for e in pool.entries])
    return pool.entries[int(np.argmax(sims))]


def reconstruction_score_map(f: np.ndarray, fhat: np.ndarray) -> np.ndarray:
    """Channelwise L2 norm of the reconstruction error, shape (h, w)."""
    return np.sqrt(((f - fhat) ** 2).sum(axis=-1))


def _resize_map(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    t = T.bilinear_resize(T.Tensor(m[:, :, None]), out_h, out_w)
    return t.data[:, :, 0]


def score(test_image: np.ndarray, pool: PromptPool, model: ReconstructionModel,
          alpha: float = 0.5, smooth_sigma: float = 0.0) -> ScoreMap:
    """Full-resolution anomaly map and scalar image score for one image."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    h_img, w_img = test_image.shape[:2]
    if (h_img, w_img) != model.image_hw:
        raise ConfigError(f"image size {(h_img, w_img)} does not match model {model.image_hw}")
    f = extract_features(test_image, pool.backbone_spec)
    entry = select_prompt(f, pool)
    fhat_t, mhat_t = model.forward(f, entry.features, training=False)
    fhat = fhat_t.data[0]
    s_rec = reconstruction_score_map(f, fhat)
    s_rec_full = _resize_map(s_rec, h_img, w_img)
    if mhat_t is None:
        mhat = np.zeros((h_img, w_img), dtype=np.float32)
        alpha_eff = 0.0
    else:
        mhat = mhat_t.data[0]
        alpha_eff = alpha
    s = (1.0 - alpha_eff) * s_rec_full + alpha_eff * mhat
    if smooth_sigma > 0.0:
        from scipy.ndimage import gaussian_filter
        s = gaussian_filter(s, smooth_sigma)
    return ScoreMap(
        s=s,
        s_rec=s_rec,
        mhat=mhat,
        alpha=alpha_eff,
        image_score=float(s.max()),
        class_selected=entry.class_id,
    )
