"""Bundled procedural toy corpus.

Three small texture classes (grids, blobs, stripes) rendered at 32x32 with
per-image jitter, laid out in the MVTec directory convention. Test-split
anomalies are synthesized from held-out normal images with the same
generators used during training, so every experiment is self-contained.

The desk_* helpers give the configuration the whole acceptance suite runs
at: small enough for CPU minutes, big enough for every mechanism to engage.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .features import BackboneSpec, save_image, save_mask
from .model import ModelConfig
from .synthesis import SynthesisParams, synthesize
from .trainer import TrainConfig

TOY_CLASSES = ("grid", "blobs", "stripes")


def desk_backbone_spec() -> BackboneSpec:
    return BackboneSpec(stage_channels=(8, 16, 32, 64), fusion_size=(8, 8), seed=7)


def desk_model_config(**overrides) -> ModelConfig:
    base = dict(
        model_dim=120,
        num_encoder_layers=2,
        num_decoder_layers=2,
        num_heads=8,
        mlp_hidden=240,
        dropout=0.0,
        decoder_variant="bidirectional",
        nma_enabled=True,
        nma_radius=1,
        refiner_enabled=True,
        refiner_blocks=2,
        refiner_channels=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=200,
        batch_size=8,
        lr=3e-3,
        lr_drop_epoch=160,
        lr_drop_factor=0.1,
        weight_decay=1e-4,
        lam=0.5,
        prompt_mode="random",
        seed=0,
        grad_clip=1.0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_synth_params() -> SynthesisParams:
    return SynthesisParams(
        patch_area_fraction=(0.08, 0.3),
        aspect_ratio=(0.5, 2.0),
        perlin_octaves=3,
        perlin_threshold=0.35,
        blend_opacity=(0.6, 1.0),
    )


# Each class is a fixed pattern; per-image variation is a global brightness
# factor plus faint pixel noise. Keeping the spatial layout static is what
# lets a desk-sized model reconstruct normal images almost exactly, so the
# reconstruction error genuinely concentrates on anomalies.


def _render_grid(n: int) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n]
    dark = (ys % 8 < 2) | (xs % 8 < 2)
    lum = np.where(dark, 0.30, 0.85)
    return lum[:, :, None] * np.array([0.70, 0.80, 1.00])


def _render_blobs(n: int) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n]
    lum = np.full((n, n), 0.2)
    centers = np.array([[8, 8], [8, 24], [24, 8], [24, 24], [16, 16]], dtype=float)
    centers = centers * (n / 32.0)
    for cy, cx in centers:
        lum += 0.55 * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * 3.5 ** 2))
    lum = np.clip(lum, 0.0, 1.0)
    return lum[:, :, None] * np.array([0.70, 1.00, 0.75])


def _render_stripes(n: int) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n]
    lum = 0.55 + 0.38 * np.sin(2 * np.pi * (ys + xs) / 8.0)
    return lum[:, :, None] * np.array([1.00, 0.72, 0.62])


_RENDERERS = {"grid": _render_grid, "blobs": _render_blobs, "stripes": _render_stripes}


def render_toy_image(class_id: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    img = _RENDERERS[class_id](size) * rng.uniform(0.9, 1.1)
    img = img + rng.normal(0.0, 0.003, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_toy_corpus(out_dir, seed: int = 0, classes=TOY_CLASSES,
                    n_train: int = 8, n_test_good: int = 4, n_test_anom: int = 6,
                    size: int = 32, synth_params: SynthesisParams | None = None) -> Path:
    """Write a full train/test/ground_truth tree; returns the corpus root."""
    out_dir = Path(out_dir)
    params = synth_params or desk_synth_params()
    rng = np.random.default_rng([seed, 424242])
    texture_bank = {cls: [] for cls in classes}
    for cls in classes:
        train_dir = out_dir / cls / "train" / "good"
        train_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_train):
            img = render_toy_image(cls, rng, size)
            texture_bank[cls].append(img)
            save_image(img, train_dir / f"{i:03d}.png")
    for cls in classes:
        good_dir = out_dir / cls / "test" / "good"
        anom_dir = out_dir / cls / "test" / "synthetic"
        gt_dir = out_dir / cls / "ground_truth" / "synthetic"
        for d in (good_dir, anom_dir, gt_dir):
            d.mkdir(parents=True, exist_ok=True)
        for i in range(n_test_good):
            save_image(render_toy_image(cls, rng, size), good_dir / f"{i:03d}.png")
        textures = [img for other, bank in texture_bank.items() if other != cls
                    for img in bank]
        for i in range(n_test_anom):
            base = render_toy_image(cls, rng, size)
            sample = synthesize(base, rng, params, textures=textures)
            save_image(sample.image, anom_dir / f"{i:03d}.png")
            save_mask(sample.mask, gt_dir / f"{i:03d}_mask.png")
    return out_dir
