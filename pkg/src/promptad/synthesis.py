"""Pseudo-anomaly generation from normal training images.

Two generators are available: rectangle cut-and-paste, and blending a
foreign texture through a thresholded gradient-noise field. Both return
the corrupted image together with its exact binary pixel mask, and both
are pure functions of (inputs, rng state).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SynthesisError

MAX_RESAMPLES = 100


@dataclass
class SynthesisParams:
    patch_area_fraction: tuple[float, float] = (0.02, 0.15)
    aspect_ratio: tuple[float, float] = (0.3, 3.3)
    perlin_octaves: int = 4
    perlin_threshold: float = 0.5
    blend_opacity: tuple[float, float] = (0.2, 1.0)
    method_probability: float = 0.5

    def __post_init__(self):
        lo, hi = self.patch_area_fraction
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError(f"patch_area_fraction must satisfy 0 < lo <= hi < 1, got {self.patch_area_fraction}")
        alo, ahi = self.aspect_ratio
        if not (0.0 < alo <= ahi):
            raise ConfigError(f"aspect_ratio must be positive, got {self.aspect_ratio}")
        blo, bhi = self.blend_opacity
        if not (0.0 < blo <= bhi <= 1.0):
            raise ConfigError(f"blend_opacity must satisfy 0 < lo <= hi <= 1, got {self.blend_opacity}")
        if self.perlin_octaves < 1:
            raise ConfigError("perlin_octaves must be >= 1")
        if not (0.0 <= self.method_probability <= 1.0):
            raise ConfigError("method_probability must lie in [0, 1]")


@dataclass
class AnomalySample:
    image: np.ndarray
    mask: np.ndarray
    source_index: int = -1
    method: str = ""

    def __post_init__(self):
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise SynthesisError(f"mask must be binary, found values {vals[:5]}")
        if not self.mask.any():
            raise SynthesisError("mask has no positive pixels")


def normal_mask(h: int, w: int) -> np.ndarray:
    """The all-zero mask that labels an unmodified normal image."""
    return np.zeros((h, w), dtype=np.uint8)


def paste_rect(image: np.ndarray, src_y: int, src_x: int, dst_y: int, dst_x: int,
               ph: int, pw: int) -> tuple[np.ndarray, np.ndarray]:
    """Copy one rectangle to another location; mask marks the destination."""
    out = image.copy()
    patch = image[src_y:src_y + ph, src_x:src_x + pw].copy()
    out[dst_y:dst_y + ph, dst_x:dst_x + pw] = patch
    mask = np.zeros(image.shape[:2], dtype=np.uint8)
    mask[dst_y:dst_y + ph, dst_x:dst_x + pw] = 1
    return out, mask


def cutpaste(image: np.ndarray, rng: np.random.Generator,
             params: SynthesisParams, source_index: int = -1) -> AnomalySample:
    """Rectangle of random size/aspect copied to a random location."""
    h, w = image.shape[:2]
    lo, hi = params.patch_area_fraction
    for _ in range(MAX_RESAMPLES):
        area = rng.uniform(lo, hi) * h * w
        aspect = rng.uniform(*params.aspect_ratio)
        ph = max(1, int(round(np.sqrt(area / aspect))))
        pw = max(1, int(round(np.sqrt(area * aspect))))
        if ph > h or pw > w:
            continue
        if not (lo <= (ph * pw) / (h * w) <= hi):
            continue
        sy = int(rng.integers(0, h - ph + 1))
        sx = int(rng.integers(0, w - pw + 1))
        dy = int(rng.integers(0, h - ph + 1))
        dx = int(rng.integers(0, w - pw + 1))
        out, mask = paste_rect(image, sy, sx, dy, dx, ph, pw)
        return AnomalySample(out, mask, source_index, "cutpaste")
    raise SynthesisError(f"no feasible patch after {MAX_RESAMPLES} draws for params {params.patch_area_fraction}")


def perlin_field(h: int, w: int, octaves: int, rng: np.random.Generator,
                 base_cells: int = 4) -> np.ndarray:
    """Fractal gradient-lattice noise in [-1, 1], persistence 0.5 per octave.

    Each octave is scaled by sqrt(2) so a single octave genuinely spans
    [-1, 1] (the raw 2D gradient-noise range is +-sqrt(2)/2).
    """
    if h < 8 or w < 8:
        raise ConfigError(f"perlin_field needs h, w >= 8, got {h}x{w}")
    total = np.zeros((h, w), dtype=np.float64)
    amp_sum = 0.0
    amp = 1.0
    for octave in range(octaves):
        cells_y = base_cells * (2 ** octave)
        cells_x = base_cells * (2 ** octave)
        angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells_y + 1, cells_x + 1))
        gy, gx = np.sin(angles), np.cos(angles)
        ys = np.arange(h) * (cells_y / h)
        xs = np.arange(w) * (cells_x / w)
        yi = np.floor(ys).astype(int)[:, None]
        xi = np.floor(xs).astype(int)[None, :]
        fy = (ys[:, None] - yi).astype(np.float64)
        fx = (xs[None, :] - xi).astype(np.float64)

        def corner(dy, dx):
            gyy = gy[yi + dy, xi + dx]
            gxx = gx[yi + dy, xi + dx]
            return gxx * (fx - dx) + gyy * (fy - dy)

        uy = fy * fy * fy * (fy * (fy * 6 - 15) + 10)
        ux = fx * fx * fx * (fx * (fx * 6 - 15) + 10)
        top = corner(0, 0) * (1 - ux) + corner(0, 1) * ux
        bot = corner(1, 0) * (1 - ux) + corner(1, 1) * ux
        total += amp * np.sqrt(2.0) * (top * (1 - uy) + bot * uy)
        amp_sum += amp
        amp *= 0.5
    return (total / amp_sum).astype(np.float32)


def fit_texture(texture: np.ndarray, h: int, w: int) -> np.ndarray:
    """Tile then crop a texture image to exactly (h, w)."""
    ty, tx = texture.shape[:2]
    reps = (int(np.ceil(h / ty)), int(np.ceil(w / tx)), 1)
    return np.tile(texture, reps)[:h, :w]


def perlin_blend(image: np.ndarray, texture: np.ndarray, rng: np.random.Generator,
                 params: SynthesisParams, source_index: int = -1) -> AnomalySample:
    """Blend a texture into the image wherever a noise field clears threshold."""
    h, w = image.shape[:2]
    texture = fit_texture(texture, h, w)
    for _ in range(MAX_RESAMPLES):
        fld = perlin_field(h, w, params.perlin_octaves, rng)
        mask = (fld > params.perlin_threshold).astype(np.uint8)
        if mask.any():
            break
    else:
        raise SynthesisError(f"perlin mask stayed empty after {MAX_RESAMPLES} fields at threshold {params.perlin_threshold}")
    beta = rng.uniform(*params.blend_opacity)
    out = image.copy()
    sel = mask.astype(bool)
    out[sel] = ((1.0 - beta) * image[sel] + beta * texture[sel]).astype(image.dtype)
    return AnomalySample(out, mask, source_index, "perlin-blend")


def shuffled_channels(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A copy with a non-identity channel permutation, as a fallback texture."""
    perms = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    perm = perms[int(rng.integers(0, len(perms)))]
    return image[:, :, perm].copy()


def synthesize(image: np.ndarray, rng: np.random.Generator, params: SynthesisParams,
               textures: list[np.ndarray] | None = None,
               source_index: int = -1) -> AnomalySample:
    """Pick one generator at random and apply it."""
    if rng.random() < params.method_probability:
        return cutpaste(image, rng, params, source_index)
    if textures:
        texture = textures[int(rng.integers(0, len(textures)))]
    else:
        texture = shuffled_channels(image, rng)
    return perlin_blend(image, texture, rng, params, source_index)
