"""Frozen-backbone feature extraction and the ONIP feature-file format.

Run:  python demos/02_features_and_files.py
"""

import tempfile
from pathlib import Path

import numpy as np

from promptad.features import BackboneSpec, extract_features, pool_feature
from promptad.fileio import load_feature_file, save_feature_file
from promptad.toydata import render_toy_image

# desk-scale spec: 4 stages, fused on an 8x8 grid, 120 channels total
spec = BackboneSpec(stage_channels=(8, 16, 32, 64), fusion_size=(8, 8), seed=7)

image = render_toy_image("grid", np.random.default_rng(0))
fm = extract_features(image, spec)
print("feature map:", fm.shape, "finite:", np.isfinite(fm).all())

# determinism: the backbone is frozen, same image -> same features
again = extract_features(image.copy(), spec)
print("bitwise identical on re-extract:", np.array_equal(fm, again))

# global average pooling gives the vector used for cosine prompt selection
pooled = pool_feature(fm)
print("pooled vector:", pooled.shape, "norm %.3f" % np.linalg.norm(pooled))

# round-trip through the binary feature file
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "sample.onip"
    save_feature_file(fm, path)
    back = load_feature_file(path)
    print("file round-trip bitwise identical:", np.array_equal(fm, back))
    print("file size:", path.stat().st_size, "bytes "
          f"(= 20-byte header + {fm.size} float32)")

# the full-scale spec mirrors a 272-channel, 14x14 pyramid at 224x224 input
full = BackboneSpec(stage_channels=(24, 32, 56, 160), fusion_size=(14, 14), seed=7)
big = extract_features(np.random.default_rng(1).random((224, 224, 3)).astype(np.float32), full)
print("full-scale feature map:", big.shape)
