"""Cross-component check: files written by the external feature exporter load
cleanly here. Skipped entirely when the exporter package is not installed,
so the primary suite stands alone."""

import numpy as np
import pytest

featexport = pytest.importorskip("featexport")

from promptad.features import BackboneSpec, features_for_path, pool_feature
from promptad.fileio import load_feature_file


@pytest.fixture(scope="module")
def exported_file(tmp_path_factory):
    from PIL import Image

    root = tmp_path_factory.mktemp("imgs")
    (root / "train").mkdir()
    rng = np.random.default_rng(3)
    img_path = root / "train" / "sample.png"
    Image.fromarray((rng.random((48, 48, 3)) * 255).astype(np.uint8)).save(img_path)
    out = tmp_path_factory.mktemp("feats")
    featexport.export(root, out, weights="random", seed=0)
    return out / "train" / "sample.onip"


class TestExporterInterop:
    def test_loads_with_declared_shape(self, exported_file):
        fm = load_feature_file(exported_file)
        assert fm.shape == (14, 14, 272)
        assert fm.dtype == np.float32
        assert np.isfinite(fm).all()

    def test_pooled_cosine_self_similarity_is_one(self, exported_file):
        fm = load_feature_file(exported_file)
        pooled = pool_feature(fm)
        norm = float(np.linalg.norm(pooled))
        assert norm > 0.0
        assert abs(float(pooled @ pooled) / norm ** 2 - 1.0) < 1e-6

    def test_feature_file_backbone_kind_consumes_export(self, exported_file):
        spec = BackboneSpec(kind="feature-file", stage_channels=(24, 32, 56, 160),
                            fusion_size=(14, 14))
        fm = features_for_path(exported_file, spec)
        assert fm.shape == (14, 14, 272)
