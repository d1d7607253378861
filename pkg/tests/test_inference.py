"""Prompt-pool construction, prompt selection, and scoring tests."""

import numpy as np
import pytest

from promptad import tensor as T
from promptad.errors import ConfigError
from promptad.features import BackboneSpec, extract_features, pool_feature
from promptad.inference import (PromptPool, PromptPoolEntry, build_prompt_pool,
                                reconstruction_score_map, score, select_prompt)
from promptad.trainer import LoadedDataset, scan_dataset

TINY_BACKBONE = BackboneSpec(stage_channels=(2, 2, 2, 2), fusion_size=(4, 4), seed=0)


@pytest.fixture(scope="module")
def pool(toy_corpus):
    return build_prompt_pool(scan_dataset(toy_corpus), TINY_BACKBONE, seed=0)


class StubModel:
    """Replays fixed forward outputs; records call count."""

    def __init__(self, image_hw, fhat=None, mhat=None, copy_input=False):
        self.image_hw = image_hw
        self.fhat = fhat
        self.mhat = mhat
        self.copy_input = copy_input
        self.calls = 0

    def forward(self, target, prompt, training=False, rng=None):
        self.calls += 1
        assert not training
        fhat = np.asarray(target, dtype=np.float32) if self.copy_input else self.fhat
        fhat_t = T.Tensor(fhat[None] if fhat.ndim == 3 else fhat)
        mhat_t = None if self.mhat is None else T.Tensor(self.mhat[None])
        return fhat_t, mhat_t


class TestPromptPool:
    def test_one_entry_per_class(self, pool):
        assert [e.class_id for e in pool.entries] == ["blobs", "grid", "stripes"]

    def test_rebuild_is_identical(self, toy_corpus, pool):
        again = build_prompt_pool(scan_dataset(toy_corpus), TINY_BACKBONE, seed=0)
        for a, b in zip(pool.entries, again.entries):
            assert a.class_id == b.class_id
            assert np.array_equal(a.features, b.features)

    def test_different_seed_may_pick_other_prompt(self, toy_corpus, pool):
        other = build_prompt_pool(scan_dataset(toy_corpus), TINY_BACKBONE, seed=99)
        assert [e.class_id for e in other.entries] == [e.class_id for e in pool.entries]

    def test_pooled_matches_pool_feature(self, pool):
        for e in pool.entries:
            assert np.allclose(e.pooled, pool_feature(e.features))


class TestSelectPrompt:
    def test_self_similarity_selects_own_class(self, pool):
        for e in pool.entries:
            assert select_prompt(e.features, pool).class_id == e.class_id

    def test_scale_invariance(self, pool, rng):
        f = np.abs(rng.normal(size=pool.entries[0].features.shape)).astype(np.float32)
        base = select_prompt(f, pool).class_id
        for k in (0.01, 3.0, 250.0):
            assert select_prompt(k * f, pool).class_id == base

    def test_orthogonal_pool_brute_force(self, rng):
        entries = []
        eye = np.eye(3, dtype=np.float32)
        for i, cls in enumerate("abc"):
            feats = np.tile(eye[i], (2, 2, 1))
            entries.append(PromptPoolEntry(cls, feats, pool_feature(feats)))
        pool3 = PromptPool(entries, TINY_BACKBONE)
        for _ in range(50):
            v = rng.random(3).astype(np.float32) + 0.01
            feats = np.tile(v, (2, 2, 1))
            best = max(entries, key=lambda e: (v @ e.pooled) /
                       (np.linalg.norm(v) * np.linalg.norm(e.pooled)))
            assert select_prompt(feats, pool3).class_id == best.class_id

    def test_zero_norm_falls_back_with_warning(self, pool):
        zero = np.zeros_like(pool.entries[0].features)
        with pytest.warns(UserWarning, match="zero"):
            entry = select_prompt(zero, pool)
        assert entry.class_id == pool.entries[0].class_id


class TestScore:
    def _image(self, rng):
        return rng.random((32, 32, 3)).astype(np.float32)

    def test_alpha_endpoints(self, pool, rng):
        img = self._image(rng)
        f = extract_features(img, TINY_BACKBONE)
        fhat = rng.normal(size=f.shape).astype(np.float32)
        mhat = rng.random((32, 32)).astype(np.float32)
        stub = StubModel((32, 32), fhat=fhat, mhat=mhat)
        sm0 = score(img, pool, stub, alpha=0.0)
        sm1 = score(img, pool, stub, alpha=1.0)
        s_rec = reconstruction_score_map(f, fhat)
        resized = T.bilinear_resize(T.Tensor(s_rec[:, :, None]), 32, 32).data[:, :, 0]
        assert np.array_equal(sm0.s, resized)
        assert np.array_equal(sm1.s, mhat)

    def test_perfect_reconstruction_scores_by_refiner_only(self, pool, rng):
        img = self._image(rng)
        mhat = rng.random((32, 32)).astype(np.float32)
        stub = StubModel((32, 32), mhat=mhat, copy_input=True)
        sm = score(img, pool, stub, alpha=0.5)
        assert np.allclose(sm.s_rec, 0.0)
        assert abs(sm.image_score - 0.5 * mhat.max()) < 1e-6

    def test_one_forward_call_per_image(self, pool, rng):
        stub = StubModel((32, 32), mhat=np.zeros((32, 32), np.float32), copy_input=True)
        score(self._image(rng), pool, stub, alpha=0.5)
        assert stub.calls == 1

    def test_refinerless_model_scores_by_reconstruction(self, pool, rng):
        img = self._image(rng)
        f = extract_features(img, TINY_BACKBONE)
        fhat = rng.normal(size=f.shape).astype(np.float32)
        stub = StubModel((32, 32), fhat=fhat, mhat=None)
        sm = score(img, pool, stub, alpha=0.7)
        assert sm.alpha == 0.0
        assert np.allclose(sm.mhat, 0.0)
        assert sm.image_score == sm.s.max()

    def test_s_within_component_hull(self, pool, rng):
        img = self._image(rng)
        f = extract_features(img, TINY_BACKBONE)
        fhat = rng.normal(size=f.shape).astype(np.float32)
        mhat = rng.random((32, 32)).astype(np.float32)
        stub = StubModel((32, 32), fhat=fhat, mhat=mhat)
        sm = score(img, pool, stub, alpha=0.3)
        s_rec = reconstruction_score_map(f, fhat)
        resized = T.bilinear_resize(T.Tensor(s_rec[:, :, None]), 32, 32).data[:, :, 0]
        lo = np.minimum(resized, mhat)
        hi = np.maximum(resized, mhat)
        assert np.all(sm.s >= lo - 1e-6) and np.all(sm.s <= hi + 1e-6)
        assert np.all(sm.s_rec >= 0.0)

    def test_bad_alpha_rejected(self, pool, rng):
        stub = StubModel((32, 32), copy_input=True, mhat=np.zeros((32, 32), np.float32))
        with pytest.raises(ConfigError):
            score(self._image(rng), pool, stub, alpha=1.5)

    def test_size_mismatch_rejected(self, pool, rng):
        stub = StubModel((64, 64), copy_input=True)
        with pytest.raises(ConfigError):
            score(self._image(rng), pool, stub)

    def test_smoothing_flag_changes_map(self, pool, rng):
        img = self._image(rng)
        f = extract_features(img, TINY_BACKBONE)
        fhat = rng.normal(size=f.shape).astype(np.float32)
        stub = StubModel((32, 32), fhat=fhat, mhat=rng.random((32, 32)).astype(np.float32))
        plain = score(img, pool, stub, alpha=0.5)
        smooth = score(img, pool, stub, alpha=0.5, smooth_sigma=2.0)
        assert not np.array_equal(plain.s, smooth.s)

    def test_deterministic_with_real_model(self, pool, rng):
        from promptad.model import ModelConfig, ReconstructionModel
        model = ReconstructionModel(
            ModelConfig(model_dim=8, num_encoder_layers=1, num_decoder_layers=1,
                        num_heads=1, mlp_hidden=16, dropout=0.0, refiner_channels=4),
            grid=(4, 4), image_hw=(32, 32), seed=0)
        img = self._image(rng)
        a = score(img, pool, model, alpha=0.5)
        b = score(img, pool, model, alpha=0.5)
        assert np.array_equal(a.s, b.s)
        assert a.image_score == b.image_score
        assert a.class_selected == b.class_selected
