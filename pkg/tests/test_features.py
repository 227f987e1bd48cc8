"""Tests for the frozen encoder, temporal subsampling, PCA and the feature cache."""

from __future__ import annotations

import numpy as np
import pytest

from vidsem.codec import group_anchor_indices
from vidsem.exceptions import ArgumentError, CacheInvalidError, FitError, ShapeError
from vidsem.features import (
    FeatureMap,
    FrozenEncoder,
    RawFeatureMap,
    cache_features,
    encode_frames,
    extract_features,
    fit_pca,
    load_features,
    project,
    reconstruct,
    temporal_subsample,
)


def _raw(values: np.ndarray) -> RawFeatureMap:
    return RawFeatureMap(values=values.reshape(values.shape[0], 1, 1, values.shape[-1]))


@pytest.fixture
def correlated() -> np.ndarray:
    rng = np.random.default_rng(0)
    mixing = rng.normal(size=(6, 6)) * np.array([3.0, 2.0, 1.5, 1.0, 0.5, 0.2])[:, None]
    return rng.normal(size=(4000, 6)) @ mixing + rng.normal(size=6)


def test_encode_single_frame_shape(encoder):
    frames = np.random.default_rng(0).random((1, 16, 16, 3), dtype=np.float32)
    raw = encode_frames(frames, encoder)
    assert raw.values.shape == (1, 4, 4, encoder.config.raw_channels)
    assert np.isfinite(raw.values).all()


def test_encoder_weights_come_from_freeze_seed(tiny_config):
    frames = np.random.default_rng(1).random((2, 16, 16, 3), dtype=np.float32)
    a = encode_frames(frames, FrozenEncoder(tiny_config.encoder))
    b = encode_frames(frames, FrozenEncoder(tiny_config.encoder))
    assert np.array_equal(a.values, b.values)


def test_encoding_is_per_frame(encoder):
    frames = np.random.default_rng(2).random((3, 16, 16, 3), dtype=np.float32)
    out = encode_frames(frames, encoder).values
    permuted = encode_frames(frames[[2, 0, 1]], encoder).values
    assert np.array_equal(permuted, out[[2, 0, 1]])


def test_encoder_stays_frozen(encoder):
    before = encoder.checksum()
    encode_frames(np.random.default_rng(3).random((2, 16, 16, 3), dtype=np.float32), encoder)
    assert encoder.checksum() == before
    assert not any(p.requires_grad for p in encoder.parameters())


def test_encode_rejects_indivisible_frames(encoder):
    with pytest.raises(ShapeError):
        encode_frames(np.zeros((1, 15, 16, 3), dtype=np.float32), encoder)
    with pytest.raises(ShapeError):
        encode_frames(np.zeros((1, 16, 16), dtype=np.float32), encoder)


def test_temporal_subsample():
    frames = np.arange(25)
    assert temporal_subsample(frames, 4).tolist() == [0, 4, 8, 12, 16, 20, 24]
    assert temporal_subsample(frames, 1).tolist() == frames.tolist()
    assert temporal_subsample(np.arange(1), 3).tolist() == [0]
    with pytest.raises(ArgumentError):
        temporal_subsample(frames, 0)


@pytest.mark.parametrize("K,r", [(25, 4), (9, 4), (13, 2), (1, 4)])
def test_subsample_aligns_with_latent_groups(K, r):
    assert temporal_subsample(np.arange(K), r).tolist() == group_anchor_indices(K, r)


def test_fit_pca_orthonormal_and_ordered(correlated):
    pca = fit_pca([_raw(correlated)], 4)
    gram = pca.components.T @ pca.components
    assert np.abs(gram - np.eye(4)).max() < 1e-5
    assert np.all(np.diff(pca.explained_variance) <= 0)
    assert pca.channels == 4 and pca.raw_channels == 6


def test_projecting_the_mean_gives_zero(correlated):
    pca = fit_pca([_raw(correlated)], 3)
    mean = RawFeatureMap(values=pca.mean.reshape(1, 1, 1, -1))
    assert np.abs(project(mean, pca).values).max() < 1e-10


def test_isotropic_data_has_flat_spectrum():
    X = np.random.default_rng(4).normal(size=(100_000, 4))
    pca = fit_pca([_raw(X)], 4)
    assert pca.explained_variance.max() / pca.explained_variance.min() < 1.1


def test_full_rank_projection_is_invertible(correlated):
    pca = fit_pca([_raw(correlated)], 6)
    raw = _raw(correlated[:50])
    back = reconstruct(project(raw, pca), pca)
    assert np.abs(back.values - raw.values).max() < 1e-5


def test_project_zero_input(correlated):
    pca = fit_pca([_raw(correlated)], 3)
    zero = RawFeatureMap(values=np.zeros((1, 1, 1, 6)))
    assert np.allclose(project(zero, pca).values.reshape(-1), -pca.mean @ pca.components)


def test_projection_is_affine(correlated):
    pca = fit_pca([_raw(correlated)], 3)
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(2, 1, 1, 1, 6))
    a, b = 0.7, -1.3

    def p(v):
        return project(RawFeatureMap(values=v), pca).values

    lhs = p(a * x + b * y)
    rhs = a * p(x) + b * p(y) + (1 - a - b) * p(np.zeros_like(x))
    assert np.abs(lhs - rhs).max() < 1e-6


def test_reconstruction_error_shrinks_with_channels(correlated):
    held_out = _raw(correlated[3000:])
    errors = []
    for channels in range(1, 7):
        pca = fit_pca([_raw(correlated[:3000])], channels)
        back = reconstruct(project(held_out, pca), pca)
        errors.append(float(np.mean((back.values - held_out.values) ** 2)))
    assert all(later <= earlier + 1e-12 for earlier, later in zip(errors, errors[1:]))


def test_fit_pca_needs_enough_vectors():
    with pytest.raises(FitError):
        fit_pca([_raw(np.ones((3, 6)))], 2)
    with pytest.raises(FitError):
        fit_pca([], 2)


def test_project_rejects_channel_mismatch(correlated):
    pca = fit_pca([_raw(correlated)], 3)
    with pytest.raises(ShapeError):
        project(RawFeatureMap(values=np.zeros((1, 1, 1, 5))), pca)


def test_truncate_keeps_leading_components(correlated):
    pca = fit_pca([_raw(correlated)], 5)
    short = pca.truncate(2)
    assert np.array_equal(short.components, pca.components[:, :2])
    with pytest.raises(ArgumentError):
        pca.truncate(6)


def test_pca_save_load(correlated, tmp_path):
    pca = fit_pca([_raw(correlated)], 3)
    pca.save(tmp_path / "pca.npz")
    loaded = type(pca).load(tmp_path / "pca.npz")
    assert loaded.fingerprint() == pca.fingerprint()


def test_extract_features_shapes(encoder):
    frames = np.random.default_rng(6).random((9, 16, 16, 3), dtype=np.float32)
    raw = encode_frames(frames, encoder)
    pca = fit_pca([raw], 8)
    fmap = extract_features(frames, encoder, pca, 4)
    assert fmap.values.shape == (3, 4, 4, 8)
    assert fmap.pca_fingerprint == pca.fingerprint()


def test_feature_cache_roundtrip(tmp_path):
    values = np.random.default_rng(7).normal(size=(3, 4, 4, 8)).astype(np.float32)
    fmap = FeatureMap(values=values, pca_fingerprint="abc123")
    cache_features(tmp_path / "f.vsf", fmap)
    loaded = load_features(tmp_path / "f.vsf", "abc123")
    assert loaded.values.dtype == np.float32
    assert np.array_equal(loaded.values, values)


def test_feature_cache_rejects_other_projection(tmp_path):
    cache_features(tmp_path / "f.vsf", FeatureMap(values=np.zeros((1, 2, 2, 4), np.float32),
                                                  pca_fingerprint="abc123"))
    with pytest.raises(CacheInvalidError):
        load_features(tmp_path / "f.vsf", "def456")


def test_empty_feature_map_roundtrips(tmp_path):
    fmap = FeatureMap(values=np.zeros((0, 4, 4, 8), np.float32), pca_fingerprint="abc")
    cache_features(tmp_path / "empty.vsf", fmap)
    assert load_features(tmp_path / "empty.vsf", "abc").values.shape == (0, 4, 4, 8)


def test_feature_cache_rejects_truncated_file(tmp_path):
    path = tmp_path / "f.vsf"
    cache_features(path, FeatureMap(values=np.ones((2, 2, 2, 4), np.float32), pca_fingerprint="a"))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CacheInvalidError):
        load_features(path, "a")
