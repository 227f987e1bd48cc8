"""Tests for the lossless latent codec."""

from __future__ import annotations

import numpy as np
import pytest

from vidsem.codec import (
    STD_FLOOR,
    LatentTensor,
    codec_fingerprint,
    decode,
    encode,
    fit_normalization,
    group_anchor_indices,
    group_frame_indices,
    latent_shape,
    pack,
    with_normalization,
)
from vidsem.config import CodecConfig
from vidsem.evalsuite import psnr
from vidsem.exceptions import FitError, ShapeError
from vidsem.synthworld import generate_clip


def _frames(K: int, H: int = 8, W: int = 8, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).random((K, H, W, 3), dtype=np.float32)


def _normalized(cfg: CodecConfig, clips) -> CodecConfig:
    mean, std = fit_normalization(pack(c, cfg) for c in clips)
    return with_normalization(cfg, mean, std)


def test_reference_geometry():
    assert latent_shape(25, 64, 64, CodecConfig()) == (7, 16, 16, 192)


def test_encode_latent_count():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    assert encode(_frames(25), cfg).num_frames == 7
    assert encode(_frames(1), cfg).num_frames == 1


def test_identity_codec():
    cfg = CodecConfig(spatial_factor=1, temporal_factor=1)
    frames = _frames(3)
    assert np.array_equal(encode(frames, cfg).values, frames)


def test_roundtrip_many_clips():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    clips = [_frames(9, seed=s) for s in range(100)]
    cfg = _normalized(cfg, clips[:20])
    worst = max(float(np.abs(decode(encode(c, cfg), cfg) - c).max()) for c in clips)
    assert worst < 1e-6


def test_roundtrip_shape_world_clip(world):
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    frames = generate_clip(world, 0).frames
    cfg = _normalized(cfg, [frames])
    assert psnr(decode(encode(frames, cfg), cfg), frames) > 120.0


def test_zero_latents_decode_to_normalization_mean():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    zeros = LatentTensor(values=np.zeros((3, 4, 4, cfg.latent_channels()), dtype=np.float32))
    assert np.array_equal(decode(zeros, cfg), np.zeros((9, 8, 8, 3), dtype=np.float32))

    cfg = with_normalization(cfg, np.full(cfg.latent_channels(), 0.25), np.ones(cfg.latent_channels()))
    assert np.allclose(decode(zeros, cfg), 0.25)


def test_encode_rejects_indivisible_shapes():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    with pytest.raises(ShapeError):
        encode(_frames(9, H=7), cfg)
    with pytest.raises(ShapeError):
        encode(_frames(8), cfg)


def test_decode_rejects_wrong_channels():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    with pytest.raises(ShapeError):
        decode(LatentTensor(values=np.zeros((3, 4, 4, 5), dtype=np.float32)), cfg)


def test_grouping_is_causal():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    frames = _frames(9)
    changed = frames.copy()
    changed[5] += 0.5
    a, b = encode(frames, cfg).values, encode(changed, cfg).values
    # frame 6 (1-based) first enters latent frame 3
    assert np.array_equal(a[:2], b[:2])
    assert not np.array_equal(a[2], b[2])


def test_group_indices():
    assert group_frame_indices(9, 4) == [[0, 0, 0, 0], [1, 2, 3, 4], [5, 6, 7, 8]]
    assert [g[-1] for g in group_frame_indices(9, 4)] == group_anchor_indices(9, 4)


def test_first_latent_frame_repeats_frame_one():
    cfg = CodecConfig(spatial_factor=1, temporal_factor=4)
    frames = _frames(5)
    first = encode(frames, cfg).values[0].reshape(8, 8, 4, 3)
    for f in range(4):
        assert np.array_equal(first[:, :, f], frames[0])


def test_fit_normalization_statistics():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    clips = [_frames(9, seed=s) for s in range(8)]
    cfg = _normalized(cfg, clips)
    latents = np.concatenate([encode(c, cfg).values.reshape(-1, cfg.latent_channels()) for c in clips])
    assert np.abs(latents.mean(axis=0)).max() < 1e-3
    assert np.abs(latents.std(axis=0) - 1.0).max() < 1e-2


def test_constant_channel_is_floored():
    packed = np.ones((4, 2, 2, 3))
    packed[..., 1] = np.arange(16).reshape(4, 2, 2)
    mean, std = fit_normalization([packed])
    assert std[0] == STD_FLOOR and std[2] == STD_FLOOR
    assert mean[0] == 1.0


def test_normalization_is_affine():
    packed = np.random.default_rng(1).normal(size=(5, 2, 2, 4))
    mean, std = fit_normalization([packed])
    mean2, std2 = fit_normalization([3.0 * packed + 2.0])
    assert np.allclose(mean2, 3.0 * mean + 2.0)
    assert np.allclose(std2, 3.0 * std)


def test_fit_normalization_rejects_empty_set():
    with pytest.raises(FitError):
        fit_normalization([])


def test_fingerprint_tracks_normalization():
    cfg = CodecConfig(spatial_factor=2, temporal_factor=4)
    other = with_normalization(cfg, np.full(cfg.latent_channels(), 0.1), np.ones(cfg.latent_channels()))
    assert codec_fingerprint(cfg) == codec_fingerprint(CodecConfig(spatial_factor=2, temporal_factor=4))
    assert codec_fingerprint(cfg) != codec_fingerprint(other)
