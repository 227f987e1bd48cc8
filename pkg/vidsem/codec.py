"""
Lossless latent codec: space-to-depth spatial packing with causal temporal grouping.

Latent frame 1 holds frame 1 alone (repeated to fill a group of r); latent frame
j > 1 holds frames (j-2)*r+2 .. (j-1)*r+1. A clip of K frames therefore maps to
1 + (K-1)/r latent frames, each of shape (H/s, W/s, 3*s*s*r).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Tuple

import numpy as np
from einops import rearrange, repeat

from .config import CodecConfig
from .exceptions import FitError, ShapeError
from .utils import sha256_arrays

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6


@dataclass
class LatentTensor:
    values: np.ndarray  # (T_z, H_z, W_z, C_z) float32

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])


def latent_shape(K: int, H: int, W: int, cfg: CodecConfig) -> Tuple[int, int, int, int]:
    s, r = cfg.spatial_factor, cfg.temporal_factor
    if H % s or W % s:
        raise ShapeError(f"frame size {H}x{W} not divisible by spatial factor {s}")
    if K < 1 or (K - 1) % r:
        raise ShapeError(f"K-1={K - 1} not divisible by temporal factor {r}")
    return 1 + (K - 1) // r, H // s, W // s, 3 * s * s * r


def group_anchor_indices(K: int, r: int) -> List[int]:
    """0-based index of the frame that closes each causal group: 0, r, 2r, ..."""
    return list(range(0, K, r))


def group_frame_indices(K: int, r: int) -> List[List[int]]:
    """0-based source frames of every latent frame (the first group is frame 0 repeated)."""
    groups = [[0] * r]
    for j in range(1, 1 + (K - 1) // r):
        groups.append(list(range((j - 1) * r + 1, j * r + 1)))
    return groups


def _norm_arrays(cfg: CodecConfig, channels: int) -> Tuple[np.ndarray, np.ndarray]:
    if cfg.norm_mean is None:
        return np.zeros(channels), np.ones(channels)
    mean = np.asarray(cfg.norm_mean, dtype=np.float64)
    std = np.asarray(cfg.norm_std, dtype=np.float64)
    if mean.shape != (channels,):
        raise ShapeError(f"normalization has {mean.shape[0]} channels, latents have {channels}")
    return mean, std


def pack(frames: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Group and space-to-depth without normalization (float64)."""
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"expected (K, H, W, 3) frames, got {frames.shape}")
    K, H, W, _ = frames.shape
    latent_shape(K, H, W, cfg)
    s, r = cfg.spatial_factor, cfg.temporal_factor
    frames = frames.astype(np.float64)
    first = repeat(frames[:1], "1 h w c -> 1 f h w c", f=r)
    rest = frames[1:].reshape(-1, r, H, W, 3)
    groups = np.concatenate([first, rest], axis=0)
    return rearrange(groups, "g f (h s1) (w s2) c -> g h w (f s1 s2 c)", s1=s, s2=s)


def unpack(packed: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    s, r = cfg.spatial_factor, cfg.temporal_factor
    groups = rearrange(packed, "g h w (f s1 s2 c) -> g f (h s1) (w s2) c", f=r, s1=s, s2=s, c=3)
    first = groups[:1, -1]
    rest = groups[1:].reshape(-1, *groups.shape[2:])
    return np.concatenate([first, rest], axis=0)


def encode(frames: np.ndarray, cfg: CodecConfig) -> LatentTensor:
    packed = pack(frames, cfg)
    mean, std = _norm_arrays(cfg, packed.shape[-1])
    return LatentTensor(values=((packed - mean) / std).astype(np.float32))


def decode(latents: LatentTensor, cfg: CodecConfig) -> np.ndarray:
    """Exact inverse of encode; returns (K, H, W, 3) float32 frames."""
    values = latents.values
    expected = 3 * cfg.spatial_factor ** 2 * cfg.temporal_factor
    if values.ndim != 4 or values.shape[-1] != expected:
        raise ShapeError(f"latents of shape {values.shape} do not match C_z={expected}")
    mean, std = _norm_arrays(cfg, expected)
    packed = values.astype(np.float64) * std + mean
    return unpack(packed, cfg).astype(np.float32)


def fit_normalization(packed_latents: Iterable[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over un-normalized training latents; std floored."""
    arrays = [np.asarray(p, dtype=np.float64) for p in packed_latents]
    if not arrays:
        raise FitError("cannot fit latent normalization on an empty set")
    channels = arrays[0].shape[-1]
    X = np.concatenate([a.reshape(-1, channels) for a in arrays], axis=0)
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_FLOOR)
    return mean, std


def with_normalization(cfg: CodecConfig, mean: np.ndarray, std: np.ndarray) -> CodecConfig:
    return replace(cfg, norm_mean=[float(v) for v in mean], norm_std=[float(v) for v in std])


def codec_fingerprint(cfg: CodecConfig) -> str:
    mean, std = _norm_arrays(cfg, cfg.latent_channels())
    factors = np.asarray([cfg.spatial_factor, cfg.temporal_factor], dtype=np.int64)
    return sha256_arrays(factors, mean, std)
