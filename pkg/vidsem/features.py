"""
Frozen semantic features.

A fixed, randomly initialised convolutional patch encoder stands in for the
vision foundation model. Outputs of several depths are concatenated per patch
and projected by PCA into a variance-ordered channel space; the leading
channels carry the coarse semantics that nested dropout keeps.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import FrozenEncoderConfig
from .exceptions import ArgumentError, CacheInvalidError, FitError, ShapeError
from .utils import PathLike, atomic_write_bytes, sha256_arrays, sha256_state_dict

logger = logging.getLogger(__name__)


FEATURE_MAGIC = b"VSFT"
FEATURE_VERSION = 1


class FrozenEncoder(nn.Module):
    """Patch stem followed by residual 3x3 conv layers; weights drawn once from freeze_seed."""

    def __init__(self, config: FrozenEncoderConfig):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(config.freeze_seed)
        p, c = config.patch_size, config.width

        def _weight(*shape: int) -> nn.Parameter:
            fan_in = int(np.prod(shape[1:]))
            w = torch.randn(*shape, generator=g, dtype=torch.float32) * (2.0 / fan_in) ** 0.5
            return nn.Parameter(w, requires_grad=False)

        self.stem_weight = _weight(c, 3, p, p)
        self.stem_bias = nn.Parameter(torch.randn(c, generator=g) * 0.1, requires_grad=False)
        self.layer_weights = nn.ParameterList([_weight(c, c, 3, 3) for _ in range(config.depth)])
        self.eval()

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, width * len(tap_layers), H/p, W/p)."""
        x = F.conv2d(frames * 2.0 - 1.0, self.stem_weight, self.stem_bias, stride=self.config.patch_size)
        taps: List[torch.Tensor] = []
        for depth, weight in enumerate(self.layer_weights, start=1):
            x = x + 0.5 * F.gelu(F.conv2d(x, weight, padding=1))
            x = x / x.pow(2).mean(dim=1, keepdim=True).add(1e-6).sqrt()
            if depth in self.config.tap_layers:
                taps.append(x)
        return torch.cat(taps, dim=1)

    def checksum(self) -> str:
        return sha256_state_dict(self.state_dict())


@dataclass
class RawFeatureMap:
    values: np.ndarray  # (T, H_h, W_h, C_raw)


@dataclass
class FeatureMap:
    values: np.ndarray  # (T, H_h, W_h, C_h), channels in descending variance order
    pca_fingerprint: str = ""

    @property
    def channels(self) -> int:
        return int(self.values.shape[-1])


@torch.no_grad()
def encode_frames(frames: np.ndarray, encoder: FrozenEncoder) -> RawFeatureMap:
    """Encode (T, H, W, 3) frames one at a time; no information crosses frames."""
    cfg = encoder.config
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"expected (T, H, W, 3) frames, got {frames.shape}")
    T, H, W, _ = frames.shape
    if H % cfg.patch_size or W % cfg.patch_size:
        raise ShapeError(f"frame size {H}x{W} not divisible by patch_size={cfg.patch_size}")
    out = np.empty((T, H // cfg.patch_size, W // cfg.patch_size, cfg.raw_channels), dtype=np.float32)
    for t in range(T):
        x = torch.from_numpy(np.ascontiguousarray(frames[t], dtype=np.float32))
        x = rearrange(x, "h w c -> 1 c h w")
        out[t] = rearrange(encoder(x), "1 c h w -> h w c").numpy()
    return RawFeatureMap(values=out)


def temporal_subsample(frames: np.ndarray, r: int) -> np.ndarray:
    """Keep frames 1, 1+r, 1+2r, ... (1-based): one per causal latent group."""
    if r < 1:
        raise ArgumentError(f"temporal factor r={r} must be >= 1")
    return frames[::r]


@dataclass
class PCAProjection:
    mean: np.ndarray  # (C_raw,)
    components: np.ndarray  # (C_raw, C_h), orthonormal columns
    explained_variance: np.ndarray  # (C_h,), non-increasing

    @property
    def channels(self) -> int:
        return int(self.components.shape[1])

    @property
    def raw_channels(self) -> int:
        return int(self.components.shape[0])

    def fingerprint(self) -> str:
        return sha256_arrays(self.mean, self.components, self.explained_variance)

    def truncate(self, channels: int) -> "PCAProjection":
        if not 1 <= channels <= self.channels:
            raise ArgumentError(f"cannot truncate {self.channels} components to {channels}")
        return PCAProjection(
            mean=self.mean,
            components=self.components[:, :channels],
            explained_variance=self.explained_variance[:channels],
        )

    def save(self, path: PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, mean=self.mean, components=self.components,
                     explained_variance=self.explained_variance)

    @classmethod
    def load(cls, path: PathLike) -> "PCAProjection":
        with np.load(path) as data:
            return cls(mean=data["mean"], components=data["components"],
                       explained_variance=data["explained_variance"])


def fit_pca(raw_maps: Iterable[RawFeatureMap], channels: int) -> PCAProjection:
    """Top-`channels` eigenvectors of the patch-vector covariance, variance descending."""
    maps = [m.values for m in raw_maps]
    if not maps:
        raise FitError("no feature maps to fit PCA on")
    c_raw = maps[0].shape[-1]
    X = np.concatenate([m.reshape(-1, c_raw) for m in maps], axis=0).astype(np.float64)
    if X.shape[0] < c_raw:
        raise FitError(f"PCA needs at least {c_raw} patch vectors, got {X.shape[0]}")
    if not 1 <= channels <= c_raw:
        raise FitError(f"cannot keep {channels} of {c_raw} channels")

    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / X.shape[0]
    eigvals, eigvecs = scipy.linalg.eigh(cov)

    # Fix each eigenvector's sign by its dominant axis; equal eigenvalues are
    # ordered by that axis index so the fit is reproducible.
    dominant = np.argmax(np.abs(eigvecs), axis=0)
    signs = np.sign(eigvecs[dominant, np.arange(c_raw)])
    signs[signs == 0] = 1.0
    eigvecs = eigvecs * signs
    order = np.lexsort((dominant, -eigvals))[:channels]

    logger.info(f"PCA over {X.shape[0]} patch vectors: kept {channels}/{c_raw} channels, "
                f"{eigvals[order].sum() / max(eigvals.sum(), 1e-12):.1%} of variance")
    return PCAProjection(
        mean=mean,
        components=np.ascontiguousarray(eigvecs[:, order]),
        explained_variance=np.clip(eigvals[order], 0.0, None),
    )


def project(raw: RawFeatureMap, pca: PCAProjection) -> FeatureMap:
    """(raw - mean) @ components per patch vector; the output keeps the input dtype."""
    if raw.values.shape[-1] != pca.raw_channels:
        raise ShapeError(f"raw features have {raw.values.shape[-1]} channels, "
                         f"PCA expects {pca.raw_channels}")
    values = (raw.values.astype(np.float64) - pca.mean) @ pca.components
    return FeatureMap(values=values.astype(raw.values.dtype), pca_fingerprint=pca.fingerprint())


def reconstruct(features: FeatureMap, pca: PCAProjection) -> RawFeatureMap:
    if features.values.shape[-1] != pca.channels:
        raise ShapeError(f"features have {features.values.shape[-1]} channels, "
                         f"PCA has {pca.channels}")
    values = features.values.astype(np.float64) @ pca.components.T + pca.mean
    return RawFeatureMap(values=values.astype(features.values.dtype))


def extract_features(
    frames: np.ndarray, encoder: FrozenEncoder, pca: PCAProjection, r: int,
) -> FeatureMap:
    """Subsample to one frame per latent group, encode, project."""
    return project(encode_frames(temporal_subsample(frames, r), encoder), pca)


_FEATURE_PREFIX = struct.Struct("<4sHI")


def cache_features(path: PathLike, features: FeatureMap) -> None:
    """Write a feature map as header + little-endian float32 payload, atomically."""
    values = np.ascontiguousarray(features.values, dtype="<f4")
    header = json.dumps({
        "shape": list(values.shape),
        "float32": True,
        "pca_fingerprint": features.pca_fingerprint,
    }, sort_keys=True).encode("utf-8")
    prefix = _FEATURE_PREFIX.pack(FEATURE_MAGIC, FEATURE_VERSION, len(header))
    atomic_write_bytes(path, prefix + header + values.tobytes())


def load_features(path: PathLike, expected_fingerprint: str) -> FeatureMap:
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < _FEATURE_PREFIX.size:
        raise CacheInvalidError(f"{path}: truncated feature cache")
    magic, version, header_len = _FEATURE_PREFIX.unpack_from(payload)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise CacheInvalidError(f"{path}: not a version-{FEATURE_VERSION} feature cache")
    start = _FEATURE_PREFIX.size
    header = json.loads(payload[start:start + header_len].decode("utf-8"))
    if header["pca_fingerprint"] != expected_fingerprint:
        raise CacheInvalidError(
            f"{path}: cached with PCA {header['pca_fingerprint'][:12]}, "
            f"expected {expected_fingerprint[:12]}; rerun fit-pca"
        )
    shape = tuple(header["shape"])
    body = payload[start + header_len:]
    if len(body) != int(np.prod(shape)) * 4:
        raise CacheInvalidError(f"{path}: payload length does not match shape {shape}")
    values = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
    return FeatureMap(values=values, pca_fingerprint=header["pca_fingerprint"])
