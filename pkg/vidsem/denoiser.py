"""
Stage-2 network: a diffusion transformer over fused latent + feature tokens.

Latents are 2x2-patchified and embedded; features are resized to the same patch
grid and embedded; the two are summed so conditioning adds no tokens. Blocks use
3D-factorized rotary embeddings and AdaLN-LoRA noise conditioning.
"""

from __future__ import annotations

import logging
import math
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import DenoiserConfig
from .exceptions import NumericalError, ShapeError

logger = logging.getLogger(__name__)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of arbitrary-shaped (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class NoiseEmbedder(nn.Module):
    """c_noise (B, T) -> (B, T, d). c_noise lives in (0, 1), so it is scaled by 1000 first."""

    def __init__(self, model_dim: int, frequency_dim: int):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(
            nn.Linear(frequency_dim, model_dim),
            nn.SiLU(),
            nn.Linear(model_dim, model_dim),
        )

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(c_noise * 1000.0, self.frequency_dim))


def rope_angles(
    grid: Tuple[int, int, int], split: Tuple[int, int, int], theta: float,
    device=None, dtype=torch.float32,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (T*H*W, head_dim/2) for a (t, h, w) token grid."""
    per_axis = []
    for size, dim in zip(grid, split):
        freqs = theta ** (-torch.arange(0, dim, 2, dtype=torch.float64, device=device) / dim)
        per_axis.append(torch.arange(size, dtype=torch.float64, device=device)[:, None] * freqs)
    t_ang, h_ang, w_ang = per_axis
    T, H, W = grid
    angles = torch.cat([
        t_ang[:, None, None].expand(T, H, W, -1),
        h_ang[None, :, None].expand(T, H, W, -1),
        w_ang[None, None, :].expand(T, H, W, -1),
    ], dim=-1).reshape(T * H * W, -1)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent channel pairs of x (B, heads, L, head_dim)."""
    pairs = rearrange(x, "... (d two) -> ... d two", two=2)
    x1, x2 = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return rearrange(rotated, "... d two -> ... (d two)")


class Attention(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        d = config.model_dim
        self.heads = config.heads
        self.qkv = nn.Linear(d, 3 * d)
        self.q_norm = nn.RMSNorm(config.head_dim, eps=1e-6) if config.qk_norm else nn.Identity()
        self.k_norm = nn.RMSNorm(config.head_dim, eps=1e-6) if config.qk_norm else nn.Identity()
        self.proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, rope: Tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), "b l (three h d) -> three b h l d", three=3, h=self.heads)
        q = apply_rope(self.q_norm(q), *rope)
        k = apply_rope(self.k_norm(k), *rope)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(rearrange(out, "b h l d -> b l (h d)"))


class DiTBlock(nn.Module):
    """Pre-norm attention + MLP, modulated per frame by AdaLN-LoRA."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        d = config.model_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(config)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        hidden = int(d * config.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, d))
        self.adaln_lora = nn.Sequential(
            nn.SiLU(),
            nn.Linear(d, config.adaln_lora_rank, bias=False),
            nn.Linear(config.adaln_lora_rank, 6 * d, bias=False),
        )
        nn.init.zeros_(self.adaln_lora[-1].weight)

    def forward(self, x: torch.Tensor, emb: torch.Tensor, base: torch.Tensor,
                rope: Tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
        # x: (B, T, N, d); emb, base: (B, T, d) / (B, T, 6d)
        B, T, N, _ = x.shape
        mod = (base + self.adaln_lora(emb))[:, :, None]
        shift1, scale1, gate1, shift2, scale2, gate2 = mod.chunk(6, dim=-1)
        h = modulate(self.norm1(x), shift1, scale1).reshape(B, T * N, -1)
        x = x + gate1 * self.attn(h, rope).reshape(B, T, N, -1)
        x = x + gate2 * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class FinalLayer(nn.Module):
    def __init__(self, model_dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(model_dim, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(model_dim, 2 * model_dim))
        self.linear = nn.Linear(model_dim, out_dim)
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(emb)[:, :, None].chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class SemanticDiT(nn.Module):
    """F(c_in * x; c_noise) with features fused into the tokens by summation."""

    def __init__(self, config: DenoiserConfig, latent_channels: int, feature_channels: int):
        super().__init__()
        self.config = config
        self.latent_channels = latent_channels
        self.feature_channels = feature_channels
        d, p = config.model_dim, config.patch

        self.latent_embed = nn.Linear(p * p * latent_channels, d)
        self.feature_embed = nn.Linear(feature_channels, d)
        self.noise_embed = NoiseEmbedder(d, config.frequency_dim)
        # Shared AdaLN base; each block adds its own low-rank correction.
        self.adaln_base = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.adaln_base[-1].weight)
        nn.init.zeros_(self.adaln_base[-1].bias)
        self.blocks = nn.ModuleList([DiTBlock(config) for _ in range(config.layers)])
        self.final = FinalLayer(d, p * p * latent_channels)

    def fuse_inputs(self, latents: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        """(B, T, H_z, W_z, C_z) + (B, T, H_h, W_h, C_h) -> (B, T, H_z/2, W_z/2, d)."""
        if latents.ndim != 5 or features.ndim != 5:
            raise ShapeError(f"expected 5-d latents and features, got {tuple(latents.shape)} "
                             f"and {tuple(features.shape)}")
        if latents.shape[:2] != features.shape[:2]:
            raise ShapeError(f"latents cover {latents.shape[1]} frames, features {features.shape[1]}")
        if latents.shape[-1] != self.latent_channels or features.shape[-1] != self.feature_channels:
            raise ShapeError(f"channels {latents.shape[-1]}/{features.shape[-1]}, model expects "
                             f"{self.latent_channels}/{self.feature_channels}")
        p = self.config.patch
        B, T, H, W, _ = latents.shape
        if H % p or W % p:
            raise ShapeError(f"latent grid {H}x{W} not divisible by patch {p}")

        tokens = self.latent_embed(
            rearrange(latents, "b t (h p1) (w p2) c -> b t h w (p1 p2 c)", p1=p, p2=p)
        )
        resized = F.interpolate(
            rearrange(features, "b t h w c -> (b t) c h w"),
            size=(H // p, W // p), mode="bilinear", align_corners=False,
        )
        resized = rearrange(resized, "(b t) c h w -> b t h w c", b=B)
        return tokens + self.feature_embed(resized)

    def forward(self, x: torch.Tensor, features: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        """x: preconditioned latents (B, T, H_z, W_z, C_z); c_noise: (B, T)."""
        p = self.config.patch
        tokens = self.fuse_inputs(x, features)
        B, T, Hp, Wp, _ = tokens.shape
        rope = rope_angles((T, Hp, Wp), self.config.rope_split(), self.config.rope_theta,
                           device=x.device, dtype=x.dtype)

        emb = self.noise_embed(c_noise.to(x.dtype))
        base = self.adaln_base(emb)
        h = tokens.reshape(B, T, Hp * Wp, -1)
        for i, block in enumerate(self.blocks):
            h = block(h, emb, base, rope)
            if not torch.isfinite(h).all():
                raise NumericalError(f"non-finite activations after denoiser block {i}")

        out = self.final(h, emb).reshape(B, T, Hp, Wp, -1)
        return rearrange(out, "b t h w (p1 p2 c) -> b t (h p1) (w p2) c", p1=p, p2=p)

    def num_tokens(self, frames: int, grid: Tuple[int, int]) -> int:
        p = self.config.patch
        return frames * (grid[0] // p) * (grid[1] // p)
