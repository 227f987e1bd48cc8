"""
Stage 2: noise schedule, preconditioning, training policies, objective and sampler
for the semantics-conditioned latent denoiser.

Latent tensors are (B, T, H_z, W_z, C_z) with the first `context_frames` latent
frames clean; only the remaining future frames are noised, denoised and scored.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm.auto import tqdm

from .config import (
    DenoiserConfig,
    DiffusionConfig,
    GuidanceConfig,
    MixedSupervisionPolicy,
    NestedDropoutPolicy,
    NoiseDistributionConfig,
    SamplerConfig,
    build_section,
)
from .denoiser import SemanticDiT
from .exceptions import ArgumentError, DependencyError, FingerprintMismatchError, NumericalError, ShapeError
from .forecaster import build_optimizer
from .utils import PathLike, torch_generator

logger = logging.getLogger(__name__)

CONTEXT_C_NOISE = 0.001
CHECKPOINT_FORMAT = "vidsem.stage2"
CHECKPOINT_VERSION = 1

Scalar = Union[float, torch.Tensor]


# ---------------------------------------------------------------------------
# Noise levels and preconditioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseLevel:
    sigma: float
    is_context: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ArgumentError(f"sigma={self.sigma} must be > 0")


@dataclass
class PreconditionCoeffs:
    t: Scalar
    c_skip: Scalar
    c_out: Scalar
    c_in: Scalar
    c_noise: Scalar
    lam: Scalar


def _check_positive(sigma: Scalar) -> None:
    if torch.is_tensor(sigma):
        if not bool((sigma > 0).all()):
            raise ArgumentError("every sigma must be > 0")
    elif not sigma > 0:
        raise ArgumentError(f"sigma={sigma} must be > 0")


def precondition(sigma: Scalar, is_context: bool = False,
                 context_c_noise: float = CONTEXT_C_NOISE) -> PreconditionCoeffs:
    """t = sigma/(1+sigma); c_skip = c_in = 1-t; c_out = -t; lambda = (1+sigma)^2/sigma^2."""
    _check_positive(sigma)
    t = sigma / (1 + sigma)
    if is_context:
        c_noise = torch.full_like(sigma, context_c_noise) if torch.is_tensor(sigma) else context_c_noise
    else:
        c_noise = t
    return PreconditionCoeffs(
        t=t, c_skip=1 - t, c_out=-t, c_in=1 - t, c_noise=c_noise,
        lam=(1 + sigma) ** 2 / sigma ** 2,
    )


def noise_level_from_draws(u: torch.Tensor, branch: torch.Tensor, v: torch.Tensor,
                           config: NoiseDistributionConfig) -> torch.Tensor:
    """sigmoid(u) on the main branch; log-uniform on [min, max] where branch < p_high."""
    main = torch.sigmoid(u)
    lo, hi = math.log(config.high_sigma_min), math.log(config.high_sigma_max)
    high = torch.exp(lo + v * (hi - lo))
    return torch.where(branch < config.p_high, high, main)


def sample_noise_level(config: NoiseDistributionConfig, size: int,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Draw `size` training noise levels as a float64 tensor."""
    u = torch.randn(size, generator=generator, dtype=torch.float64)
    branch = torch.rand(size, generator=generator, dtype=torch.float64)
    v = torch.rand(size, generator=generator, dtype=torch.float64)
    return noise_level_from_draws(u, branch, v, config)


def expand_like(x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(B,) -> (B, 1, ..., 1) broadcastable against target."""
    x = torch.as_tensor(x, dtype=target.dtype, device=target.device)
    if x.ndim == 0:
        return x
    return x.reshape(x.shape[0], *([1] * (target.ndim - 1)))


def add_noise(
    z: torch.Tensor, sigma: Scalar,
    generator: Optional[torch.Generator] = None, noise: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """z + sigma * eps. Returns (noised, eps)."""
    _check_positive(sigma)
    if noise is None:
        noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
    elif noise.shape != z.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} vs latents {tuple(z.shape)}")
    return z + expand_like(sigma, z) * noise, noise


# ---------------------------------------------------------------------------
# Robustness policies
# ---------------------------------------------------------------------------

def nested_dropout(h: torch.Tensor, c: int, channel_set: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Keep channels [0, c) of the last axis bit-exactly, zero the rest, on every frame."""
    if channel_set is not None and c not in channel_set:
        raise ArgumentError(f"c={c} is not in the channel set {list(channel_set)}")
    if not 1 <= c <= h.shape[-1]:
        raise ArgumentError(f"c={c} outside [1, {h.shape[-1]}]")
    keep = torch.arange(h.shape[-1], device=h.device) < c
    return torch.where(keep, h, torch.zeros_like(h))


def nested_dropout_batch(h: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    """Per-example nested dropout; counts is (B,), shared across all frames of an example."""
    keep = torch.arange(h.shape[-1], device=h.device) < expand_like(counts, h).long()
    return torch.where(keep, h, torch.zeros_like(h))


def sample_channel_counts(policy: NestedDropoutPolicy, size: int, total_channels: int,
                          generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform draws from the channel set, or C_h for every example when disabled."""
    if not policy.enabled:
        return torch.full((size,), total_channels, dtype=torch.long)
    choices = torch.tensor(policy.channel_set, dtype=torch.long)
    return choices[torch.randint(len(choices), (size,), generator=generator)]


def select_supervision_features(
    gt_features: torch.Tensor,
    predicted_future: Optional[torch.Tensor],
    policy: MixedSupervisionPolicy,
    context_frames: int,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Swap each example's future-frame features for Stage-1 predictions with prob p_predicted.

    Returns the features and the (B,) bool tensor of examples that were swapped.
    """
    B = gt_features.shape[0]
    chosen = torch.rand(B, generator=generator) < policy.p_predicted
    if policy.p_predicted == 0:
        return gt_features, chosen
    if predicted_future is None:
        raise DependencyError("mixed supervision needs cached Stage-1 predictions; "
                              "run rollout-features first")
    if predicted_future.shape != gt_features[:, context_frames:].shape:
        raise ShapeError(f"predicted features {tuple(predicted_future.shape)} do not cover the "
                         f"future frames {tuple(gt_features[:, context_frames:].shape)}")
    future = torch.where(expand_like(chosen, predicted_future).bool(),
                         predicted_future, gt_features[:, context_frames:])
    return torch.cat([gt_features[:, :context_frames], future], dim=1), chosen


# ---------------------------------------------------------------------------
# Denoiser and objective
# ---------------------------------------------------------------------------

def denoise(
    model: SemanticDiT,
    noised_future: torch.Tensor,
    context: torch.Tensor,
    features: torch.Tensor,
    sigma: torch.Tensor,
    context_c_noise: float = CONTEXT_C_NOISE,
) -> torch.Tensor:
    """D(x) = c_skip*x + c_out*F(c_in*x; c_noise) on future frames; context enters clean."""
    sigma = torch.as_tensor(sigma, dtype=noised_future.dtype)
    if sigma.ndim == 0:
        sigma = sigma.expand(noised_future.shape[0])
    B, T_f = noised_future.shape[:2]
    M = context.shape[1]
    coeffs = precondition(sigma)

    x_in = torch.cat([context, expand_like(coeffs.c_in, noised_future) * noised_future], dim=1)
    c_noise = torch.cat([
        torch.full((B, M), context_c_noise, dtype=sigma.dtype),
        coeffs.c_noise[:, None].expand(B, T_f),
    ], dim=1)
    out = model(x_in, features, c_noise)[:, M:]
    return expand_like(coeffs.c_skip, out) * noised_future + expand_like(coeffs.c_out, out) * out


def diffusion_loss(
    model: SemanticDiT,
    latents: torch.Tensor,
    features: torch.Tensor,
    sigma: torch.Tensor,
    context_frames: int,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    target: Optional[torch.Tensor] = None,
    context_c_noise: float = CONTEXT_C_NOISE,
) -> torch.Tensor:
    """mean_b lambda(sigma_b) * MSE over the future-frame elements of example b.

    `target` defaults to `latents`; only its future frames are read.
    """
    sigma = torch.as_tensor(sigma, dtype=latents.dtype)
    context, future = latents[:, :context_frames], latents[:, context_frames:]
    noised, _ = add_noise(future, sigma, generator=generator, noise=noise)
    pred = denoise(model, noised, context, features, sigma, context_c_noise)
    target_future = future if target is None else target[:, context_frames:]
    mse = (pred - target_future).pow(2).flatten(1).mean(dim=1)
    loss = (precondition(sigma).lam * mse).mean()
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite diffusion loss at sigma={sigma.tolist()}")
    return loss


def zero_predictor_loss(latents: torch.Tensor, sigma: torch.Tensor, context_frames: int) -> torch.Tensor:
    """The same weighted objective for the constant prediction z_hat = 0."""
    future = latents[:, context_frames:]
    return (precondition(sigma).lam * future.pow(2).flatten(1).mean(dim=1)).mean()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def karras_sigmas(config: SamplerConfig) -> torch.Tensor:
    """Decreasing grid sigma_max -> sigma_min of num_steps values, followed by 0."""
    n = config.num_steps
    if n == 1:
        grid = torch.tensor([config.sigma_max], dtype=torch.float64)
    else:
        ramp = torch.linspace(0, 1, n, dtype=torch.float64)
        inv_rho = 1.0 / config.rho
        hi, lo = config.sigma_max ** inv_rho, config.sigma_min ** inv_rho
        grid = (hi + ramp * (lo - hi)) ** config.rho
    return torch.cat([grid, torch.zeros(1, dtype=torch.float64)])


def representation_guidance(z_full: torch.Tensor, z_coarse: torch.Tensor, w: float) -> torch.Tensor:
    if z_full.shape != z_coarse.shape:
        raise ShapeError(f"full {tuple(z_full.shape)} vs coarse {tuple(z_coarse.shape)}")
    if w < 0:
        raise ArgumentError(f"guidance weight w={w} must be >= 0")
    return z_full + w * (z_full - z_coarse)


def _guided_denoise(model, x, context, features, coarse_features, sigma, w, context_c_noise):
    if coarse_features is None:
        return denoise(model, x, context, features, sigma, context_c_noise)
    # Both passes in one batch.
    out = denoise(
        model,
        torch.cat([x, x]),
        torch.cat([context, context]),
        torch.cat([features, coarse_features]),
        torch.cat([sigma, sigma]),
        context_c_noise,
    )
    full, coarse = out.chunk(2)
    return representation_guidance(full, coarse, w)


@torch.no_grad()
def sample(
    model: SemanticDiT,
    context: torch.Tensor,
    features: torch.Tensor,
    sampler: SamplerConfig,
    guidance: Optional[GuidanceConfig] = None,
    generator: Optional[torch.Generator] = None,
    inference_channels: Optional[int] = None,
    context_c_noise: float = CONTEXT_C_NOISE,
    quiet: bool = True,
) -> torch.Tensor:
    """Euler sampling of the future latents given clean context latents and all K features."""
    sampler.validate()
    if guidance is not None:
        guidance.validate()
    model.eval()
    B, M = context.shape[:2]
    T_f = features.shape[1] - M
    if T_f < 1:
        raise ShapeError(f"features cover {features.shape[1]} frames, context alone is {M}")
    if generator is None:
        generator = torch_generator(sampler.seed)
    if inference_channels is not None:
        features = nested_dropout(features, inference_channels)

    w = 0.0 if guidance is None else guidance.w
    coarse = nested_dropout(features, guidance.coarse_c) if w > 0 else None

    sigmas = karras_sigmas(sampler)
    shape = (B, T_f, *context.shape[2:])
    x = torch.randn(shape, generator=generator, dtype=context.dtype) * float(sigmas[0])
    for i in tqdm(range(sampler.num_steps), desc="sample", disable=quiet, leave=False):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        sigma = torch.full((B,), s, dtype=context.dtype)
        d = _guided_denoise(model, x, context, features, coarse, sigma, w, context_c_noise)
        if s_next == 0:
            x = d
        else:
            x = x + (s_next - s) * (x - d) / s
    return x


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class Stage2Result:
    model: SemanticDiT
    log: List[dict] = field(default_factory=list)
    loss_ema: Optional[float] = None
    zero_loss_ema: Optional[float] = None


def build_denoiser(config: DenoiserConfig, latent_channels: int, feature_channels: int) -> SemanticDiT:
    torch.manual_seed(config.seed)
    return SemanticDiT(config, latent_channels, feature_channels)


def uses_predictions(config: DiffusionConfig) -> bool:
    """Whether training reads Stage-1 predictions; unconditioned arms never do."""
    return config.conditioning and config.mixed_supervision.p_predicted > 0


def _stack(arrays: Sequence[np.ndarray], idx: List[int]) -> torch.Tensor:
    return torch.from_numpy(np.stack([arrays[i] for i in idx]).astype(np.float32))


def train_diffusion(
    config: DiffusionConfig,
    latents: Sequence[np.ndarray],
    features: Sequence[np.ndarray],
    context_frames: int,
    predicted_future: Optional[Sequence[np.ndarray]] = None,
    arm: str = "full",
    on_log: Optional[Callable[[dict], None]] = None,
    on_eval: Optional[Callable[[int, SemanticDiT], None]] = None,
    eval_every: Optional[int] = None,
    quiet: bool = False,
) -> Stage2Result:
    """Training on (T, H_z, W_z, C_z) latents with (T, H_h, W_h, C_h) features.

    `predicted_future[i]` holds Stage-1 predictions for the future frames of clip i.
    """
    if len(latents) != len(features) or not len(latents):
        raise ShapeError(f"{len(latents)} latent clips vs {len(features)} feature clips")
    if predicted_future is not None and len(predicted_future) != len(latents):
        raise ShapeError("predicted features must cover every training clip")
    if uses_predictions(config) and predicted_future is None:
        raise DependencyError("mixed supervision needs cached Stage-1 predictions; "
                              "run rollout-features first")

    channels = features[0].shape[-1]
    model = build_denoiser(config.denoiser, latents[0].shape[-1], channels)
    optimizer, scheduler = build_optimizer(model, config)
    g = torch_generator(config.seed)
    logger.info(f"Stage 2 [{arm}]: {len(latents)} clips, {config.steps} steps, "
                f"{sum(p.numel() for p in model.parameters()) / 1e6:.2f}M parameters")

    result = Stage2Result(model=model)
    decay = config.loss_ema_decay
    started = time.time()
    for step in tqdm(range(1, config.steps + 1), desc=f"stage2[{arm}]", disable=quiet):
        model.train()
        idx = torch.randint(len(latents), (config.batch_size,), generator=g).tolist()
        z = _stack(latents, idx)
        h = _stack(features, idx)
        sigma = sample_noise_level(config.noise, config.batch_size, g).float()
        counts = sample_channel_counts(config.nested_dropout, config.batch_size, channels, g)
        predicted = None if predicted_future is None else _stack(predicted_future, idx)
        if config.conditioning:
            h, _ = select_supervision_features(h, predicted, config.mixed_supervision,
                                               context_frames, g)
        else:
            h = torch.zeros_like(h)
        h = nested_dropout_batch(h, counts)
        noise = torch.randn(z[:, context_frames:].shape, generator=g)

        loss = diffusion_loss(model, z, h, sigma, context_frames, noise=noise,
                              context_c_noise=config.context_c_noise)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        scheduler.step()

        value = float(loss.item())
        zero = float(zero_predictor_loss(z, sigma, context_frames))
        if result.loss_ema is None:
            result.loss_ema, result.zero_loss_ema = value, zero
        else:
            result.loss_ema = decay * result.loss_ema + (1 - decay) * value
            result.zero_loss_ema = decay * result.zero_loss_ema + (1 - decay) * zero

        if step % config.log_every == 0 or step == config.steps:
            row = {
                "stage": "stage2", "arm": arm, "step": step, "loss": value,
                "loss_ema": result.loss_ema, "zero_loss_ema": result.zero_loss_ema,
                "sigma": [float(s) for s in sigma], "c": counts.tolist(),
                "lr": scheduler.get_last_lr()[0], "wall_time": time.time() - started,
            }
            result.log.append(row)
            if on_log is not None:
                on_log(row)
            logger.debug(f"stage2[{arm}] step {step}: loss {value:.4f} (ema {result.loss_ema:.4f})")
        if on_eval is not None and eval_every and step % eval_every == 0:
            on_eval(step, model)

    logger.info(f"Stage 2 [{arm}] done: loss EMA {result.loss_ema:.4f}, "
                f"zero-predictor EMA {result.zero_loss_ema:.4f}")
    return result


def save_denoiser(path: PathLike, model: SemanticDiT, config: DiffusionConfig,
                  fingerprints: Dict[str, str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "latent_channels": model.latent_channels,
        "feature_channels": model.feature_channels,
        "fingerprints": dict(fingerprints),
        "state_dict": model.state_dict(),
    }, path)


def load_denoiser(path: PathLike, expected: Optional[Dict[str, str]] = None
                  ) -> Tuple[SemanticDiT, DiffusionConfig, Dict[str, str]]:
    """Load a checkpoint; every key in `expected` must match the stored fingerprint."""
    if not Path(path).exists():
        raise DependencyError(f"missing Stage-2 checkpoint {path}; run train-stage2 first")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DependencyError(f"{path} is not a version-{CHECKPOINT_VERSION} Stage-2 checkpoint")
    for key, value in (expected or {}).items():
        if payload["fingerprints"].get(key) != value:
            raise FingerprintMismatchError(f"{path}: {key} fingerprint does not match the current run")
    config = build_section(DiffusionConfig, payload["config"], "stage2")
    model = SemanticDiT(config.denoiser, payload["latent_channels"], payload["feature_channels"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, config, payload["fingerprints"]
