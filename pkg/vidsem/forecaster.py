"""
Stage 1: masked feature transformer.

The model sees N_c context feature frames plus one fully masked frame and
regresses the masked frame's features under Smooth L1. At inference it rolls
out autoregressively over a sliding window of the most recent N_c frames.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from tqdm.auto import tqdm

from .config import ForecasterConfig
from .exceptions import ArgumentError, DependencyError, FingerprintMismatchError, NumericalError, ShapeError
from .utils import PathLike, lr_lambda, torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vidsem.stage1"
CHECKPOINT_VERSION = 1


class FeatureForecaster(nn.Module):
    """Transformer over (frame, row, col) tokens; the last frame slot is a shared mask embedding."""

    def __init__(self, config: ForecasterConfig, channels: int, grid: Tuple[int, int]):
        super().__init__()
        self.config = config
        self.channels = channels
        self.grid = tuple(grid)
        d = config.model_dim
        frames = config.context_frames + config.predicted_frames

        self.embed = nn.Linear(channels, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.frame_pos = nn.Parameter(torch.zeros(frames, d))
        self.row_pos = nn.Parameter(torch.zeros(grid[0], d))
        self.col_pos = nn.Parameter(torch.zeros(grid[1], d))
        for p in (self.mask_token, self.frame_pos, self.row_pos, self.col_pos):
            nn.init.normal_(p, std=0.02)

        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=config.heads,
            dim_feedforward=int(d * config.mlp_ratio),
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=config.layers, norm=nn.LayerNorm(d), enable_nested_tensor=False,
        )
        self.head = nn.Linear(d, channels)

    @property
    def window(self) -> int:
        return self.config.context_frames + self.config.predicted_frames

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        """(B, N_c+1, H_h, W_h, C_h) -> predicted last frame (B, H_h, W_h, C_h).

        The last frame's content is never read; its tokens are the mask embedding.
        """
        if window.ndim != 5 or window.shape[1] != self.window:
            raise ShapeError(f"expected (B, {self.window}, H, W, C) window, got {tuple(window.shape)}")
        B, _, H, W, C = window.shape
        if (H, W) != self.grid or C != self.channels:
            raise ShapeError(f"window frames are {H}x{W}x{C}, model expects "
                             f"{self.grid[0]}x{self.grid[1]}x{self.channels}")

        context = self.embed(window[:, :-1])
        masked = self.mask_token.expand(B, 1, H, W, -1)
        x = torch.cat([context, masked], dim=1)
        x = (x
             + self.frame_pos[None, :, None, None]
             + self.row_pos[None, None, :, None]
             + self.col_pos[None, None, None, :])
        x = rearrange(x, "b t h w d -> b (t h w) d")
        x = self.transformer(x)
        target = rearrange(x, "b (t h w) d -> b t h w d", h=H, w=W)[:, -1]
        return self.head(target)

    def predict_next(self, context: torch.Tensor) -> torch.Tensor:
        """(B, N_c, H, W, C) context -> next frame."""
        if context.ndim != 5 or context.shape[1] != self.config.context_frames:
            raise ShapeError(f"expected {self.config.context_frames} context frames, "
                             f"got {tuple(context.shape)}")
        slot = torch.zeros_like(context[:, :1])
        return self(torch.cat([context, slot], dim=1))


@dataclass
class ForecastBatch:
    """N_c temporally ordered context frames and the frame after them, all from one clip."""

    context: torch.Tensor  # (B, N_c, H_h, W_h, C_h)
    target: torch.Tensor  # (B, H_h, W_h, C_h)

    @classmethod
    def from_window(cls, window: torch.Tensor) -> "ForecastBatch":
        return cls(context=window[:, :-1], target=window[:, -1])

    @property
    def size(self) -> int:
        return int(self.context.shape[0])


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """0.5*d^2/beta where |d| < beta, else |d| - 0.5*beta; mean over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if beta <= 0:
        raise ArgumentError(f"beta={beta} must be > 0")
    return F.smooth_l1_loss(pred, target, beta=beta, reduction="mean")


def build_optimizer(model: nn.Module, config) -> Tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LambdaLR]:
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=tuple(config.adam_betas),
        weight_decay=config.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda(config.warmup_steps, config.steps, config.lr_schedule),
    )
    return optimizer, scheduler


def train_step(
    model: FeatureForecaster,
    optimizer: torch.optim.Optimizer,
    batch: ForecastBatch,
    beta: float,
    scheduler: Optional[torch.optim.lr_scheduler.LRScheduler] = None,
) -> float:
    """One update on ground-truth windows; the loss only covers the masked frame."""
    model.train()
    pred = model.predict_next(batch.context)
    loss = smooth_l1(pred, batch.target, beta)
    if not torch.isfinite(loss):
        raise NumericalError(f"stage-1 loss is {loss.item()}; aborting")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return float(loss.item())


class WindowSampler:
    """Draws (clip, offset) windows uniformly over every valid offset."""

    def __init__(self, features: Sequence[np.ndarray], window: int, seed: int):
        self.features = [torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32)) for f in features]
        self.window = window
        self.index = [
            (c, o) for c, f in enumerate(self.features) for o in range(f.shape[0] - window + 1)
        ]
        if not self.index:
            raise DependencyError(f"no clip has {window} feature frames to train on")
        self.generator = torch_generator(seed)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, size: int) -> ForecastBatch:
        picks = torch.randint(len(self.index), (size,), generator=self.generator).tolist()
        return ForecastBatch.from_window(torch.stack([self._window(i) for i in picks]))

    def all_windows(self) -> torch.Tensor:
        return torch.stack([self._window(i) for i in range(len(self.index))])

    def _window(self, i: int) -> torch.Tensor:
        clip, offset = self.index[i]
        return self.features[clip][offset:offset + self.window]


@torch.no_grad()
def evaluate_windows(model: FeatureForecaster, windows: torch.Tensor, beta: float,
                     batch_size: int = 32) -> Tuple[float, float]:
    """Masked-frame loss and copy-last-frame baseline loss, averaged over windows."""
    model.eval()
    model_sum = copy_sum = 0.0
    for start in range(0, windows.shape[0], batch_size):
        chunk = windows[start:start + batch_size]
        n = chunk.shape[0]
        model_sum += smooth_l1(model(chunk), chunk[:, -1], beta).item() * n
        copy_sum += smooth_l1(chunk[:, -2], chunk[:, -1], beta).item() * n
    total = max(1, windows.shape[0])
    return model_sum / total, copy_sum / total


@dataclass
class Stage1Result:
    model: FeatureForecaster
    log: List[dict] = field(default_factory=list)
    val_loss: Optional[float] = None
    val_copy_loss: Optional[float] = None


def train_forecaster(
    config: ForecasterConfig,
    train_features: Sequence[np.ndarray],
    val_features: Sequence[np.ndarray] = (),
    on_log: Optional[Callable[[dict], None]] = None,
    quiet: bool = False,
) -> Stage1Result:
    """Train on sliding windows of per-clip feature sequences (T, H_h, W_h, C_h)."""
    first = train_features[0]
    torch.manual_seed(config.seed)
    model = FeatureForecaster(config, channels=first.shape[-1], grid=first.shape[1:3])
    optimizer, scheduler = build_optimizer(model, config)
    sampler = WindowSampler(train_features, model.window, config.seed)
    logger.info(f"Stage 1: {len(sampler)} training windows, {config.steps} steps")

    result = Stage1Result(model=model)
    started = time.time()
    for step in tqdm(range(1, config.steps + 1), desc="stage1", disable=quiet):
        loss = train_step(model, optimizer, sampler.batch(config.batch_size),
                          config.smooth_l1_beta, scheduler)
        if step % config.log_every == 0 or step == config.steps:
            row = {"stage": "stage1", "step": step, "loss": loss,
                   "lr": scheduler.get_last_lr()[0], "wall_time": time.time() - started}
            result.log.append(row)
            if on_log is not None:
                on_log(row)
            logger.debug(f"stage1 step {step}: loss {loss:.5f}")

    if len(val_features):
        windows = WindowSampler(val_features, model.window, config.seed).all_windows()
        result.val_loss, result.val_copy_loss = evaluate_windows(model, windows, config.smooth_l1_beta)
        logger.info(f"Stage 1 validation: smooth-L1 {result.val_loss:.5f} "
                    f"(copy-last-frame {result.val_copy_loss:.5f})")
    return result


@torch.no_grad()
def rollout(model: FeatureForecaster, context: np.ndarray, steps: int) -> np.ndarray:
    """Predict `steps` frames after `context` (T, H, W, C), feeding predictions back."""
    if steps < 0:
        raise ArgumentError(f"steps={steps} must be >= 0")
    n_c = model.config.context_frames
    if context.shape[0] < n_c:
        raise ArgumentError(f"rollout needs at least {n_c} context frames, got {context.shape[0]}")
    model.eval()
    buffer = torch.from_numpy(np.ascontiguousarray(context[-n_c:], dtype=np.float32))[None]
    outputs = []
    for _ in range(steps):
        nxt = model.predict_next(buffer)
        outputs.append(nxt[0])
        buffer = torch.cat([buffer[:, 1:], nxt[:, None]], dim=1)
    if not outputs:
        return np.zeros((0, *context.shape[1:]), dtype=np.float32)
    return torch.stack(outputs).numpy()


def rollout_errors(predicted: np.ndarray, truth: np.ndarray, beta: float) -> List[float]:
    """Smooth L1 of each rolled-out frame against the real features."""
    if predicted.shape != truth.shape:
        raise ShapeError(f"rollout {predicted.shape} vs truth {truth.shape}")
    return [
        float(smooth_l1(torch.from_numpy(p), torch.from_numpy(t), beta))
        for p, t in zip(predicted.astype(np.float32), truth.astype(np.float32))
    ]


def save_forecaster(path: PathLike, model: FeatureForecaster, pca_fingerprint: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "channels": model.channels,
        "grid": list(model.grid),
        "pca_fingerprint": pca_fingerprint,
        "state_dict": model.state_dict(),
    }, path)


def load_forecaster(path: PathLike, pca_fingerprint: Optional[str] = None) -> FeatureForecaster:
    if not Path(path).exists():
        raise DependencyError(f"missing Stage-1 checkpoint {path}; run train-stage1 first")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DependencyError(f"{path} is not a version-{CHECKPOINT_VERSION} Stage-1 checkpoint")
    if pca_fingerprint is not None and payload["pca_fingerprint"] != pca_fingerprint:
        raise FingerprintMismatchError(f"{path} was trained against a different PCA projection")
    model = FeatureForecaster(ForecasterConfig(**payload["config"]), payload["channels"],
                              tuple(payload["grid"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
