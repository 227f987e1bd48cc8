"""
Configuration classes for a vidsem experiment.

Each section validates itself; ExperimentConfig adds the cross-section checks.
Unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Any, List, Optional

from .exceptions import ConfigError


DEFAULT_PALETTE: List[List[int]] = [
    [72, 72, 72],     # 0 road / background
    [220, 40, 40],    # 1 car
    [240, 200, 30],   # 2 pedestrian
    [40, 90, 220],    # 3 truck
    [40, 190, 90],    # 4 cyclist
]


def _require(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{path}: {message}")


@dataclass
class WorldConfig:
    """Synthetic shape world."""

    height: int = 64
    width: int = 64

    # Shapes per clip are drawn uniformly from [min_shapes, num_shapes]
    num_shapes: int = 5
    min_shapes: Optional[int] = 3
    size_min: int = 3
    size_max: int = 11
    speed_min: float = 0.5
    speed_max: float = 2.0
    palette: List[List[int]] = field(default_factory=lambda: [list(c) for c in DEFAULT_PALETTE])

    # Clip layout: K frames per clip, the first M are context (full scale: K=25, M=13)
    frames: int = 25
    context_frames: int = 13
    # Validation clips rendered this long; clips with >= K+2 frames are scored from
    # their third frame (full scale: 27). None renders them at K frames.
    eval_frames: Optional[int] = None
    num_clips: int = 120
    val_modulo: int = 5

    seed: int = 0
    workers: int = 4

    @property
    def num_classes(self) -> int:
        return len(self.palette)

    @property
    def size_choices(self) -> List[int]:
        return list(range(self.size_min, self.size_max + 1, 2))

    def validate(self, path: str = "world") -> None:
        _require(self.height > 0 and self.width > 0, path, "height and width must be positive")
        _require(self.num_shapes >= 0, f"{path}.num_shapes", "must be >= 0")
        if self.min_shapes is not None:
            _require(0 <= self.min_shapes <= self.num_shapes, f"{path}.min_shapes",
                     "must lie in [0, num_shapes]")
        _require(self.frames >= 2, f"{path}.frames", "K must be >= 2")
        _require(1 <= self.context_frames < self.frames, f"{path}.context_frames",
                 "M must satisfy 1 <= M < K")
        if self.eval_frames is not None:
            _require(self.eval_frames >= self.frames, f"{path}.eval_frames", "must be >= K")
        _require(self.num_clips >= 0, f"{path}.num_clips", "must be >= 0")
        _require(self.val_modulo >= 2, f"{path}.val_modulo", "must be >= 2")
        _require(0 < self.speed_min <= self.speed_max, f"{path}.speed_min",
                 "need 0 < speed_min <= speed_max")
        _require(1 <= self.size_min <= self.size_max, f"{path}.size_min",
                 "need 1 <= size_min <= size_max")
        _require(len(self.size_choices) >= self.num_shapes, f"{path}.num_shapes",
                 "sizes are distinct per clip; widen [size_min, size_max]")
        _require(2 * self.size_max + 1 + 2 * self.speed_max < min(self.height, self.width),
                 f"{path}.size_max", "shapes must fit inside the frame with room to move")
        _require(len(self.palette) >= 2, f"{path}.palette", "need background plus one class")
        for i, color in enumerate(self.palette):
            _require(len(color) == 3 and all(0 <= c <= 255 for c in color),
                     f"{path}.palette[{i}]", "colors are three uint8 values")
        _require(len({tuple(c) for c in self.palette}) == len(self.palette), f"{path}.palette",
                 "class colors must be distinct")
        _require(len(self.palette) <= 256, f"{path}.palette", "at most 256 classes")


@dataclass
class FrozenEncoderConfig:
    """Frozen multi-depth patch encoder (stand-in for the foundation model)."""

    patch_size: int = 4
    depth: int = 8
    width: int = 32
    # Full scale taps blocks 3/6/9/12 of a 12-block ViT
    tap_layers: List[int] = field(default_factory=lambda: [2, 4, 6, 8])
    freeze_seed: int = 1234

    @property
    def raw_channels(self) -> int:
        return self.width * len(self.tap_layers)

    def validate(self, path: str = "encoder") -> None:
        _require(self.patch_size >= 1, f"{path}.patch_size", "must be >= 1")
        _require(self.depth >= 1 and self.width >= 1, path, "depth and width must be >= 1")
        _require(len(self.tap_layers) > 0, f"{path}.tap_layers", "must not be empty")
        _require(self.tap_layers == sorted(set(self.tap_layers)), f"{path}.tap_layers",
                 "must be sorted and unique")
        _require(all(1 <= i <= self.depth for i in self.tap_layers), f"{path}.tap_layers",
                 "indices must lie in [1, depth]")


@dataclass
class PCAConfig:
    # Full scale: C_h = 1152
    channels: int = 64
    # Cap on patch vectors used for the fit; None uses all of them
    max_fit_vectors: Optional[int] = 200000
    seed: int = 0

    def validate(self, path: str = "pca") -> None:
        _require(self.channels >= 1, f"{path}.channels", "must be >= 1")
        if self.max_fit_vectors is not None:
            _require(self.max_fit_vectors >= 1, f"{path}.max_fit_vectors", "must be >= 1")


@dataclass
class CodecConfig:
    """Lossless space-to-depth codec with causal temporal grouping."""

    spatial_factor: int = 4
    # Full scale: r = 4
    temporal_factor: int = 4
    # Per-channel normalization; None means identity until fit_normalization runs
    norm_mean: Optional[List[float]] = None
    norm_std: Optional[List[float]] = None

    def latent_channels(self) -> int:
        return 3 * self.spatial_factor ** 2 * self.temporal_factor

    def validate(self, path: str = "codec") -> None:
        _require(self.spatial_factor >= 1, f"{path}.spatial_factor", "must be >= 1")
        _require(self.temporal_factor >= 1, f"{path}.temporal_factor", "must be >= 1")
        _require((self.norm_mean is None) == (self.norm_std is None), path,
                 "norm_mean and norm_std are set together")
        if self.norm_std is not None:
            _require(len(self.norm_std) == self.latent_channels()
                     and len(self.norm_mean) == self.latent_channels(), path,
                     "normalization vectors must have C_z entries")
            _require(all(s > 0 for s in self.norm_std), f"{path}.norm_std", "must be > 0")


@dataclass
class ForecasterConfig:
    """Stage-1 masked feature transformer."""

    layers: int = 4
    model_dim: int = 256
    heads: int = 4
    # N_c = 4 context frames, N_p = 1
    context_frames: int = 4
    predicted_frames: int = 1
    mlp_ratio: float = 4.0
    smooth_l1_beta: float = 1.0

    # Optimization: Adam, betas 0.9/0.99, warmup then cosine decay
    learning_rate: float = 3e-4
    adam_betas: List[float] = field(default_factory=lambda: [0.9, 0.99])
    weight_decay: float = 0.0
    warmup_steps: int = 100
    lr_schedule: str = "cosine"
    steps: int = 2000
    batch_size: int = 8
    log_every: int = 50
    seed: int = 0

    def validate(self, path: str = "stage1") -> None:
        _require(self.predicted_frames == 1, f"{path}.predicted_frames", "N_p must be 1")
        _require(self.context_frames >= 1, f"{path}.context_frames", "N_c must be >= 1")
        _require(self.layers >= 1, f"{path}.layers", "must be >= 1")
        _require(self.model_dim % self.heads == 0, f"{path}.model_dim",
                 "must be divisible by heads")
        _require(self.smooth_l1_beta > 0, f"{path}.smooth_l1_beta", "must be > 0")
        _validate_optim(self, path)


@dataclass
class DenoiserConfig:
    """Stage-2 diffusion transformer (full scale: 14 layers, 16 heads, 2048 wide)."""

    layers: int = 6
    model_dim: int = 384
    heads: int = 6
    patch: int = 2
    mlp_ratio: float = 4.0
    adaln_lora_rank: int = 16
    qk_norm: bool = True
    rope_theta: float = 10000.0
    frequency_dim: int = 256
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def rope_split(self) -> tuple[int, int, int]:
        """Per-axis rotary dimensions (t, h, w); each even, summing to head_dim."""
        spatial = self.head_dim // 6 * 2
        return self.head_dim - 2 * spatial, spatial, spatial

    def validate(self, path: str = "stage2.denoiser") -> None:
        _require(self.patch == 2, f"{path}.patch", "patch is fixed at 2x2")
        _require(self.model_dim % self.heads == 0, f"{path}.model_dim",
                 "must be divisible by heads")
        _require(self.head_dim % 2 == 0 and self.head_dim >= 6, f"{path}.model_dim",
                 "head dimension must be even and >= 6 for 3D rotary embeddings")
        _require(self.adaln_lora_rank >= 1, f"{path}.adaln_lora_rank", "must be >= 1")
        _require(self.frequency_dim % 2 == 0, f"{path}.frequency_dim", "must be even")


@dataclass
class NoiseDistributionConfig:
    # 5% of samples draw log sigma ~ U(log 200, log 100000)
    p_high: float = 0.05
    high_sigma_min: float = 200.0
    high_sigma_max: float = 100000.0

    def validate(self, path: str = "stage2.noise") -> None:
        _require(0.0 <= self.p_high <= 1.0, f"{path}.p_high", "must be a probability")
        _require(1.0 <= self.high_sigma_min < self.high_sigma_max, path,
                 "need 1 <= high_sigma_min < high_sigma_max")


@dataclass
class NestedDropoutPolicy:
    enabled: bool = True
    # Full scale: {8, ..., 1152}; scaled to C_h = 64
    channel_set: List[int] = field(default_factory=lambda: [8, 16, 32, 64])

    def validate(self, path: str = "stage2.nested_dropout") -> None:
        _require(len(self.channel_set) > 0, f"{path}.channel_set", "must not be empty")
        _require(self.channel_set == sorted(set(self.channel_set)), f"{path}.channel_set",
                 "must be sorted and unique")
        _require(self.channel_set[0] >= 1, f"{path}.channel_set", "entries must be >= 1")


@dataclass
class MixedSupervisionPolicy:
    # 10% of examples see Stage-1 predicted features
    p_predicted: float = 0.1

    def validate(self, path: str = "stage2.mixed_supervision") -> None:
        _require(0.0 <= self.p_predicted <= 1.0, f"{path}.p_predicted", "must be a probability")


@dataclass
class DiffusionConfig:
    """Stage-2 training."""

    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    noise: NoiseDistributionConfig = field(default_factory=NoiseDistributionConfig)
    nested_dropout: NestedDropoutPolicy = field(default_factory=NestedDropoutPolicy)
    mixed_supervision: MixedSupervisionPolicy = field(default_factory=MixedSupervisionPolicy)
    # False trains the unconditioned baseline (features zeroed)
    conditioning: bool = True
    context_c_noise: float = 0.001

    # Optimization: Adam, betas 0.9/0.99, lr 0.6 * 2**-10.5, warmup then decay
    learning_rate: float = 0.6 * 2 ** -10.5
    adam_betas: List[float] = field(default_factory=lambda: [0.9, 0.99])
    weight_decay: float = 0.0
    warmup_steps: int = 100
    lr_schedule: str = "cosine"
    steps: int = 3000
    batch_size: int = 8
    log_every: int = 50
    loss_ema_decay: float = 0.99
    seed: int = 0

    def validate(self, path: str = "stage2") -> None:
        self.denoiser.validate(f"{path}.denoiser")
        self.noise.validate(f"{path}.noise")
        self.nested_dropout.validate(f"{path}.nested_dropout")
        self.mixed_supervision.validate(f"{path}.mixed_supervision")
        _require(self.context_c_noise > 0, f"{path}.context_c_noise", "must be > 0")
        _require(0.0 <= self.loss_ema_decay < 1.0, f"{path}.loss_ema_decay", "must lie in [0, 1)")
        _validate_optim(self, path)


@dataclass
class SamplerConfig:
    num_steps: int = 32
    sigma_max: float = 80.0
    sigma_min: float = 0.002
    rho: float = 7.0
    seed: int = 0

    def validate(self, path: str = "sampler") -> None:
        _require(self.num_steps >= 1, f"{path}.num_steps", "must be >= 1")
        _require(self.sigma_max > self.sigma_min > 0, path, "need sigma_max > sigma_min > 0")
        _require(self.rho > 0, f"{path}.rho", "must be > 0")


@dataclass
class GuidanceConfig:
    w: float = 0.0
    coarse_c: int = 16

    def validate(self, path: str = "guidance") -> None:
        _require(self.w >= 0, f"{path}.w", "must be >= 0")
        _require(self.coarse_c >= 1, f"{path}.coarse_c", "must be >= 1")


@dataclass
class EvalConfig:
    # Independent sampling runs per evaluation
    runs: int = 3
    batch_size: int = 8
    # "predicted" runs the Stage-1 rollout; "ground_truth" conditions on real future features
    feature_source: str = "predicted"
    inference_channels: Optional[int] = None
    max_clips: Optional[int] = None
    probe_seed: int = 0
    probe_max_iter: int = 200
    probe_l2: float = 1e-4
    reference_rows: bool = True

    def validate(self, path: str = "eval") -> None:
        _require(self.runs >= 1, f"{path}.runs", "must be >= 1")
        _require(self.batch_size >= 1, f"{path}.batch_size", "must be >= 1")
        _require(self.feature_source in ("predicted", "ground_truth"), f"{path}.feature_source",
                 "must be 'predicted' or 'ground_truth'")
        _require(self.probe_max_iter >= 1, f"{path}.probe_max_iter", "must be >= 1")
        _require(self.probe_l2 >= 0, f"{path}.probe_l2", "must be >= 0")


@dataclass
class ReproduceConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    convergence_steps: int = 3000
    convergence_eval_every: int = 250
    guidance_weights: List[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    guidance_fixed_w: float = 0.4

    def validate(self, path: str = "reproduce") -> None:
        _require(len(self.seeds) >= 1, f"{path}.seeds", "must not be empty")
        _require(self.convergence_eval_every >= 1, f"{path}.convergence_eval_every",
                 "must be >= 1")
        _require(self.convergence_steps >= self.convergence_eval_every,
                 f"{path}.convergence_steps", "must cover at least one evaluation")
        _require(all(w >= 0 for w in self.guidance_weights), f"{path}.guidance_weights",
                 "must be >= 0")


def _validate_optim(section: Any, path: str) -> None:
    _require(section.learning_rate > 0, f"{path}.learning_rate", "must be > 0")
    _require(len(section.adam_betas) == 2 and all(0 <= b < 1 for b in section.adam_betas),
             f"{path}.adam_betas", "need two values in [0, 1)")
    _require(section.steps >= 1 and section.batch_size >= 1, path,
             "steps and batch_size must be >= 1")
    _require(section.warmup_steps >= 0, f"{path}.warmup_steps", "must be >= 0")
    _require(section.lr_schedule in ("cosine", "constant"), f"{path}.lr_schedule",
             "must be 'cosine' or 'constant'")
    _require(section.log_every >= 1, f"{path}.log_every", "must be >= 1")


@dataclass
class ExperimentConfig:
    """Configuration for a whole vidsem experiment."""

    world: WorldConfig = field(default_factory=WorldConfig)
    encoder: FrozenEncoderConfig = field(default_factory=FrozenEncoderConfig)
    pca: PCAConfig = field(default_factory=PCAConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    stage1: ForecasterConfig = field(default_factory=ForecasterConfig)
    stage2: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    reproduce: ReproduceConfig = field(default_factory=ReproduceConfig)

    @property
    def latent_frames(self) -> int:
        return 1 + (self.world.frames - 1) // self.codec.temporal_factor

    @property
    def context_latent_frames(self) -> int:
        return 1 + (self.world.context_frames - 1) // self.codec.temporal_factor

    @property
    def feature_grid(self) -> tuple[int, int]:
        p = self.encoder.patch_size
        return self.world.height // p, self.world.width // p

    @property
    def latent_grid(self) -> tuple[int, int]:
        s = self.codec.spatial_factor
        return self.world.height // s, self.world.width // s

    def validate(self) -> "ExperimentConfig":
        self.world.validate()
        self.encoder.validate()
        self.pca.validate()
        self.codec.validate()
        self.stage1.validate()
        self.stage2.validate()
        self.sampler.validate()
        self.guidance.validate()
        self.eval.validate()
        self.reproduce.validate()

        w, s, p = self.world, self.codec.spatial_factor, self.encoder.patch_size
        _require(w.height % s == 0 and w.width % s == 0, "world.height",
                 f"height and width must be divisible by codec.spatial_factor={s}")
        _require(w.height % p == 0 and w.width % p == 0, "world.height",
                 f"height and width must be divisible by encoder.patch_size={p}")
        r = self.codec.temporal_factor
        _require((w.frames - 1) % r == 0, "world.frames", f"K-1 must be divisible by r={r}")
        _require((w.context_frames - 1) % r == 0, "world.context_frames",
                 f"M-1 must be divisible by r={r} so context ends on a latent boundary")
        h_z, w_z = self.latent_grid
        _require(h_z % 2 == 0 and w_z % 2 == 0, "codec.spatial_factor",
                 "latent grid must be divisible by the 2x2 denoiser patch")
        _require(self.pca.channels <= self.encoder.raw_channels, "pca.channels",
                 f"must not exceed the encoder's {self.encoder.raw_channels} raw channels")
        _require(self.stage1.context_frames <= self.context_latent_frames, "stage1.context_frames",
                 f"N_c must not exceed the {self.context_latent_frames} context feature frames")
        channel_set = self.stage2.nested_dropout.channel_set
        _require(channel_set[-1] == self.pca.channels, "stage2.nested_dropout.channel_set",
                 f"must end at pca.channels={self.pca.channels}")
        _require(self.guidance.coarse_c in channel_set, "guidance.coarse_c",
                 "must be a member of the nested-dropout channel set")
        if self.guidance.w > 0:
            _require(self.guidance.coarse_c < self.pca.channels, "guidance.coarse_c",
                     "must be below C_h when guidance is enabled")
        if self.eval.inference_channels is not None:
            _require(self.eval.inference_channels in channel_set, "eval.inference_channels",
                     "must be a member of the nested-dropout channel set")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return build_section(cls, data, "").validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_section(cls: type, data: Any, path: str) -> Any:
    """Recursively build a dataclass tree from plain dicts, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs: dict = {}
    for key, value in data.items():
        key_path = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{key_path}: unknown configuration key")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = build_section(hint, value, key_path)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from e
