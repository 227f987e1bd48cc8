"""
Deterministic toy driving world: colored squares and circles moving at constant
velocity with elastic wall bounces, rendered without anti-aliasing so every
pixel's color identifies its class exactly.

Each clip draws its random stream from (seed, clip_index) alone, so clips can be
generated in any order and in parallel.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .config import WorldConfig
from .exceptions import ArgumentError, CacheInvalidError
from .utils import PathLike, atomic_write_bytes, dump_json

logger = logging.getLogger(__name__)


CLIP_MAGIC = b"VSCL"
CLIP_VERSION = 1
# magic, version, K, H, W, class count, clip seed
_CLIP_HEADER = struct.Struct("<4sHHHHHQ")

SHAPE_KINDS = ("square", "circle")
BACKGROUND_CLASS = 0


@dataclass(frozen=True)
class ShapeState:
    class_id: int
    position: Tuple[float, float]  # (x, y) pixel coordinates of the center
    velocity: Tuple[float, float]  # pixels per frame
    size: int  # half-extent in pixels
    kind: str = "square"


@dataclass
class VideoSample:
    frames: np.ndarray  # (K, H, W, 3) float32 in [0, 1]
    masks: np.ndarray  # (K, H, W) uint8 class ids
    shapes: List[List[ShapeState]] = field(default_factory=list)
    clip_seed: int = 0

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def clip_seed(config: WorldConfig, clip_index: int) -> int:
    """64-bit seed for one clip, derived from (seed, clip_index)."""
    words = np.random.SeedSequence([config.seed, clip_index]).generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def _bounds(config: WorldConfig, size: int) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    return (float(size), float(config.width - 1 - size)), (float(size), float(config.height - 1 - size))


def step_shape(shape: ShapeState, bounds: Tuple[Tuple[float, float], Tuple[float, float]]) -> ShapeState:
    """Advance one frame: p + v, reflecting position and velocity at the walls."""
    position = list(shape.position)
    velocity = list(shape.velocity)
    for axis in range(2):
        lo, hi = bounds[axis]
        p = position[axis] + velocity[axis]
        if p < lo:
            p = 2 * lo - p
            velocity[axis] = -velocity[axis]
        elif p > hi:
            p = 2 * hi - p
            velocity[axis] = -velocity[axis]
        position[axis] = p
    return replace(shape, position=(position[0], position[1]), velocity=(velocity[0], velocity[1]))


def _initial_shapes(config: WorldConfig, rng: np.random.Generator) -> List[ShapeState]:
    low = config.num_shapes if config.min_shapes is None else config.min_shapes
    count = int(rng.integers(low, config.num_shapes + 1))
    if count == 0:
        return []
    # Distinct sizes drawn largest first: a later (smaller) shape can never hide an
    # earlier one completely, so every class stays visible.
    sizes = sorted(rng.choice(config.size_choices, size=count, replace=False).tolist(), reverse=True)
    shapes = []
    for size in sizes:
        (x_lo, x_hi), (y_lo, y_hi) = _bounds(config, size)
        speed = rng.uniform(config.speed_min, config.speed_max)
        angle = rng.uniform(0.0, 2 * np.pi)
        shapes.append(ShapeState(
            class_id=int(rng.integers(1, config.num_classes)),
            position=(float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi))),
            velocity=(float(speed * np.cos(angle)), float(speed * np.sin(angle))),
            size=int(size),
            kind=SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
        ))
    return shapes


def _shape_mask(shape: ShapeState, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    dx = xs - shape.position[0]
    dy = ys - shape.position[1]
    if shape.kind == "circle":
        return dx * dx + dy * dy <= shape.size * shape.size
    return (np.abs(dx) <= shape.size) & (np.abs(dy) <= shape.size)


def render_masks(config: WorldConfig, shapes: List[ShapeState]) -> np.ndarray:
    ys, xs = np.mgrid[0:config.height, 0:config.width].astype(np.float64)
    mask = np.full((config.height, config.width), BACKGROUND_CLASS, dtype=np.uint8)
    for shape in shapes:
        mask[_shape_mask(shape, ys, xs)] = shape.class_id
    return mask


def colorize(masks: np.ndarray, palette: List[List[int]]) -> np.ndarray:
    """Recolor class masks with the palette; returns float32 frames in [0, 1]."""
    lut = np.asarray(palette, dtype=np.uint8)
    return lut[masks].astype(np.float32) / np.float32(255.0)


def generate_clip(config: WorldConfig, clip_index: int) -> VideoSample:
    """Render clip `clip_index`; a pure function of (config, clip_index)."""
    config.validate()
    if not 0 <= clip_index < config.num_clips:
        raise ArgumentError(f"clip_index {clip_index} outside [0, {config.num_clips})")

    seed = clip_seed(config, clip_index)
    rng = np.random.default_rng(seed)
    shapes = _initial_shapes(config, rng)

    length = clip_length(config, clip_index)
    masks = np.empty((length, config.height, config.width), dtype=np.uint8)
    history: List[List[ShapeState]] = []
    for t in range(length):
        masks[t] = render_masks(config, shapes)
        history.append(shapes)
        shapes = [step_shape(s, _bounds(config, s.size)) for s in shapes]

    return VideoSample(
        frames=colorize(masks, config.palette),
        masks=masks,
        shapes=history,
        clip_seed=seed,
    )


def split_context_future(
    sample: VideoSample, M: int, offset: int = 0, length: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Split frames [offset, offset+length) into M context frames and the rest."""
    window = sample.frames.shape[0] - offset if length is None else length
    if offset < 0 or offset + window > sample.frames.shape[0]:
        raise ArgumentError(f"window [{offset}, {offset + window}) exceeds {sample.num_frames} frames")
    if not 1 <= M < window:
        raise ArgumentError(f"M={M} must satisfy 1 <= M < {window}")
    frames = sample.frames[offset:offset + window]
    return frames[:M], frames[M:]


def evaluation_offset(num_frames: int, window: int) -> int:
    """Clips long enough are evaluated on frames 3.. (0-based offset 2), else from frame 1."""
    return 2 if num_frames >= window + 2 else 0


def split_of(config: WorldConfig, clip_index: int) -> str:
    return "val" if clip_index % config.val_modulo == config.val_modulo - 1 else "train"


def clip_length(config: WorldConfig, clip_index: int) -> int:
    """Validation clips run to `eval_frames` when set; every other clip has K frames."""
    if config.eval_frames is not None and split_of(config, clip_index) == "val":
        return config.eval_frames
    return config.frames


def dataset_manifest(config: WorldConfig) -> dict:
    clips = [
        {"index": i, "seed": clip_seed(config, i), "split": split_of(config, i),
         "frames": clip_length(config, i)}
        for i in range(config.num_clips)
    ]
    return {
        "num_clips": config.num_clips,
        "seed": config.seed,
        "frames": config.frames,
        "eval_frames": config.eval_frames,
        "height": config.height,
        "width": config.width,
        "num_classes": config.num_classes,
        "train": sum(c["split"] == "train" for c in clips),
        "val": sum(c["split"] == "val" for c in clips),
        "clips": clips,
    }


def encode_clip(sample: VideoSample, num_classes: int) -> bytes:
    frames = np.clip(np.rint(sample.frames * 255.0), 0, 255).astype("<u1")
    K, H, W = sample.masks.shape
    header = _CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, K, H, W, num_classes, sample.clip_seed)
    return header + frames.tobytes() + sample.masks.astype("<u1").tobytes()


def decode_clip(payload: bytes) -> VideoSample:
    if len(payload) < _CLIP_HEADER.size:
        raise CacheInvalidError("clip file shorter than its header")
    magic, version, K, H, W, _, seed = _CLIP_HEADER.unpack_from(payload)
    if magic != CLIP_MAGIC or version != CLIP_VERSION:
        raise CacheInvalidError(f"not a version-{CLIP_VERSION} clip file (magic={magic!r})")
    n_frames = K * H * W * 3
    n_masks = K * H * W
    body = payload[_CLIP_HEADER.size:]
    if len(body) != n_frames + n_masks:
        raise CacheInvalidError("clip payload length does not match header")
    frames = np.frombuffer(body, dtype="<u1", count=n_frames).reshape(K, H, W, 3)
    masks = np.frombuffer(body, dtype="<u1", offset=n_frames, count=n_masks).reshape(K, H, W)
    return VideoSample(
        frames=frames.astype(np.float32) / np.float32(255.0),
        masks=masks.copy(),
        clip_seed=int(seed),
    )


def clip_path(out_dir: PathLike, clip_index: int) -> Path:
    return Path(out_dir) / "clips" / f"clip_{clip_index:05d}.vsc"


def save_clip(path: PathLike, sample: VideoSample, num_classes: int) -> None:
    atomic_write_bytes(path, encode_clip(sample, num_classes))


def load_clip(path: PathLike) -> VideoSample:
    with open(path, "rb") as f:
        return decode_clip(f.read())


def write_dataset(config: WorldConfig, out_dir: PathLike) -> dict:
    """Generate every clip into `out_dir/clips/` and write `out_dir/manifest.json`."""
    config.validate()
    out_dir = Path(out_dir)
    manifest = dataset_manifest(config)

    def _one(index: int) -> None:
        save_clip(clip_path(out_dir, index), generate_clip(config, index), config.num_classes)

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        list(pool.map(_one, range(config.num_clips)))

    atomic_write_bytes(out_dir / "manifest.json", dump_json(manifest))
    logger.info(f"Wrote {config.num_clips} clip(s) ({manifest['train']} train / "
                f"{manifest['val']} val) to {out_dir}")
    return manifest
