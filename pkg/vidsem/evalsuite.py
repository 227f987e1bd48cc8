"""
Evaluation: a frozen linear segmentation probe on semantic features (mIoU over all
and moving classes), Frechet feature distance, PSNR, and the per-method report
built from them.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from einops import rearrange

from .exceptions import ArgumentError, FingerprintMismatchError, FitError, ShapeError
from .features import FrozenEncoder, PCAProjection, encode_frames, project
from .utils import sha256_arrays

logger = logging.getLogger(__name__)

BACKGROUND_CLASS = 0


def downsample_masks(masks: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W) class masks -> (..., H/p, W/p) by majority vote; ties go to the lower id."""
    H, W = masks.shape[-2:]
    if H % patch or W % patch:
        raise ShapeError(f"mask size {H}x{W} not divisible by patch {patch}")
    blocks = rearrange(masks, "... (h p1) (w p2) -> ... h w (p1 p2)", p1=patch, p2=patch)
    num_classes = int(masks.max()) + 1 if masks.size else 1
    counts = (blocks[..., None] == np.arange(num_classes)).sum(axis=-2)
    return counts.argmax(axis=-1).astype(np.uint8)


@dataclass
class ProbeHead:
    weights: np.ndarray  # (C_h, num_classes)
    bias: np.ndarray  # (num_classes,)
    trained_on: str = ""  # PCA fingerprint of the features the probe was fit on

    @property
    def num_classes(self) -> int:
        return int(self.bias.shape[0])

    def fingerprint(self) -> str:
        return sha256_arrays(self.weights, self.bias)

    def logits(self, features: np.ndarray) -> np.ndarray:
        if features.shape[-1] != self.weights.shape[0]:
            raise ShapeError(f"features have {features.shape[-1]} channels, probe expects "
                             f"{self.weights.shape[0]}")
        return features.astype(np.float64) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).argmax(axis=-1).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist(),
                "trained_on": self.trained_on}

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeHead":
        return cls(weights=np.asarray(data["weights"], dtype=np.float64),
                   bias=np.asarray(data["bias"], dtype=np.float64),
                   trained_on=data.get("trained_on", ""))


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    seed: int = 0,
    max_iter: int = 200,
    l2: float = 1e-4,
    max_vectors: int = 100_000,
    trained_on: str = "",
) -> ProbeHead:
    """Multinomial logistic regression on (..., C) feature vectors and (...) labels."""
    X = features.reshape(-1, features.shape[-1]).astype(np.float64)
    y = labels.reshape(-1).astype(np.int64)
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{X.shape[0]} feature vectors vs {y.shape[0]} labels")
    if np.unique(y).size < 2:
        raise FitError("probe training data contains a single class")

    rng = np.random.default_rng(seed)
    if X.shape[0] > max_vectors:
        keep = np.sort(rng.choice(X.shape[0], size=max_vectors, replace=False))
        X, y = X[keep], y[keep]

    Xt = torch.from_numpy(X)
    yt = torch.from_numpy(y)
    W = torch.zeros(X.shape[1], num_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.LBFGS([W, b], lr=1.0, max_iter=max_iter,
                                  line_search_fn="strong_wolfe", tolerance_grad=1e-9)

    def closure():
        optimizer.zero_grad()
        loss = F.cross_entropy(Xt @ W + b, yt) + 0.5 * l2 * W.pow(2).sum()
        loss.backward()
        return loss

    final = optimizer.step(closure)
    accuracy = float(((Xt @ W + b).argmax(dim=1) == yt).double().mean())
    logger.info(f"Probe fit on {X.shape[0]} vectors: loss {float(final):.4f}, "
                f"train accuracy {accuracy:.3f}")
    return ProbeHead(weights=W.detach().numpy().copy(), bias=b.detach().numpy().copy(),
                     trained_on=trained_on)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    gt = gt.reshape(-1).astype(np.int64)
    pred = pred.reshape(-1).astype(np.int64)
    if gt.size and (max(gt.max(), pred.max()) >= num_classes or min(gt.min(), pred.min()) < 0):
        raise ArgumentError(f"class ids must lie in [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, classes: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is absent from both) and the mean over `classes`
    that occur in the ground truth."""
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    subset = range(num_classes) if classes is None else classes
    present = [c for c in subset if cm[c].sum() > 0]
    mean = float(np.mean(iou[present])) if present else float("nan")
    return iou, mean


def moving_classes(num_classes: int) -> List[int]:
    return [c for c in range(num_classes) if c != BACKGROUND_CLASS]


def _sqrtm_psd(S: np.ndarray) -> np.ndarray:
    vals, vecs = scipy.linalg.eigh(S)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_feature_distance(a: np.ndarray, b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2) over (N, C) vectors."""
    a = a.reshape(-1, a.shape[-1]).astype(np.float64)
    b = b.reshape(-1, b.shape[-1]).astype(np.float64)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature sets have {a.shape[1]} and {b.shape[1]} channels")
    need = a.shape[1] + 1
    if a.shape[0] < need or b.shape[0] < need:
        raise ArgumentError(f"FFD needs at least {need} samples per set, "
                            f"got {a.shape[0]} and {b.shape[0]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    S_a = np.cov(a, rowvar=False)
    S_b = np.cov(b, rowvar=False)
    root_a = _sqrtm_psd(S_a)
    cross = root_a @ S_b @ root_a
    cross_vals = scipy.linalg.eigvalsh((cross + cross.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(cross_vals, 0.0, None)).sum())
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(S_a) + np.trace(S_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def psnr(pred: np.ndarray, target: np.ndarray, max_value: float = 1.0) -> float:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    mse = float(np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("miou_all", "iou_moving", "miou_all_frames", "iou_moving_all_frames", "ffd", "psnr")

FRAME_SETS = {
    "miou_all": "middle predicted frame",
    "iou_moving": "middle predicted frame",
    "miou_all_frames": "all predicted frames",
    "iou_moving_all_frames": "all predicted frames",
    "ffd": "all predicted frames, per-patch features",
    "psnr": "all predicted frames",
}


def _jsonable(value: float):
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def _summarize(values: List[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if np.isinf(arr).any():
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std())


@dataclass
class MetricsReport:
    method: str
    runs: List[Dict[str, float]] = field(default_factory=list)
    rollout_smooth_l1: List[float] = field(default_factory=list)
    evaluation_frame: int = 0  # 0-based index within the predicted frames
    fingerprints: Dict[str, str] = field(default_factory=dict)
    settings: Dict[str, object] = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        return _summarize([r[metric] for r in self.runs])[0]

    def std(self, metric: str) -> float:
        return _summarize([r[metric] for r in self.runs])[1]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mean": {m: _jsonable(self.mean(m)) for m in METRIC_FIELDS},
            "std": {m: _jsonable(self.std(m)) for m in METRIC_FIELDS},
            "runs": [{k: _jsonable(v) for k, v in r.items()} for r in self.runs],
            "frame_sets": dict(FRAME_SETS),
            "evaluation_frame": self.evaluation_frame,
            "rollout_smooth_l1": list(self.rollout_smooth_l1),
            "fingerprints": dict(self.fingerprints),
            "settings": dict(self.settings),
        }


@dataclass
class EvaluationSet:
    """Ground truth for the evaluation window of every validation clip."""

    future_frames: np.ndarray  # (N, F, H, W, 3)
    future_masks: np.ndarray  # (N, F, H, W)
    context_frames: np.ndarray  # (N, M, H, W, 3)

    @property
    def num_clips(self) -> int:
        return int(self.future_frames.shape[0])


# predictor(context (B, M, H, W, 3), clip indices, run) -> predicted future frames (B, F, H, W, 3)
Predictor = Callable[[np.ndarray, List[int], int], np.ndarray]


def frame_features(frames: np.ndarray, encoder: FrozenEncoder, pca: PCAProjection,
                   workers: int = 1) -> np.ndarray:
    """(N, F, H, W, 3) -> (N, F, H_h, W_h, C_h) projected features, one clip per task."""
    def _one(clip: np.ndarray) -> np.ndarray:
        return project(encode_frames(clip, encoder), pca).values

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return np.stack(list(pool.map(_one, frames)))


def score_predictions(
    predicted: np.ndarray,
    truth: EvaluationSet,
    truth_features: np.ndarray,
    encoder: FrozenEncoder,
    pca: PCAProjection,
    probe: ProbeHead,
    workers: int = 1,
) -> Dict[str, float]:
    if predicted.shape != truth.future_frames.shape:
        raise ShapeError(f"predicted frames {predicted.shape} vs truth {truth.future_frames.shape}")
    if probe.trained_on and probe.trained_on != pca.fingerprint():
        raise FingerprintMismatchError("probe was fit on features from a different PCA projection")
    num_classes = probe.num_classes
    patch = encoder.config.patch_size
    predicted = np.clip(predicted, 0.0, 1.0)

    feats = frame_features(predicted, encoder, pca, workers)
    pred_masks = probe.predict(feats)
    gt_masks = downsample_masks(truth.future_masks, patch)
    middle = predicted.shape[1] // 2
    moving = moving_classes(num_classes)

    return {
        "miou_all": miou(pred_masks[:, middle], gt_masks[:, middle], num_classes)[1],
        "iou_moving": miou(pred_masks[:, middle], gt_masks[:, middle], num_classes, moving)[1],
        "miou_all_frames": miou(pred_masks, gt_masks, num_classes)[1],
        "iou_moving_all_frames": miou(pred_masks, gt_masks, num_classes, moving)[1],
        "ffd": frechet_feature_distance(feats, truth_features),
        "psnr": psnr(predicted, truth.future_frames),
    }


def evaluate_prediction(
    method: str,
    predictor: Predictor,
    truth: EvaluationSet,
    encoder: FrozenEncoder,
    pca: PCAProjection,
    probe: ProbeHead,
    runs: int = 3,
    batch_size: int = 8,
    rollout_smooth_l1: Sequence[float] = (),
    fingerprints: Optional[Dict[str, str]] = None,
    settings: Optional[Dict[str, object]] = None,
    workers: int = 1,
    truth_features: Optional[np.ndarray] = None,
) -> MetricsReport:
    """Run `predictor` over the evaluation set `runs` times and score every run."""
    if runs < 1:
        raise ArgumentError(f"runs={runs} must be >= 1")
    if truth_features is None:
        truth_features = frame_features(truth.future_frames, encoder, pca, workers)
    report = MetricsReport(
        method=method,
        rollout_smooth_l1=[float(v) for v in rollout_smooth_l1],
        evaluation_frame=truth.future_frames.shape[1] // 2,
        fingerprints=dict(fingerprints or {}),
        settings=dict(settings or {}),
    )
    for run in range(runs):
        batches = []
        for start in range(0, truth.num_clips, batch_size):
            indices = list(range(start, min(start + batch_size, truth.num_clips)))
            batches.append(predictor(truth.context_frames[indices], indices, run))
        predicted = np.concatenate(batches, axis=0)
        metrics = score_predictions(predicted, truth, truth_features, encoder, pca, probe, workers)
        report.runs.append(metrics)
        logger.info(f"[{method}] run {run + 1}/{runs}: mIoU(A) {metrics['miou_all']:.3f}, "
                    f"IoU(M) {metrics['iou_moving']:.3f}, FFD {metrics['ffd']:.3f}, "
                    f"PSNR {metrics['psnr']:.2f}")
    return report


def ground_truth_predictor(truth: EvaluationSet) -> Predictor:
    def predict(context: np.ndarray, indices: List[int], run: int) -> np.ndarray:
        return truth.future_frames[indices]
    return predict


def noise_predictor(truth: EvaluationSet, seed: int = 0) -> Predictor:
    """Uniform-noise frames; each (clip, run) pair has its own stream."""
    def predict(context: np.ndarray, indices: List[int], run: int) -> np.ndarray:
        shape = truth.future_frames.shape[1:]
        return np.stack([
            np.random.default_rng([seed, run, i]).random(shape, dtype=np.float32) for i in indices
        ])
    return predict
