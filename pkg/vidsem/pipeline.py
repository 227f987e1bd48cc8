"""
Stage orchestration over a run ledger:

  1. generate-data     synthetic clips + manifest
  2. fit-pca           PCA on training features, codec normalization, feature caches
  3. train-stage1      masked feature forecaster
  4. rollout-features  Stage-1 predictions cached for every clip
  5. train-stage2      semantics-conditioned latent denoiser (one checkpoint per arm)
  6. sample            future frames for the validation clips
  7. evaluate          probe mIoU, FFD and PSNR against reference rows

Every stage checks that the artifacts it consumes exist and still match the
hashes recorded when they were written.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .codec import LatentTensor, codec_fingerprint, decode, encode, fit_normalization, pack, with_normalization
from .config import CodecConfig, DiffusionConfig, ExperimentConfig, GuidanceConfig
from .denoiser import SemanticDiT
from .diffusion import load_denoiser, sample, save_denoiser, train_diffusion, uses_predictions
from .evalsuite import (
    EvaluationSet,
    MetricsReport,
    ProbeHead,
    downsample_masks,
    evaluate_prediction,
    frame_features,
    ground_truth_predictor,
    noise_predictor,
    train_probe,
)
from .exceptions import DependencyError
from .features import (
    FeatureMap,
    FrozenEncoder,
    PCAProjection,
    RawFeatureMap,
    cache_features,
    encode_frames,
    extract_features,
    fit_pca,
    load_features,
    temporal_subsample,
)
from .forecaster import FeatureForecaster, load_forecaster, rollout, rollout_errors, save_forecaster, train_forecaster
from .ledger import RunLedger
from .synthworld import (
    VideoSample,
    clip_path,
    evaluation_offset,
    load_clip,
    split_context_future,
    write_dataset,
)
from .utils import read_json, torch_generator, write_json

logger = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    stages: List[str] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)

    def record(self, stage: str, **artifacts: str) -> None:
        self.stages.append(stage)
        self.artifacts.update(artifacts)


class Pipeline:
    def __init__(self, config: ExperimentConfig, ledger: RunLedger, quiet: bool = False):
        self.config = config
        self.ledger = ledger
        self.quiet = quiet
        self.result = PipelineResult()
        self._encoder: Optional[FrozenEncoder] = None
        self._pca: Optional[PCAProjection] = None
        self._codec: Optional[CodecConfig] = None
        self._probe: Optional[ProbeHead] = None
        self._manifest: Optional[dict] = None
        self._clips: Dict[int, VideoSample] = {}

    def __enter__(self) -> "Pipeline":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> bool:
        self._clips.clear()
        return False

    # Lazily loaded upstream artifacts ---------------------------------------

    def _ensure_encoder(self) -> FrozenEncoder:
        if self._encoder is None:
            self._encoder = FrozenEncoder(self.config.encoder)
        return self._encoder

    def _ensure_manifest(self) -> dict:
        if self._manifest is None:
            self.ledger.verify(self.ledger.manifest_path, "generate-data")
            self._manifest = read_json(self.ledger.manifest_path)
        return self._manifest

    def _ensure_pca(self) -> PCAProjection:
        if self._pca is None:
            self.ledger.verify(self.ledger.pca_path, "fit-pca")
            self._pca = PCAProjection.load(self.ledger.pca_path)
        return self._pca

    def _ensure_codec(self) -> CodecConfig:
        if self._codec is None:
            self.ledger.verify(self.ledger.codec_path, "fit-pca")
            stored = read_json(self.ledger.codec_path)
            self._codec = with_normalization(self.config.codec, stored["mean"], stored["std"])
        return self._codec

    def _ensure_probe(self) -> ProbeHead:
        if self._probe is not None:
            return self._probe
        pca = self._ensure_pca()
        path = self.ledger.probe_path
        if path.exists():
            self.ledger.verify(path, "evaluate")
            probe = ProbeHead.from_dict(read_json(path))
            if probe.trained_on == pca.fingerprint():
                self._probe = probe
                return probe
            logger.info("Probe was fit on an older PCA projection; refitting")
        self._probe = self._fit_probe()
        write_json(path, self._probe.to_dict())
        self.ledger.record(path)
        return self._probe

    def _fit_probe(self) -> ProbeHead:
        """Fit on ground-truth features of training clips at the latent-aligned frames."""
        cfg = self.config
        r = cfg.codec.temporal_factor
        features, labels = [], []
        for idx in self.split_indices("train"):
            _, masks = self.clip_window(idx)
            features.append(self.gt_features(idx))
            labels.append(downsample_masks(temporal_subsample(masks, r), cfg.encoder.patch_size))
        return train_probe(
            np.concatenate(features), np.concatenate(labels), cfg.world.num_classes,
            seed=cfg.eval.probe_seed, max_iter=cfg.eval.probe_max_iter, l2=cfg.eval.probe_l2,
            trained_on=self._ensure_pca().fingerprint(),
        )

    def split_indices(self, split: str) -> List[int]:
        return [c["index"] for c in self._ensure_manifest()["clips"] if c["split"] == split]

    def clip(self, index: int) -> VideoSample:
        if index not in self._clips:
            self._clips[index] = load_clip(clip_path(self.ledger.data_dir, index))
        return self._clips[index]

    def clip_window(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        """The K frames and masks of a clip that features, latents and scores are computed on."""
        clip = self.clip(index)
        K = self.config.world.frames
        offset = evaluation_offset(clip.num_frames, K)
        return clip.frames[offset:offset + K], clip.masks[offset:offset + K]

    def gt_features(self, index: int) -> np.ndarray:
        path = self.ledger.require(self.ledger.feature_path("gt", index), "fit-pca")
        return load_features(path, self._ensure_pca().fingerprint()).values

    def predicted_features(self, index: int) -> np.ndarray:
        path = self.ledger.require(self.ledger.feature_path("pred", index), "rollout-features")
        return load_features(path, self._ensure_pca().fingerprint()).values

    def latents(self, index: int) -> np.ndarray:
        return encode(self.clip_window(index)[0], self._ensure_codec()).values

    def fingerprints(self) -> Dict[str, str]:
        prints = {
            "pca": self._ensure_pca().fingerprint(),
            "codec": codec_fingerprint(self._ensure_codec()),
        }
        if self.ledger.stage1_path.exists():
            prints["stage1"] = self.ledger.fingerprint(self.ledger.stage1_path)
        return prints

    # Stages -----------------------------------------------------------------

    def generate_data(self) -> dict:
        self.ledger.write_config(self.config)
        manifest = write_dataset(self.config.world, self.ledger.data_dir)
        self.ledger.forget("artifacts/")
        self.ledger.record(self.ledger.manifest_path, *[
            clip_path(self.ledger.data_dir, c["index"]) for c in manifest["clips"]
        ])
        self._manifest = manifest
        self.result.record("generate-data", manifest=str(self.ledger.manifest_path))
        return manifest

    def fit_pca(self) -> PCAProjection:
        cfg = self.config
        encoder = self._ensure_encoder()
        r = cfg.codec.temporal_factor
        train = self.split_indices("train")
        for idx in train + self.split_indices("val"):
            self.ledger.verify(clip_path(self.ledger.data_dir, idx), "generate-data")

        raw = [encode_frames(temporal_subsample(self.clip_window(i)[0], r), encoder) for i in train]
        vectors = np.concatenate([m.values.reshape(-1, m.values.shape[-1]) for m in raw])
        cap = cfg.pca.max_fit_vectors
        if cap is not None and vectors.shape[0] > cap:
            rng = np.random.default_rng(cfg.pca.seed)
            vectors = vectors[np.sort(rng.choice(vectors.shape[0], size=cap, replace=False))]
        pca = fit_pca([RawFeatureMap(values=vectors)], cfg.pca.channels)
        pca.save(self.ledger.pca_path)
        self._pca = pca

        mean, std = fit_normalization(pack(self.clip_window(i)[0], cfg.codec) for i in train)
        codec = with_normalization(cfg.codec, mean, std)
        write_json(self.ledger.codec_path, {
            "mean": codec.norm_mean, "std": codec.norm_std, "fingerprint": codec_fingerprint(codec),
        })
        self._codec = codec
        self.ledger.record(self.ledger.pca_path, self.ledger.codec_path)

        count = 0
        for idx in train + self.split_indices("val"):
            fmap = extract_features(self.clip_window(idx)[0], encoder, pca, r)
            cache_features(self.ledger.feature_path("gt", idx), fmap)
            count += 1
        logger.info(f"Cached features for {count} clip(s) under {self.ledger.feature_dir('gt')}")
        self.result.record("fit-pca", pca=str(self.ledger.pca_path), codec=str(self.ledger.codec_path))
        return pca

    def train_stage1(self) -> FeatureForecaster:
        self._ensure_pca()
        train = [self.gt_features(i) for i in self.split_indices("train")]
        val = [self.gt_features(i) for i in self.split_indices("val")]
        self.ledger.clear_log("stage1")
        outcome = train_forecaster(self.config.stage1, train, val, on_log=self.ledger.append_log,
                                   quiet=self.quiet)
        save_forecaster(self.ledger.stage1_path, outcome.model, self._pca.fingerprint())
        self.ledger.record(self.ledger.stage1_path)
        self.ledger.update_metrics("stage1", {
            "val_smooth_l1": outcome.val_loss,
            "val_copy_last_frame": outcome.val_copy_loss,
        })
        self.result.record("train-stage1", stage1=str(self.ledger.stage1_path))
        return outcome.model

    def load_stage1(self) -> FeatureForecaster:
        self.ledger.verify(self.ledger.stage1_path, "train-stage1")
        return load_forecaster(self.ledger.stage1_path, self._ensure_pca().fingerprint())

    def rollout_features(self) -> List[float]:
        """Cache Stage-1 future predictions for every clip; returns the mean per-step error."""
        model = self.load_stage1()
        pca = self._ensure_pca()
        m_z = self.config.context_latent_frames
        beta = self.config.stage1.smooth_l1_beta
        val = set(self.split_indices("val"))
        errors = []
        for idx in self.split_indices("train") + sorted(val):
            truth = self.gt_features(idx)
            predicted = rollout(model, truth[:m_z], truth.shape[0] - m_z)
            cache_features(self.ledger.feature_path("pred", idx),
                           FeatureMap(values=predicted, pca_fingerprint=pca.fingerprint()))
            if idx in val:
                errors.append(rollout_errors(predicted, truth[m_z:], beta))
        curve = np.mean(errors, axis=0).tolist() if errors else []
        self.ledger.update_metrics("rollout_smooth_l1", curve)
        self.result.record("rollout-features", predicted=str(self.ledger.feature_dir("pred")))
        return curve

    def train_stage2(
        self,
        arm: str = "full",
        stage2: Optional[DiffusionConfig] = None,
        on_eval: Optional[Callable[[int, SemanticDiT], None]] = None,
        eval_every: Optional[int] = None,
    ) -> SemanticDiT:
        stage2 = stage2 or self.config.stage2
        train = self.split_indices("train")
        latents = [self.latents(i) for i in train]
        features = [self.gt_features(i) for i in train]
        predicted = None
        if uses_predictions(stage2):
            self.ledger.verify(self.ledger.stage1_path, "train-stage1")
            predicted = [self.predicted_features(i) for i in train]

        self.ledger.clear_log("stage2", arm)
        outcome = train_diffusion(
            stage2, latents, features, self.config.context_latent_frames,
            predicted_future=predicted, arm=arm, on_log=self.ledger.append_log,
            on_eval=on_eval, eval_every=eval_every, quiet=self.quiet,
        )
        path = self.ledger.stage2_path(arm)
        save_denoiser(path, outcome.model, stage2, self.fingerprints())
        self.ledger.record(path)
        self.ledger.update_metrics(f"stage2/{arm}", {
            "loss_ema": outcome.loss_ema, "zero_predictor_loss_ema": outcome.zero_loss_ema,
        })
        self.result.record("train-stage2", **{f"stage2/{arm}": str(path)})
        return outcome.model

    def load_stage2(self, arm: str = "full") -> SemanticDiT:
        path = self.ledger.stage2_path(arm)
        self.ledger.verify(path, "train-stage2")
        model, _, _ = load_denoiser(path, expected={
            "pca": self._ensure_pca().fingerprint(),
            "codec": codec_fingerprint(self._ensure_codec()),
        })
        return model

    # Prediction and evaluation ----------------------------------------------

    def evaluation_set(self) -> EvaluationSet:
        world = self.config.world
        indices = self.split_indices("val")
        if self.config.eval.max_clips is not None:
            indices = indices[:self.config.eval.max_clips]
        if not indices:
            raise DependencyError("no validation clips; increase world.num_clips")
        contexts, futures, masks = [], [], []
        for idx in indices:
            clip = self.clip(idx)
            offset = evaluation_offset(clip.num_frames, world.frames)
            context, future = split_context_future(clip, world.context_frames, offset, world.frames)
            contexts.append(context)
            futures.append(future)
            masks.append(clip.masks[offset + world.context_frames:offset + world.frames])
        return EvaluationSet(
            future_frames=np.stack(futures), future_masks=np.stack(masks),
            context_frames=np.stack(contexts),
        )

    def model_predictor(
        self,
        model: SemanticDiT,
        truth: EvaluationSet,
        guidance: Optional[GuidanceConfig] = None,
        inference_channels: Optional[int] = None,
        feature_source: Optional[str] = None,
        stage1: Optional[FeatureForecaster] = None,
    ):
        """Context frames -> Stage-1 rollout (or real features) -> Stage-2 sampling -> decode."""
        cfg = self.config
        codec = self._ensure_codec()
        encoder = self._ensure_encoder()
        pca = self._ensure_pca()
        r = cfg.codec.temporal_factor
        m_z, t_z = cfg.context_latent_frames, cfg.latent_frames
        M = cfg.world.context_frames
        guidance = cfg.guidance if guidance is None else guidance
        source = feature_source or cfg.eval.feature_source
        if source == "predicted" and stage1 is None:
            stage1 = self.load_stage1()

        def predict(context: np.ndarray, indices: List[int], run: int) -> np.ndarray:
            ctx_latents, all_features = [], []
            for b, frames in enumerate(context):
                ctx_latents.append(encode(frames, codec).values)
                ctx_features = extract_features(frames, encoder, pca, r).values
                if source == "predicted":
                    future = rollout(stage1, ctx_features, t_z - m_z)
                else:
                    window = np.concatenate([frames, truth.future_frames[indices[b]]])
                    future = extract_features(window, encoder, pca, r).values[m_z:]
                all_features.append(np.concatenate([ctx_features, future]))
            seed = np.random.SeedSequence([cfg.sampler.seed, run, indices[0]]).generate_state(1)[0]
            z = sample(
                model,
                torch.from_numpy(np.stack(ctx_latents)),
                torch.from_numpy(np.stack(all_features).astype(np.float32)),
                cfg.sampler, guidance, generator=torch_generator(int(seed)),
                inference_channels=inference_channels,
                context_c_noise=cfg.stage2.context_c_noise,
            ).numpy()
            return np.stack([
                decode(LatentTensor(np.concatenate([ctx_latents[b], z[b]])), codec)[M:]
                for b in range(len(indices))
            ])

        return predict

    def sample(self, arm: str = "full") -> str:
        """Write one sampling run of predicted future frames for the validation clips."""
        model = self.load_stage2(arm)
        truth = self.evaluation_set()
        predictor = self.model_predictor(model, truth)
        batch = self.config.eval.batch_size
        frames = np.concatenate([
            predictor(truth.context_frames[s:s + batch],
                      list(range(s, min(s + batch, truth.num_clips))), 0)
            for s in range(0, truth.num_clips, batch)
        ])
        path = self.ledger.samples_path(arm)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez_compressed(f, frames=np.clip(frames, 0.0, 1.0).astype(np.float32))
        self.ledger.record(path)
        self.result.record("sample", **{f"samples/{arm}": str(path)})
        return str(path)

    def evaluate_model(
        self,
        model: SemanticDiT,
        method: str,
        guidance: Optional[GuidanceConfig] = None,
        inference_channels: Optional[int] = None,
        feature_source: Optional[str] = None,
        runs: Optional[int] = None,
        truth: Optional[EvaluationSet] = None,
        truth_features: Optional[np.ndarray] = None,
    ) -> MetricsReport:
        cfg = self.config
        truth = truth or self.evaluation_set()
        encoder, pca = self._ensure_encoder(), self._ensure_pca()
        if truth_features is None:
            truth_features = frame_features(truth.future_frames, encoder, pca, cfg.world.workers)
        guidance = cfg.guidance if guidance is None else guidance
        channels = cfg.eval.inference_channels if inference_channels is None else inference_channels
        source = feature_source or cfg.eval.feature_source
        rollout_curve = self.ledger.read_metrics().get("rollout_smooth_l1", [])
        return evaluate_prediction(
            method,
            self.model_predictor(model, truth, guidance, channels, source),
            truth, encoder, pca, self._ensure_probe(),
            runs=runs or cfg.eval.runs, batch_size=cfg.eval.batch_size,
            rollout_smooth_l1=rollout_curve if source == "predicted" else [],
            fingerprints=self.fingerprints(),
            settings={
                "guidance_w": guidance.w, "coarse_c": guidance.coarse_c,
                "inference_channels": channels, "feature_source": source,
            },
            workers=cfg.world.workers, truth_features=truth_features,
        )

    def reference_reports(self, truth: EvaluationSet, truth_features: np.ndarray,
                          runs: Optional[int] = None) -> List[MetricsReport]:
        encoder, pca, probe = self._ensure_encoder(), self._ensure_pca(), self._ensure_probe()
        runs = runs or self.config.eval.runs
        common = dict(batch_size=self.config.eval.batch_size, workers=self.config.world.workers,
                      truth_features=truth_features, fingerprints=self.fingerprints())
        return [
            evaluate_prediction("ground_truth", ground_truth_predictor(truth), truth, encoder, pca,
                                probe, runs=1, **common),
            evaluate_prediction("uniform_noise", noise_predictor(truth, self.config.sampler.seed),
                                truth, encoder, pca, probe, runs=runs, **common),
        ]

    def evaluate(self, arm: str = "full", runs: Optional[int] = None) -> Dict[str, dict]:
        model = self.load_stage2(arm)
        truth = self.evaluation_set()
        truth_features = frame_features(truth.future_frames, self._ensure_encoder(),
                                        self._ensure_pca(), self.config.world.workers)
        reports = [self.evaluate_model(model, arm, runs=runs, truth=truth,
                                       truth_features=truth_features)]
        if self.config.eval.reference_rows:
            reports += self.reference_reports(truth, truth_features, runs)
        out = {r.method: r.to_dict() for r in reports}
        self.ledger.update_metrics(f"evaluate/{arm}", out)
        self.result.record("evaluate", metrics=str(self.ledger.metrics_path))
        return out


__all__ = ["Pipeline", "PipelineResult"]
