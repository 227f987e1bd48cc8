"""
Desk-scale ablations. Each experiment trains (or reuses) one Stage-2 checkpoint
per arm, evaluates every arm with the same seeds, and writes a JSON and a CSV
report under <run>/reports/.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import DiffusionConfig, GuidanceConfig
from .denoiser import SemanticDiT
from .diffusion import load_denoiser, uses_predictions
from .evalsuite import METRIC_FIELDS, MetricsReport, frame_features
from .exceptions import ArgumentError
from .pipeline import Pipeline

logger = logging.getLogger(__name__)

# Experiment name -> Reproducer method; reports are written under the experiment name.
EXPERIMENTS = {
    "table1": "baselines",
    "table4": "supervision",
    "table5": "channels",
    "convergence": "convergence",
    "nested": "nested",
    "guidance": "guidance",
}
ALIASES = {"baselines": "table1", "supervision": "table4", "channels": "table5"}
EXPERIMENT_CHOICES = (*EXPERIMENTS, *ALIASES)
_REPORT_NAMES = {method: name for name, method in EXPERIMENTS.items()}


def resolve_experiment(name: str) -> str:
    """Map an experiment name or alias to its experiment name."""
    name = ALIASES.get(name, name)
    if name not in EXPERIMENTS:
        raise ArgumentError(f"unknown experiment '{name}'; choose from {', '.join(EXPERIMENT_CHOICES)}")
    return name


def _row(label: str, report: MetricsReport, **extra) -> dict:
    row = {"method": label, **extra}
    for metric in METRIC_FIELDS:
        row[metric] = report.mean(metric)
        row[f"{metric}_std"] = report.std(metric)
    return row


def write_csv(path: Path, rows: List[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


class Reproducer:
    def __init__(self, pipeline: Pipeline, runs: Optional[int] = None):
        self.pipeline = pipeline
        self.config = pipeline.config
        self.runs = runs or self.config.eval.runs
        self._truth = None
        self._truth_features = None

    def _ensure_truth(self):
        if self._truth is None:
            self._truth = self.pipeline.evaluation_set()
            self._truth_features = frame_features(
                self._truth.future_frames, self.pipeline._ensure_encoder(),
                self.pipeline._ensure_pca(), self.config.world.workers,
            )
        return self._truth, self._truth_features

    def stage2(self, seed: Optional[int] = None, denoiser: Optional[dict] = None, **changes) -> DiffusionConfig:
        base = self.config.stage2
        if seed is None:
            seed = self.config.reproduce.seeds[0]
        den = dataclasses.replace(base.denoiser, seed=seed, **(denoiser or {}))
        cfg = dataclasses.replace(base, denoiser=den, seed=seed, **changes)
        cfg.validate()
        return cfg

    def arm(self, name: str, stage2: DiffusionConfig, **train_kwargs) -> SemanticDiT:
        """Reuse the arm's checkpoint when its Stage-2 config and upstream artifacts are unchanged."""
        path = self.pipeline.ledger.stage2_path(name)
        if path.exists() and not train_kwargs:
            self.pipeline.ledger.verify(path, "train-stage2")
            current = self.pipeline.fingerprints()
            model, stored, prints = load_denoiser(path)
            keys = ("pca", "codec", "stage1") if uses_predictions(stage2) else ("pca", "codec")
            same_inputs = all(prints.get(k) == current.get(k) for k in keys)
            if same_inputs and dataclasses.asdict(stored) == dataclasses.asdict(stage2):
                logger.info(f"Reusing Stage-2 arm '{name}' from {path}")
                return model
        return self.pipeline.train_stage2(name, stage2, **train_kwargs)

    def evaluate(self, model: SemanticDiT, method: str, runs: Optional[int] = None,
                 **kwargs) -> MetricsReport:
        truth, truth_features = self._ensure_truth()
        return self.pipeline.evaluate_model(
            model, method, runs=runs or self.runs, truth=truth, truth_features=truth_features,
            **kwargs,
        )

    def references(self) -> List[dict]:
        if not self.config.eval.reference_rows:
            return []
        truth, truth_features = self._ensure_truth()
        return [_row(r.method, r, reference=True)
                for r in self.pipeline.reference_reports(truth, truth_features, self.runs)]

    def _finish(self, method: str, rows: List[dict], **summary) -> dict:
        name = _REPORT_NAMES[method]
        report = {"experiment": name, "runs": self.runs, "rows": rows, **summary}
        ledger = self.pipeline.ledger
        ledger.write_report(name, report)
        write_csv(ledger.reports_dir / f"{name}.csv", rows)
        logger.info(f"Wrote {name} report to {ledger.reports_dir}")
        return report

    # Experiments ------------------------------------------------------------

    def baselines(self) -> dict:
        """Unconditioned baseline, a larger unconditioned baseline, and the full model."""
        layers = self.config.stage2.denoiser.layers
        arms = {
            "baseline": self.stage2(conditioning=False),
            "baseline_large": self.stage2(conditioning=False, denoiser={"layers": layers + 2}),
            "full": self.stage2(),
        }
        reports = {name: self.evaluate(self.arm(f"baselines_{name}", cfg), name)
                   for name, cfg in arms.items()}
        base = reports["baseline"]
        rows = [_row(n, r) for n, r in reports.items()]
        for row, report in zip(rows, reports.values()):
            row["delta_miou_all"] = report.mean("miou_all") - base.mean("miou_all")
            row["delta_ffd"] = report.mean("ffd") - base.mean("ffd")
        return self._finish("baselines", rows + self.references())

    def nested(self) -> dict:
        """Fixed (all channels every step) vs nested-dropout training, predicted features."""
        nested = self.config.stage2.nested_dropout
        arms = {
            "fixed": self.stage2(nested_dropout=dataclasses.replace(nested, enabled=False)),
            "nested": self.stage2(nested_dropout=dataclasses.replace(nested, enabled=True)),
        }
        rows = [_row(name, self.evaluate(self.arm(f"nested_{name}", cfg), name,
                                         feature_source="predicted"))
                for name, cfg in arms.items()]
        return self._finish("nested", rows + self.references())

    def supervision(self) -> dict:
        """Ground-truth-only, predicted-only and mixed 90/10 supervision."""
        policy = self.config.stage2.mixed_supervision
        arms = {
            "ground_truth": 0.0,
            "predicted": 1.0,
            "mixed": policy.p_predicted if 0 < policy.p_predicted < 1 else 0.1,
        }
        rows = []
        for name, p in arms.items():
            cfg = self.stage2(mixed_supervision=dataclasses.replace(policy, p_predicted=p))
            model = self.arm(f"supervision_{name}", cfg)
            rows.append(_row(name, self.evaluate(model, name, feature_source="predicted"),
                             p_predicted=p))
        return self._finish("supervision", rows + self.references())

    def _nested_model(self) -> SemanticDiT:
        nested = dataclasses.replace(self.config.stage2.nested_dropout, enabled=True)
        return self.arm("nested", self.stage2(nested_dropout=nested))

    def channels(self) -> dict:
        """Inference-time channel truncation of a nested-dropout model."""
        model = self._nested_model()
        rows = []
        for c in self.config.stage2.nested_dropout.channel_set:
            rows.append(_row(f"c={c}", self.evaluate(model, f"c={c}", inference_channels=c,
                                                     guidance=GuidanceConfig(w=0.0)),
                             inference_channels=c))
        return self._finish("channels", rows + self.references())

    def guidance(self) -> dict:
        """Sweep w at the configured coarse_c, then coarse_c at a fixed w."""
        model = self._nested_model()
        repro, g = self.config.reproduce, self.config.guidance
        channel_set = self.config.stage2.nested_dropout.channel_set
        rows = []
        for w in repro.guidance_weights:
            setting = GuidanceConfig(w=w, coarse_c=g.coarse_c)
            rows.append(_row(f"w={w}", self.evaluate(model, f"w={w}", guidance=setting),
                             sweep="w", w=w, coarse_c=g.coarse_c))
        for c in channel_set[:-1]:
            setting = GuidanceConfig(w=repro.guidance_fixed_w, coarse_c=c)
            rows.append(_row(f"c={c}", self.evaluate(model, f"c={c}", guidance=setting),
                             sweep="coarse_c", w=repro.guidance_fixed_w, coarse_c=c))
        return self._finish("guidance", rows)

    def convergence(self) -> dict:
        """Baseline and full model under a constant learning rate, evaluated at fixed steps."""
        repro = self.config.reproduce
        curves: List[dict] = []
        speedups: Dict[str, Optional[float]] = {}
        for seed in repro.seeds:
            per_arm: Dict[str, List[dict]] = {}
            for name, conditioning in (("baseline", False), ("full", True)):
                cfg = self.stage2(seed=seed, conditioning=conditioning, lr_schedule="constant",
                                  steps=repro.convergence_steps)
                points: List[dict] = []
                self.arm(f"convergence_{name}_s{seed}", cfg,
                         on_eval=self._curve_recorder(name, seed, points),
                         eval_every=repro.convergence_eval_every)
                per_arm[name] = points
                curves += points
            speedups[str(seed)] = steps_to_match(per_arm["baseline"], per_arm["full"])
        ratios = [v for v in speedups.values() if v is not None]
        return self._finish(
            "convergence", curves, steps_fraction=speedups,
            seeds_within_70_percent=sum(r <= 0.7 for r in ratios),
        )

    def _curve_recorder(self, name: str, seed: int, points: List[dict]) -> Callable:
        def record(step: int, model: SemanticDiT) -> None:
            report = self.evaluate(model, name, runs=1)
            point = {"method": name, "seed": seed, "step": step,
                     "ffd": report.mean("ffd"), "miou_all": report.mean("miou_all")}
            points.append(point)
            self.pipeline.ledger.append_log({"stage": "eval", "arm": f"{name}_s{seed}", **point})
        return record

    def run(self, experiment: str) -> dict:
        return getattr(self, EXPERIMENTS[resolve_experiment(experiment)])()


def steps_to_match(baseline: List[dict], full: List[dict]) -> Optional[float]:
    """Fraction of the baseline's steps the full model needs to reach the baseline's final FFD."""
    if not baseline or not full:
        return None
    target = baseline[-1]["ffd"]
    total = baseline[-1]["step"]
    for point in full:
        if np.isfinite(point["ffd"]) and point["ffd"] <= target:
            return point["step"] / total
    return None


__all__ = [
    "ALIASES", "EXPERIMENTS", "EXPERIMENT_CHOICES", "Reproducer", "resolve_experiment",
    "steps_to_match", "write_csv",
]
