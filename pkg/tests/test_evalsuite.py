"""Tests for the segmentation probe, the metrics and the evaluation report."""

from __future__ import annotations

import math

import numpy as np
import pytest

from vidsem.evalsuite import (
    METRIC_FIELDS,
    EvaluationSet,
    MetricsReport,
    ProbeHead,
    downsample_masks,
    evaluate_prediction,
    frame_features,
    frechet_feature_distance,
    ground_truth_predictor,
    miou,
    moving_classes,
    noise_predictor,
    psnr,
    score_predictions,
    train_probe,
)
from vidsem.exceptions import ArgumentError, FingerprintMismatchError, FitError, ShapeError
from vidsem.features import encode_frames, fit_pca
from vidsem.synthworld import generate_clip


def _brute_force_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    scores = []
    for c in range(num_classes):
        in_gt, in_pred = gt == c, pred == c
        if not in_gt.any():
            continue
        scores.append((in_gt & in_pred).sum() / (in_gt | in_pred).sum())
    return float(np.mean(scores))


@pytest.fixture
def evaluation(world, encoder):
    """Evaluation set over four clips with a PCA fit on them and a constant probe."""
    clips = [generate_clip(world, i) for i in range(4)]
    M = world.context_frames
    truth = EvaluationSet(
        future_frames=np.stack([c.frames[M:] for c in clips]),
        future_masks=np.stack([c.masks[M:] for c in clips]),
        context_frames=np.stack([c.frames[:M] for c in clips]),
    )
    pca = fit_pca([encode_frames(c.frames, encoder) for c in clips], 8)
    bias = np.zeros(world.num_classes)
    bias[0] = 1.0
    probe = ProbeHead(weights=np.zeros((8, world.num_classes)), bias=bias, trained_on=pca.fingerprint())
    return truth, pca, probe


def test_downsample_masks_majority():
    masks = np.array([
        [1, 1, 2, 2],
        [1, 0, 1, 2],
        [0, 0, 3, 3],
        [0, 0, 3, 3],
    ], dtype=np.uint8)
    assert downsample_masks(masks, 2).tolist() == [[1, 2], [0, 3]]
    # ties go to the lower class id
    assert downsample_masks(np.array([[1, 1], [2, 2]], dtype=np.uint8), 2).tolist() == [[1]]
    with pytest.raises(ShapeError):
        downsample_masks(np.zeros((3, 4), dtype=np.uint8), 2)


def test_miou_extremes():
    gt = np.random.default_rng(0).integers(0, 4, size=(8, 8))
    assert miou(gt, gt, 4)[1] == 1.0
    assert miou((gt + 1) % 4, gt, 4)[1] == 0.0


def test_miou_half_swapped():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 0, 1])
    iou, mean = miou(pred, gt, 2)
    assert np.allclose(iou, [1 / 3, 1 / 3])
    assert mean == pytest.approx(1 / 3)


def test_miou_matches_set_definition():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        gt = rng.integers(0, 5, size=(16, 16))
        pred = np.where(rng.random((16, 16)) < 0.6, gt, rng.integers(0, 5, size=(16, 16)))
        assert miou(pred, gt, 5)[1] == pytest.approx(_brute_force_miou(pred, gt, 5))


def test_miou_invariant_to_relabelling():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 5, size=(16, 16))
    pred = rng.integers(0, 5, size=(16, 16))
    perm = np.array([3, 0, 4, 1, 2])
    assert miou(perm[pred], perm[gt], 5)[1] == pytest.approx(miou(pred, gt, 5)[1])


def test_miou_skips_classes_absent_from_ground_truth():
    gt = np.zeros((4, 4), dtype=np.uint8)
    pred = gt.copy()
    pred[0, 0] = 1
    iou, mean = miou(pred, gt, 3)
    assert iou[1] == 0.0 and math.isnan(iou[2])
    assert mean == pytest.approx(15 / 16)


def test_miou_over_moving_classes():
    gt = np.array([0, 0, 1, 2])
    pred = np.array([1, 1, 1, 2])
    assert moving_classes(3) == [1, 2]
    assert miou(pred, gt, 3, moving_classes(3))[1] == pytest.approx((1 / 3 + 1) / 2)


def test_miou_rejects_bad_input():
    with pytest.raises(ShapeError):
        miou(np.zeros((2, 2)), np.zeros((2, 3)), 2)
    with pytest.raises(ArgumentError):
        miou(np.full((2, 2), 3), np.zeros((2, 2)), 2)


def test_ffd_of_identical_sets():
    X = np.random.default_rng(3).normal(size=(5000, 4))
    assert frechet_feature_distance(X, X) < 1e-6


def test_ffd_is_symmetric():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(2000, 4))
    b = rng.normal(size=(2000, 4)) * 1.5 + 0.3
    assert frechet_feature_distance(a, b) == pytest.approx(frechet_feature_distance(b, a), rel=1e-6)


def test_ffd_of_shifted_gaussians():
    rng = np.random.default_rng(5)
    delta = np.array([1.0, 0.0, 0.0, 0.0])
    a = rng.normal(size=(100_000, 4))
    assert frechet_feature_distance(a, a + delta) == pytest.approx(1.0, rel=1e-6)
    b = rng.normal(size=(100_000, 4)) + delta
    assert frechet_feature_distance(a, b) == pytest.approx(1.0, rel=0.05)


def test_ffd_requires_enough_samples():
    with pytest.raises(ArgumentError):
        frechet_feature_distance(np.zeros((4, 4)), np.zeros((10, 4)))
    with pytest.raises(ShapeError):
        frechet_feature_distance(np.zeros((10, 4)), np.zeros((10, 3)))


def test_ffd_on_rank_deficient_features():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(500, 4))
    a[:, 3] = 0.0
    b = rng.normal(size=(500, 4))
    value = frechet_feature_distance(a, b)
    assert math.isfinite(value) and value >= 0.0


def test_psnr():
    x = np.random.default_rng(7).random((2, 4, 4, 3))
    assert psnr(x, x) == math.inf
    assert psnr(x + 0.1, x) == pytest.approx(20.0)
    with pytest.raises(ShapeError):
        psnr(x, x[:1])


def test_probe_separates_clusters():
    rng = np.random.default_rng(8)
    centers = np.array([[5.0, 0, 0, 0], [0, 5.0, 0, 0], [0, 0, 5.0, 0]])
    labels = rng.integers(0, 3, size=600)
    features = centers[labels] + rng.normal(scale=0.5, size=(600, 4))
    probe = train_probe(features, labels, 3, max_iter=50)
    assert (probe.predict(features) == labels).mean() > 0.99

    again = train_probe(features, labels, 3, max_iter=50)
    assert np.array_equal(probe.weights, again.weights)
    assert ProbeHead.from_dict(probe.to_dict()).fingerprint() == probe.fingerprint()


def test_probe_needs_two_classes():
    with pytest.raises(FitError):
        train_probe(np.random.default_rng(9).normal(size=(20, 4)), np.ones(20), 3)
    with pytest.raises(ShapeError):
        train_probe(np.zeros((20, 4)), np.zeros(19), 3)


def test_probe_checks_channels():
    probe = ProbeHead(weights=np.zeros((4, 2)), bias=np.zeros(2))
    with pytest.raises(ShapeError):
        probe.predict(np.zeros((3, 5)))


def test_report_serializes_infinite_psnr():
    runs = [dict.fromkeys(METRIC_FIELDS, 0.5) for _ in range(2)]
    for r in runs:
        r["psnr"] = math.inf
    report = MetricsReport(method="oracle", runs=runs)
    data = report.to_dict()
    assert data["mean"]["psnr"] == "inf"
    assert data["std"]["psnr"] == 0.0
    assert data["mean"]["ffd"] == 0.5
    assert data["runs"][0]["psnr"] == "inf"
    assert set(data["frame_sets"]) == set(METRIC_FIELDS)


def test_frame_features_workers_agree(evaluation, encoder):
    truth, pca, _ = evaluation
    serial = frame_features(truth.future_frames, encoder, pca, workers=1)
    pooled = frame_features(truth.future_frames, encoder, pca, workers=3)
    assert serial.shape == (4, 4, 4, 4, 8)
    assert np.array_equal(serial, pooled)


def test_ground_truth_predictor_scores_perfectly(evaluation, encoder):
    truth, pca, probe = evaluation
    report = evaluate_prediction("ground_truth", ground_truth_predictor(truth), truth, encoder, pca,
                                 probe, runs=2, batch_size=3)
    assert len(report.runs) == 2
    assert report.evaluation_frame == 2
    for run in report.runs:
        assert run["psnr"] == math.inf
        assert run["ffd"] < 1e-6
        assert set(run) == set(METRIC_FIELDS)


def test_noise_predictor_scores_worse(evaluation, encoder):
    truth, pca, probe = evaluation
    report = evaluate_prediction("noise", noise_predictor(truth, seed=0), truth, encoder, pca,
                                 probe, runs=2, batch_size=3)
    first, second = report.runs
    assert math.isfinite(first["psnr"]) and first["psnr"] < 20.0
    assert first["ffd"] > 0.0
    assert first["psnr"] != second["psnr"]

    again = evaluate_prediction("noise", noise_predictor(truth, seed=0), truth, encoder, pca,
                                probe, runs=1, batch_size=2)
    assert again.runs[0] == first


def test_score_rejects_foreign_probe(evaluation, encoder):
    truth, pca, probe = evaluation
    foreign = ProbeHead(weights=probe.weights, bias=probe.bias, trained_on="other")
    features = frame_features(truth.future_frames, encoder, pca)
    with pytest.raises(FingerprintMismatchError):
        score_predictions(truth.future_frames, truth, features, encoder, pca, foreign)
    with pytest.raises(ShapeError):
        score_predictions(truth.future_frames[:2], truth, features, encoder, pca, probe)
    with pytest.raises(ArgumentError):
        evaluate_prediction("x", ground_truth_predictor(truth), truth, encoder, pca, probe, runs=0)
