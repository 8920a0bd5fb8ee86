import numpy as np
import pytest

from trajdrop.errors import DataError, DimensionError, ParameterError
from trajdrop.metrics import (
    REPORT_COLUMNS,
    ade,
    aggregate,
    confidence_score,
    confidence_score_arrays,
    fde,
    improvement_percent,
    reports_frame,
    step_errors,
    trajectory_metrics,
)
from trajdrop.objects import TrajectoryMetrics
from trajdrop.uncertainty import TrajectoryDistribution


@pytest.fixture
def paths():
    rng = np.random.default_rng(10)
    return rng.normal(size=(12, 2)), rng.normal(size=(12, 2))


def test_identical_paths_have_zero_error(paths):
    predicted, _ = paths
    assert ade(predicted, predicted) == 0.0
    assert fde(predicted, predicted) == 0.0


def test_unit_offset():
    truth = np.zeros((12, 2))
    predicted = truth + np.array([1.0, 0.0])
    assert ade(predicted, truth) == 1.0
    assert fde(predicted, truth) == 1.0


def test_fde_three_four_five():
    assert fde(np.zeros((1, 2)), np.array([[3.0, 4.0]])) == 5.0


def test_ade_matches_loop(paths):
    predicted, truth = paths
    total = 0.0
    for (px, py), (tx, ty) in zip(predicted, truth):
        total += ((px - tx) ** 2 + (py - ty) ** 2) ** 0.5
    assert ade(predicted, truth) == pytest.approx(total / 12, rel=1e-12)


def test_error_bounds(paths):
    predicted, truth = paths
    errors = step_errors(predicted, truth)
    assert errors.min() <= ade(predicted, truth) <= errors.max()
    assert fde(predicted, truth) == errors[-1]


def test_fde_ignores_earlier_steps(paths):
    predicted, truth = paths
    moved = predicted.copy()
    moved[:-1] += 5.0
    assert fde(moved, truth) == fde(predicted, truth)


def test_shape_mismatch(paths):
    predicted, truth = paths
    with pytest.raises(DimensionError):
        ade(predicted[:5], truth)
    with pytest.raises(DimensionError):
        fde(predicted, truth[:, :1])


# --------------------------------
# Confidence score
# --------------------------------
def test_truth_at_mean_scores_full():
    mean = np.zeros((12, 2))
    assert confidence_score_arrays(mean, np.full((12, 2), 0.1), mean) == (100.0, 100.0)


def test_partial_coverage_per_axis():
    mean, sigma = np.zeros((12, 2)), np.ones((12, 2))
    truth = np.zeros((12, 2))
    truth[:3, 0] = 3.0
    assert confidence_score_arrays(mean, sigma, truth) == (75.0, 100.0)


def test_two_sigma_boundary_is_outside():
    cs_x, _ = confidence_score_arrays(np.zeros((1, 2)), np.ones((1, 2)), np.array([[2.0, 0.0]]))
    assert cs_x == 0.0


def test_sigma_limits(paths):
    mean, truth = paths
    assert confidence_score_arrays(mean, np.full((12, 2), 1e9), truth) == (100.0, 100.0)
    assert confidence_score_arrays(mean, np.zeros((12, 2)), truth) == (0.0, 0.0)


def test_calibrated_gaussian_covers_two_sigma():
    rng = np.random.default_rng(0)
    mean = rng.normal(size=(12, 2))
    sigma = rng.uniform(0.2, 2.0, size=(12, 2))
    scores = [
        confidence_score_arrays(mean, sigma, mean + sigma * rng.normal(size=(12, 2)))
        for _ in range(10_000)
    ]
    cs_x, cs_y = np.mean(scores, axis=0)
    assert cs_x == pytest.approx(95.45, abs=1.0)
    assert cs_y == pytest.approx(95.45, abs=1.0)


def test_confidence_needs_spread():
    dist = TrajectoryDistribution.from_samples(np.zeros((1, 12, 2)), 0.2)
    with pytest.raises(ParameterError):
        confidence_score(dist, np.zeros((12, 2)))


def test_trajectory_metrics_point_forecast(paths):
    predicted, truth = paths
    metrics = trajectory_metrics(TrajectoryDistribution.from_samples(predicted[None], 0.0), truth)
    assert metrics.ade == ade(predicted, truth)
    assert metrics.fde == fde(predicted, truth)
    assert metrics.cs_x is None and metrics.cs_y is None


def test_trajectory_metrics_distribution(paths):
    predicted, truth = paths
    samples = np.stack([predicted - 0.1, predicted + 0.1])
    metrics = trajectory_metrics(TrajectoryDistribution.from_samples(samples, 0.2), truth)
    assert metrics.ade == pytest.approx(ade(predicted, truth), abs=1e-12)
    assert metrics.cs_x is not None


# --------------------------------
# Aggregation
# --------------------------------
def test_aggregate_single():
    report = aggregate([TrajectoryMetrics(ade=1.5, fde=2.0, cs_x=50.0, cs_y=75.0)], "cnn1d+mc", 0.2, 4.8, 30)
    assert (report.ade, report.fde, report.cs_x, report.cs_y) == (1.5, 2.0, 50.0, 75.0)
    assert report.n_traj == 1


def test_aggregate_mean():
    report = aggregate(
        [TrajectoryMetrics(ade=0.0, fde=0.0), TrajectoryMetrics(ade=2.0, fde=4.0)], "cnn1d", 0.0, 4.8, 1
    )
    assert report.ade == 1.0
    assert report.fde == 2.0
    assert report.cs_x is None


def test_aggregate_is_order_independent():
    rng = np.random.default_rng(1)
    metrics = [
        TrajectoryMetrics(ade=a, fde=f, cs_x=c, cs_y=100.0 - c)
        for a, f, c in zip(rng.uniform(0, 3, 50), rng.uniform(0, 5, 50), rng.uniform(0, 100, 50))
    ]
    forward = aggregate(metrics, "lstm_ed+mc", 0.2, 4.8, 30)
    for seed in range(5):
        order = np.random.default_rng(seed).permutation(50)
        shuffled = aggregate([metrics[i] for i in order], "lstm_ed+mc", 0.2, 4.8, 30)
        assert shuffled == forward


def test_aggregate_empty():
    with pytest.raises(DataError):
        aggregate([], "cnn1d", 0.2, 4.8, 30)


def test_improvement_percent():
    assert improvement_percent(2.0, 1.5) == 25.0
    assert improvement_percent(0.0, 1.0) == 0.0


def test_reports_frame():
    report = aggregate([TrajectoryMetrics(ade=1.0, fde=2.0)], "cnn1d", 0.0, 4.8, 1)
    frame = reports_frame([report])
    assert list(frame.columns) == REPORT_COLUMNS
    assert frame["model"].tolist() == ["cnn1d"]
