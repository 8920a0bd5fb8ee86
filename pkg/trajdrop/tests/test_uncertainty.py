import numpy as np
import pytest

from trajdrop.errors import DimensionError, NumericError, ParameterError
from trajdrop.models import build_graph, predict
from trajdrop.objects import ForwardMode, GaussianState, NormalizationStats
from trajdrop.uncertainty import (
    TrajectoryDistribution,
    covariance_profile,
    distribution_frame,
    distribution_stats,
    fit_bivariate_gaussian,
    mc_sample,
    mc_sample_batch,
    mean_sigma,
    profile_frame,
    samples_frame,
)


@pytest.fixture
def graph():
    return build_graph("cnn1d", 8, 5, 0.2, seed=4, filters=(8, 6, 6), kernel_size=3)


@pytest.fixture
def stats():
    return NormalizationStats(mean=[1.0, -2.0, 0.5, 0.1], std=[3.0, 2.0, 1.0, 0.8])


@pytest.fixture
def history():
    return np.random.default_rng(2).normal(size=(8, 4))


# --------------------------------
# Bivariate Gaussian fit
# --------------------------------
def test_unit_square_corners():
    state = fit_bivariate_gaussian(np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float))
    assert state.mean == (0.0, 0.0)
    assert state.covariance == ((1.0, 0.0), (0.0, 1.0))


def test_collinear_points():
    state = fit_bivariate_gaussian(np.array([[0.0, 2.0], [1.0, 2.0], [5.0, 2.0]]))
    assert state.covariance[1][1] == 0.0
    assert state.cov_xy == 0.0


def test_identical_points_have_zero_covariance():
    state = fit_bivariate_gaussian(np.tile([[0.1, 0.7]], (30, 1)))
    assert state.mean == (0.1, 0.7)
    assert state.covariance == ((0.0, 0.0), (0.0, 0.0))


def test_fit_matches_population_covariance():
    points = np.random.default_rng(1).normal(size=(50, 2)) @ np.array([[2.0, 0.5], [0.0, 1.0]])
    state = fit_bivariate_gaussian(points)
    reference = np.cov(points.T, bias=True)
    assert np.allclose(state.covariance, reference, rtol=0, atol=1e-12)
    assert np.allclose(state.mean, points.mean(axis=0), rtol=0, atol=1e-12)


def test_fit_needs_two_points():
    with pytest.raises(ParameterError):
        fit_bivariate_gaussian(np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        fit_bivariate_gaussian(np.zeros((4, 3)))


def test_gaussian_state_rejects_invalid_covariance():
    with pytest.raises(ValueError):
        GaussianState(mean=(0.0, 0.0), covariance=((1.0, 0.2), (0.3, 1.0)))
    with pytest.raises(ValueError):
        GaussianState(mean=(0.0, 0.0), covariance=((1.0, 2.0), (2.0, 1.0)))


# --------------------------------
# Distribution statistics
# --------------------------------
def test_equal_samples_have_zero_variance():
    dist = TrajectoryDistribution.from_samples(np.tile([[[1.5, -0.3]] * 4], (6, 1, 1)), 0.2)
    stats = distribution_stats(dist)
    assert np.array_equal(stats.variance, np.zeros((4, 2)))
    assert np.array_equal(stats.mean, np.tile([1.5, -0.3], (4, 1)))


def test_two_point_distribution():
    samples = np.array([[[0.0, 0.0]], [[2.0, 2.0]]])
    stats = distribution_stats(TrajectoryDistribution.from_samples(samples, 0.2))
    assert stats.mean.tolist() == [[1.0, 1.0]]
    assert stats.variance.tolist() == [[1.0, 1.0]]


def test_stats_match_two_pass_reference():
    samples = np.random.default_rng(3).normal(size=(30, 12, 2))
    dist = TrajectoryDistribution.from_samples(samples, 0.2)
    stats = distribution_stats(dist)
    mean = samples.sum(axis=0) / 30
    variance = ((samples - mean) ** 2).sum(axis=0) / 30
    assert np.allclose(stats.mean, mean, rtol=0, atol=1e-12)
    assert np.allclose(stats.variance, variance, rtol=0, atol=1e-12)
    diagonal = np.array([(s.covariance[0][0], s.covariance[1][1]) for s in dist.per_step])
    assert np.array_equal(diagonal, stats.variance)


def test_single_sample_distribution():
    dist = TrajectoryDistribution.from_samples(np.ones((1, 3, 2)), 0.0)
    assert np.array_equal(dist.mean_path(), np.ones((3, 2)))
    with pytest.raises(ParameterError):
        distribution_stats(dist)
    with pytest.raises(ParameterError):
        dist.sigma_path()


def test_bad_sample_shape():
    with pytest.raises(DimensionError):
        TrajectoryDistribution.from_samples(np.zeros((3, 4)), 0.2)


# --------------------------------
# Monte-Carlo sampling
# --------------------------------
def test_zero_dropout_collapses_to_point(graph, stats, history):
    dist = mc_sample(graph, history, 10, 0.0, seed=1, stats=stats)
    anchors = stats.anchors(history[None])
    point = predict(graph, stats.encode(history[None], anchors), ForwardMode.deterministic())
    expected = stats.decode_positions(point[..., :2], anchors)[0]
    for n in range(10):
        assert np.array_equal(dist.samples[n], expected)
    assert np.array_equal(distribution_stats(dist).variance, np.zeros((5, 2)))


def test_forecast_moves_with_the_history(graph, stats, history):
    shift = np.array([12.5, -7.25, 0.0, 0.0])
    base = mc_sample(graph, history, 4, 0.3, seed=3, stats=stats)
    moved = mc_sample(graph, history + shift, 4, 0.3, seed=3, stats=stats)
    assert np.allclose(moved.samples, base.samples + shift[:2], rtol=0, atol=1e-9)


def test_absolute_frame_ignores_anchor(graph, history):
    absolute = NormalizationStats(
        mean=[1.0, -2.0, 0.5, 0.1], std=[3.0, 2.0, 1.0, 0.8], relative=False
    )
    assert np.array_equal(absolute.anchors(history[None]), np.zeros((1, 2)))
    dist = mc_sample(graph, history, 2, 0.0, stats=absolute)
    point = predict(graph, absolute.apply(history)[None], ForwardMode.deterministic())
    assert np.array_equal(dist.samples[0], absolute.invert_positions(point[0, :, :2]))


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_history_is_rejected(graph, stats, history, bad):
    history[3, 0] = bad
    with pytest.raises(NumericError):
        mc_sample(graph, history, 5, 0.2, stats=stats)
    with pytest.raises(NumericError):
        predict(graph, history[None], ForwardMode.deterministic())


def test_same_seed_same_samples(graph, stats, history):
    a = mc_sample(graph, history, 8, 0.3, seed=5, stats=stats)
    b = mc_sample(graph, history, 8, 0.3, seed=5, stats=stats)
    assert np.array_equal(a.samples, b.samples)


def test_dropout_spreads_samples(graph, stats, history):
    dist = mc_sample(graph, history, 30, 0.3, seed=5, stats=stats)
    sigma_x, sigma_y = mean_sigma(dist)
    assert sigma_x > 0 and sigma_y > 0


def test_batch_matches_single(graph, stats):
    histories = np.random.default_rng(4).normal(size=(3, 8, 4))
    batch = mc_sample_batch(graph, histories, 6, 0.3, seed=2, stats=stats)
    assert len(batch) == 3
    assert batch[0].samples.shape == (6, 5, 2)
    single = mc_sample(graph, histories[1], 6, 0.0, seed=2, stats=stats)
    zero_batch = mc_sample_batch(graph, histories, 6, 0.0, seed=2, stats=stats)
    assert np.allclose(single.samples, zero_batch[1].samples, rtol=0, atol=1e-12)


def test_mc_sample_rejects_bad_arguments(graph, history):
    with pytest.raises(ParameterError):
        mc_sample(graph, history, 0, 0.2)
    with pytest.raises(ParameterError):
        mc_sample(graph, history, 5, 1.0)
    with pytest.raises(DimensionError):
        mc_sample(graph, history[:4], 5, 0.2)


def test_sigma_estimate_stabilizes(graph, stats, history):
    small = mean_sigma(mc_sample(graph, history, 1000, 0.3, seed=1, stats=stats))
    large = mean_sigma(mc_sample(graph, history, 5000, 0.3, seed=2, stats=stats))
    for a, b in zip(small, large):
        assert abs(a - b) < 0.1 * b


# --------------------------------
# Covariance profile and tables
# --------------------------------
def cross_cloud(x_extent, y_extent, steps=3):
    points = np.array([[x_extent, 0.0], [-x_extent, 0.0], [0.0, y_extent], [0.0, -y_extent]])
    return TrajectoryDistribution.from_samples(np.repeat(points[:, None, :], steps, axis=1), 0.2)


def test_isotropic_cloud_has_no_dominant_axis():
    rows = covariance_profile(cross_cloud(1.0, 1.0))
    assert [row.dominant for row in rows] == [None, None, None]
    assert rows[0].sigma_xx == rows[0].sigma_yy == 0.5


def test_stretched_cloud_is_x_dominant():
    rows = covariance_profile(cross_cloud(3.0, 1.0))
    assert rows[0].sigma_xx == 4.5
    assert rows[0].sigma_yy == 0.5
    assert all(row.dominant == "x" for row in rows)
    assert covariance_profile(cross_cloud(1.0, 3.0))[0].dominant == "y"


def test_degenerate_cloud_has_no_dominant_axis():
    dist = TrajectoryDistribution.from_samples(np.zeros((4, 2, 2)), 0.2)
    assert [row.dominant for row in covariance_profile(dist)] == [None, None]


def test_frames():
    dist = cross_cloud(3.0, 1.0, steps=2)
    frame = distribution_frame(dist)
    assert list(frame.columns) == ["step", "mu_x", "mu_y", "sigma_x", "sigma_y", "cov_xy"]
    assert frame["step"].tolist() == [1, 2]
    assert frame["sigma_x"].iloc[0] == pytest.approx(np.sqrt(4.5))
    samples = samples_frame(dist)
    assert len(samples) == 4 * 2
    assert samples.iloc[1].tolist() == [1, 2, 3.0, 0.0]
    profile = profile_frame(covariance_profile(dist))
    assert profile["dominant"].tolist() == ["x", "x"]
