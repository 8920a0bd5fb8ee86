"""Monte-Carlo dropout trajectory distributions and their Gaussian summaries.

Variances use the 1/N convention throughout, and every statistic is taken
in meters after the normalization has been inverted.
"""

import logging
from typing import List, Literal, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from trajdrop.diffcore import Array, as_buffer, spawn_seeds
from trajdrop.errors import DimensionError, ParameterError
from trajdrop.models import ModelGraph, predict
from trajdrop.objects import ForwardMode, GaussianState, NormalizationStats, check_probability

DOMINANCE_RATIO = 2.0


class TrajectoryDistribution(BaseModel):
    """N sampled (x, y) trajectories of F steps and their per-step Gaussians."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray = Field(..., description="[N, F, 2] positions in meters")
    p: float = Field(..., ge=0, lt=1)
    per_step: List[GaussianState] = Field(default_factory=list)

    @classmethod
    def from_samples(cls, samples: Array, p: float) -> "TrajectoryDistribution":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 3 or samples.shape[2] != 2:
            raise DimensionError(f"samples must be [N, F, 2], got {samples.shape}")
        per_step = []
        if samples.shape[0] >= 2:
            per_step = [fit_bivariate_gaussian(samples[:, t, :]) for t in range(samples.shape[1])]
        return cls(samples=samples, p=p, per_step=per_step)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    def mean_path(self) -> Array:
        """[F, 2] per-step mean; the single sample itself when N == 1."""
        if self.n == 1:
            return self.samples[0].copy()
        if not self.per_step:
            raise ParameterError("distribution statistics have not been computed")
        return np.array([state.mean for state in self.per_step])

    def sigma_path(self) -> Array:
        if not self.per_step:
            raise ParameterError(f"sigma is undefined for N={self.n} samples")
        return np.array([state.sigma for state in self.per_step])


def fit_bivariate_gaussian(points: Array) -> GaussianState:
    """Mean and 1/N covariance of an [N, 2] point cloud."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"point cloud must be [N, 2], got {points.shape}")
    if points.shape[0] < 2:
        raise ParameterError(f"need at least 2 points for a covariance, got {points.shape[0]}")
    # Shift by the first point so identical samples give an exact mean
    reference = points[0]
    mean = reference + np.mean(points - reference, axis=0)
    centered = points - mean
    sxx = float(np.mean(centered[:, 0] * centered[:, 0]))
    syy = float(np.mean(centered[:, 1] * centered[:, 1]))
    sxy = float(np.mean(centered[:, 0] * centered[:, 1]))
    return GaussianState(
        mean=(float(mean[0]), float(mean[1])),
        covariance=((sxx, sxy), (sxy, syy)),
    )


class DistributionStats(NamedTuple):
    mean: Array  # [F, 2]
    variance: Array  # [F, 2]


def distribution_stats(dist: TrajectoryDistribution) -> DistributionStats:
    """Per-step, per-axis mean and 1/N variance; fills `dist.per_step`."""
    if dist.n < 2:
        raise ParameterError(f"variance is undefined for N={dist.n} samples")
    if len(dist.per_step) != dist.horizon:
        dist.per_step = [fit_bivariate_gaussian(dist.samples[:, t, :]) for t in range(dist.horizon)]
    mean = np.array([state.mean for state in dist.per_step])
    variance = np.array(
        [(state.covariance[0][0], state.covariance[1][1]) for state in dist.per_step]
    )
    return DistributionStats(mean, variance)


def mc_sample_batch(
    graph: ModelGraph,
    histories: Array,
    n_samples: int,
    p: float,
    seed: int = 0,
    stats: Optional[NormalizationStats] = None,
) -> List[TrajectoryDistribution]:
    """N stochastic passes over a batch of [B, T, 4] histories given in meters.

    Pass n draws its masks from the n-th stream derived from `seed`. Without
    `stats` the histories are fed as they are and the samples stay in
    network units.
    """
    if n_samples < 1:
        raise ParameterError(f"N must be >= 1, got {n_samples}")
    check_probability(p)
    histories = as_buffer(histories, "history")
    if stats is not None:
        anchors = stats.anchors(histories)
        inputs = stats.encode(histories, anchors)
    else:
        inputs = histories
    passes = []
    for pass_seed in spawn_seeds(seed, n_samples):
        mode = ForwardMode.stochastic(p, pass_seed)
        out = predict(graph, inputs, mode)[..., :2]
        passes.append(stats.decode_positions(out, anchors) if stats is not None else out)
    stacked = np.stack(passes, axis=1)
    logging.debug(f"mc sampled {stacked.shape[0]} histories x {n_samples} passes at p={p}")
    return [TrajectoryDistribution.from_samples(stacked[b], p) for b in range(len(stacked))]


def mc_sample(
    graph: ModelGraph,
    history: Array,
    n_samples: int,
    p: float,
    seed: int = 0,
    stats: Optional[NormalizationStats] = None,
) -> TrajectoryDistribution:
    """Distribution for a single [T, 4] history in meters."""
    history = np.asarray(history, dtype=np.float64)
    return mc_sample_batch(graph, history[None], n_samples, p, seed, stats)[0]


class CovarianceRow(NamedTuple):
    step: int
    sigma_xx: float
    sigma_yy: float
    sigma_xy: float
    dominant: Optional[Literal["x", "y"]]


def covariance_profile(
    dist: TrajectoryDistribution, ratio: float = DOMINANCE_RATIO
) -> List[CovarianceRow]:
    """Per-step covariance terms, flagging an axis whose variance is `ratio` times the other."""
    distribution_stats(dist)
    rows = []
    for step, state in enumerate(dist.per_step, start=1):
        sxx, syy, sxy = state.covariance[0][0], state.covariance[1][1], state.cov_xy
        dominant = None
        if sxx > 0 and sxx >= ratio * syy:
            dominant = "x"
        elif syy > 0 and syy >= ratio * sxx:
            dominant = "y"
        rows.append(CovarianceRow(step, sxx, syy, sxy, dominant))
    return rows


def mean_sigma(dist: TrajectoryDistribution) -> Tuple[float, float]:
    sigma = dist.sigma_path()
    return float(sigma[:, 0].mean()), float(sigma[:, 1].mean())


# --------------------------------
# CSV tables
# --------------------------------
def distribution_frame(dist: TrajectoryDistribution) -> pd.DataFrame:
    distribution_stats(dist)
    return pd.DataFrame(
        [
            {
                "step": step,
                "mu_x": state.mean[0],
                "mu_y": state.mean[1],
                "sigma_x": state.sigma[0],
                "sigma_y": state.sigma[1],
                "cov_xy": state.cov_xy,
            }
            for step, state in enumerate(dist.per_step, start=1)
        ],
        columns=["step", "mu_x", "mu_y", "sigma_x", "sigma_y", "cov_xy"],
    )


def samples_frame(dist: TrajectoryDistribution) -> pd.DataFrame:
    n, steps, _ = dist.samples.shape
    return pd.DataFrame(
        {
            "pass": np.repeat(np.arange(1, n + 1), steps),
            "step": np.tile(np.arange(1, steps + 1), n),
            "x": dist.samples[:, :, 0].reshape(-1),
            "y": dist.samples[:, :, 1].reshape(-1),
        }
    )


def profile_frame(rows: List[CovarianceRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [row._asdict() for row in rows],
        columns=["step", "sigma_xx", "sigma_yy", "sigma_xy", "dominant"],
    )
