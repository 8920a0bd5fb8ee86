import math
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from trajdrop.diffcore import Array
from trajdrop.errors import DataError, DimensionError, ParameterError
from trajdrop.objects import EvaluationReport, TrajectoryMetrics
from trajdrop.uncertainty import TrajectoryDistribution

REPORT_COLUMNS = ["model", "p", "horizon_s", "ade", "fde", "cs_x", "cs_y", "n_traj", "n_mc"]


def _check_paths(predicted: Array, truth: Array) -> Tuple[Array, Array]:
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.ndim != 2 or predicted.shape[1] != 2:
        raise DimensionError(
            f"predicted {predicted.shape} and truth {truth.shape} must both be [F, 2]"
        )
    if len(predicted) == 0:
        raise ParameterError("trajectories are empty")
    return predicted, truth


def step_errors(predicted: Array, truth: Array) -> Array:
    predicted, truth = _check_paths(predicted, truth)
    return np.linalg.norm(predicted - truth, axis=1)


def ade(predicted: Array, truth: Array) -> float:
    """Mean Euclidean distance over all predicted steps."""
    return float(np.mean(step_errors(predicted, truth)))


def fde(predicted: Array, truth: Array) -> float:
    """Euclidean distance at the final step."""
    predicted, truth = _check_paths(predicted, truth)
    return float(np.linalg.norm(predicted[-1] - truth[-1]))


def confidence_score_arrays(mean: Array, sigma: Array, truth: Array) -> Tuple[float, float]:
    """Percent of steps whose truth lies strictly within 2 sigma, per axis."""
    mean, truth = _check_paths(mean, truth)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != mean.shape:
        raise DimensionError(f"sigma {sigma.shape} does not match mean {mean.shape}")
    inside = np.abs(truth - mean) < 2.0 * sigma
    steps = len(truth)
    return (
        100.0 * int(inside[:, 0].sum()) / steps,
        100.0 * int(inside[:, 1].sum()) / steps,
    )


def confidence_score(dist: TrajectoryDistribution, truth: Array) -> Tuple[float, float]:
    if dist.n < 2:
        raise ParameterError(f"confidence score needs sigma, undefined for N={dist.n}")
    return confidence_score_arrays(dist.mean_path(), dist.sigma_path(), truth)


def trajectory_metrics(dist: TrajectoryDistribution, truth: Array) -> TrajectoryMetrics:
    """Scores the mean path; confidence scores only when N >= 2."""
    mean = dist.mean_path()
    cs_x = cs_y = None
    if dist.n >= 2:
        cs_x, cs_y = confidence_score(dist, truth)
    return TrajectoryMetrics(ade=ade(mean, truth), fde=fde(mean, truth), cs_x=cs_x, cs_y=cs_y)


def _mean(values: List[float]) -> float:
    # fsum makes the mean independent of input order
    return math.fsum(values) / len(values)


def aggregate(
    metrics: Sequence[TrajectoryMetrics],
    model: str,
    p: float,
    horizon_s: float,
    n_mc: int,
) -> EvaluationReport:
    """Unweighted mean over trajectories."""
    if not metrics:
        raise DataError("cannot aggregate an empty set of trajectories")
    has_cs = all(m.cs_x is not None and m.cs_y is not None for m in metrics)
    return EvaluationReport(
        model=model,
        p=p,
        horizon_s=horizon_s,
        ade=_mean([m.ade for m in metrics]),
        fde=_mean([m.fde for m in metrics]),
        cs_x=_mean([m.cs_x for m in metrics]) if has_cs else None,
        cs_y=_mean([m.cs_y for m in metrics]) if has_cs else None,
        n_traj=len(metrics),
        n_mc=n_mc,
    )


def improvement_percent(deterministic: float, probabilistic: float) -> float:
    """Relative error reduction of the MC mean path over the deterministic pass."""
    if deterministic <= 0:
        return 0.0
    return 100.0 * (deterministic - probabilistic) / deterministic


def reports_frame(reports: Sequence[EvaluationReport]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in reports], columns=REPORT_COLUMNS)
