from trajdrop.data import (
    PreparedDataset,
    RawTrack,
    SampleSet,
    TrajectorySample,
    derive_velocities,
    fit_normalizer,
    load_cache,
    parse_annotations,
    prepare_dataset,
    save_cache,
    sliding_window_augment,
    split_dataset,
    synthetic_constant_velocity,
)
from trajdrop.diffcore import Parameter, gradient_check
from trajdrop.metrics import ade, aggregate, confidence_score, fde
from trajdrop.models import (
    ModelGraph,
    build_cnn1d,
    build_cnn_lstm,
    build_graph,
    build_lstm_ed,
    predict,
)
from trajdrop.objects import (
    EvaluationReport,
    ForwardMode,
    GaussianState,
    NormalizationStats,
    TrainConfig,
    TrainLog,
)
from trajdrop.training import load_checkpoint, save_checkpoint, train
from trajdrop.uncertainty import (
    TrajectoryDistribution,
    covariance_profile,
    distribution_stats,
    fit_bivariate_gaussian,
    mc_sample,
    mc_sample_batch,
)

__all__ = [
    "EvaluationReport",
    "ForwardMode",
    "GaussianState",
    "ModelGraph",
    "NormalizationStats",
    "Parameter",
    "PreparedDataset",
    "RawTrack",
    "SampleSet",
    "TrainConfig",
    "TrainLog",
    "TrajectoryDistribution",
    "TrajectorySample",
    "ade",
    "aggregate",
    "build_cnn1d",
    "build_cnn_lstm",
    "build_graph",
    "build_lstm_ed",
    "confidence_score",
    "covariance_profile",
    "derive_velocities",
    "distribution_stats",
    "fde",
    "fit_bivariate_gaussian",
    "fit_normalizer",
    "gradient_check",
    "load_cache",
    "load_checkpoint",
    "mc_sample",
    "mc_sample_batch",
    "parse_annotations",
    "predict",
    "prepare_dataset",
    "save_cache",
    "save_checkpoint",
    "sliding_window_augment",
    "split_dataset",
    "synthetic_constant_velocity",
    "train",
]


def forecast(
    checkpoint_path: str, history, n_samples: int = 30, p: float = 0.2, seed: int = 0
) -> TrajectoryDistribution:
    """Load a checkpoint and sample a trajectory distribution for one [T, 4] history in meters."""
    loaded = load_checkpoint(checkpoint_path)
    return mc_sample(loaded.graph, history, n_samples, p, seed, loaded.stats)


__all__.append("forecast")
