"""The import / train / evaluate / sweep studies behind the command line."""

import logging
import os
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator

from trajdrop.data import (
    DEFAULT_DT,
    PreparedDataset,
    SampleSet,
    load_cache,
    parse_annotations,
    prepare_dataset,
    save_cache,
    synthetic_constant_velocity,
)
from trajdrop.diffcore import spawn_seeds
from trajdrop.errors import DataError, UsageError
from trajdrop.metrics import (
    aggregate,
    improvement_percent,
    reports_frame,
    trajectory_metrics,
)
from trajdrop.models import ModelGraph, build_graph
from trajdrop.objects import (
    ARCHITECTURES,
    ArchitectureId,
    EvaluationReport,
    NormalizationStats,
    TrainConfig,
)
from trajdrop.training import (
    LoadedCheckpoint,
    checkpoint_stem,
    load_checkpoint,
    save_checkpoint,
    train,
    write_train_log,
)
from trajdrop.uncertainty import (
    DOMINANCE_RATIO,
    TrajectoryDistribution,
    distribution_frame,
    mc_sample_batch,
    mean_sigma,
    samples_frame,
)

EvaluationMode = Literal["deterministic", "mc"]


class ExperimentConfig(BaseModel):
    """Everything an experiment run needs besides the training protocol."""

    dataset_paths: List[str] = Field(default_factory=list)
    annotation_format: Literal["obsmat", "tsv"] = "obsmat"
    architectures: List[ArchitectureId] = Field(default_factory=lambda: list(ARCHITECTURES))
    history_steps: int = Field(8, ge=1, description="T, 3.2 s at 0.4 s per step")
    horizons: List[float] = Field(default_factory=lambda: [4.8], description="T_f in seconds")
    dropout_probabilities: List[float] = Field(default_factory=lambda: [0.2])
    training_dropout: float = Field(0.2, ge=0, lt=1)
    mc_passes: int = Field(30, ge=1, description="N stochastic passes")
    dt: float = Field(DEFAULT_DT, gt=0)
    train_fraction: float = Field(0.79, gt=0, lt=1)
    stride: int = Field(1, ge=1)
    relative_positions: bool = Field(
        True, description="Measure window positions from the last observed position"
    )
    retrain: bool = Field(False, description="sweep trains missing per-horizon checkpoints")
    seed: int = Field(0, ge=0)
    output_dir: str = "runs"

    @field_validator(
        "dataset_paths", "architectures", "horizons", "dropout_probabilities", mode="before"
    )
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("architectures", "horizons", "dropout_probabilities")
    @classmethod
    def _non_empty(cls, value: list) -> list:
        if not value:
            raise ValueError("list must not be empty")
        return value

    @field_validator("horizons")
    @classmethod
    def _positive_horizons(cls, value: List[float]) -> List[float]:
        if any(h <= 0 for h in value):
            raise ValueError(f"horizons must be > 0 seconds, got {value}")
        return value

    @field_validator("dropout_probabilities")
    @classmethod
    def _probabilities(cls, value: List[float]) -> List[float]:
        if any(not 0.0 <= p < 1.0 for p in value):
            raise ValueError(f"dropout probabilities must be in [0, 1), got {value}")
        return value

    def horizon_steps(self, horizon_s: float) -> int:
        return int(round(horizon_s / self.dt))


def read_config_file(path: str) -> Dict[str, str]:
    """Flat `key = value` file; '#' starts a comment."""
    values: Dict[str, str] = {}
    try:
        with open(path, "r") as f:
            lines = f.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for line_no, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{line_no}: expected 'key = value', got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        values[key] = value
    return values


def resolve_configs(
    file_values: Dict[str, str], overrides: Dict[str, object]
) -> Tuple[ExperimentConfig, TrainConfig]:
    """Merge config-file values with command-line overrides (which win)."""
    merged: Dict[str, object] = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    experiment_keys = set(ExperimentConfig.model_fields)
    train_keys = set(TrainConfig.model_fields)
    unknown = sorted(set(merged) - experiment_keys - train_keys)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        experiment = ExperimentConfig(**{k: v for k, v in merged.items() if k in experiment_keys})
        train_config = TrainConfig(**{k: v for k, v in merged.items() if k in train_keys})
    except ValidationError as e:
        raise UsageError(f"invalid configuration: {e}") from e
    return experiment, train_config


# --------------------------------
# import
# --------------------------------
def cmd_import(
    src: Optional[str],
    experiment: ExperimentConfig,
    horizon_steps: Optional[int] = None,
    synthetic: Optional[int] = None,
) -> str:
    """Parse, window, split and normalize a corpus into a prepared-dataset file."""
    horizon = horizon_steps or experiment.horizon_steps(experiment.horizons[0])
    if synthetic:
        tracks = synthetic_constant_velocity(synthetic, seed=experiment.seed, dt=experiment.dt)
        source, stem = f"synthetic:{synthetic}", f"synthetic{synthetic}"
    elif src:
        tracks = parse_annotations(src, experiment.annotation_format)
        source, stem = src, os.path.splitext(os.path.basename(src))[0]
    else:
        raise UsageError("import needs an annotation file or --synthetic N")

    dataset = prepare_dataset(
        tracks,
        history_len=experiment.history_steps,
        horizon=horizon,
        dt=experiment.dt,
        train_fraction=experiment.train_fraction,
        seed=experiment.seed,
        stride=experiment.stride,
        source=source,
        relative=experiment.relative_positions,
    )
    os.makedirs(experiment.output_dir, exist_ok=True)
    path = os.path.join(
        experiment.output_dir, f"{stem}_T{experiment.history_steps}_F{horizon}.cache.json"
    )
    save_cache(dataset, path)
    print(dataset.summary())
    return path


# --------------------------------
# train
# --------------------------------
def cmd_train(
    cache_path: str,
    architecture: str,
    experiment: ExperimentConfig,
    train_config: TrainConfig,
    show_graph: bool = True,
) -> Tuple[str, str]:
    """Train one architecture on a prepared dataset; returns (checkpoint, log) paths."""
    if architecture not in ARCHITECTURES:
        raise UsageError(f"unknown architecture {architecture!r}, expected one of {ARCHITECTURES}")
    dataset = load_cache(cache_path)
    samples = dataset.train_set().normalized(dataset.stats)
    graph = build_graph(
        architecture,
        dataset.history_len,
        dataset.horizon,
        experiment.training_dropout,
        seed=train_config.seed,
    )
    if show_graph:
        graph.display_tree()
    graph, log = train(graph, samples, train_config)

    os.makedirs(experiment.output_dir, exist_ok=True)
    stem = checkpoint_stem(
        architecture, dataset.history_len, dataset.horizon, experiment.training_dropout, train_config.seed
    )
    checkpoint_path = os.path.join(experiment.output_dir, f"{stem}.ckpt")
    log_path = os.path.join(experiment.output_dir, f"{stem}_log.csv")
    save_checkpoint(graph, dataset.stats, train_config, checkpoint_path, dt=dataset.dt)
    write_train_log(log, log_path)
    if log.entries:
        best = min(log.val_history)
        print(f"{stem}: {len(log)} epochs, best validation MSE {best:.6f}")
    return checkpoint_path, log_path


# --------------------------------
# evaluate
# --------------------------------
class CellResult(NamedTuple):
    report: EvaluationReport
    distributions: List[TrajectoryDistribution]


def _check_compatible(loaded: LoadedCheckpoint, dataset: PreparedDataset, checkpoint: str) -> None:
    graph = loaded.graph
    if (graph.history_len, graph.horizon) != (dataset.history_len, dataset.horizon):
        raise DataError(
            f"{checkpoint} is T={graph.history_len} F={graph.horizon} but the dataset is "
            f"T={dataset.history_len} F={dataset.horizon}"
        )


def evaluate_cell(
    graph: ModelGraph,
    stats: NormalizationStats,
    test: SampleSet,
    mode: EvaluationMode,
    n_mc: int,
    p: float,
    seed: int,
    horizon_s: float,
) -> CellResult:
    """Score one (model, p, horizon) cell on the mean path of each test trajectory."""
    if len(test) == 0:
        raise DataError("the test split is empty")
    if mode == "deterministic":
        n_mc, p = 1, 0.0
    dists = mc_sample_batch(graph, test.histories, n_mc, p, seed, stats)
    metrics = [
        trajectory_metrics(dist, test.futures[i, :, :2]) for i, dist in enumerate(dists)
    ]
    model = graph.architecture_id + ("+mc" if mode == "mc" else "")
    report = aggregate(metrics, model=model, p=p, horizon_s=horizon_s, n_mc=n_mc)
    logging.info(
        f"{model} p={p} T_f={horizon_s}s: ADE {report.ade:.4f} FDE {report.fde:.4f} "
        f"CS {report.cs_x}/{report.cs_y}"
    )
    return CellResult(report, dists)


def _mean_covariance_profile(dists: Sequence[TrajectoryDistribution]) -> pd.DataFrame:
    covariances = np.array(
        [[state.covariance for state in dist.per_step] for dist in dists]
    ).mean(axis=0)
    sxx, syy, sxy = covariances[:, 0, 0], covariances[:, 1, 1], covariances[:, 0, 1]
    dominant = np.where(
        (sxx > 0) & (sxx >= DOMINANCE_RATIO * syy),
        "x",
        np.where((syy > 0) & (syy >= DOMINANCE_RATIO * sxx), "y", ""),
    )
    return pd.DataFrame(
        {
            "step": np.arange(1, len(sxx) + 1),
            "sigma_xx": sxx,
            "sigma_yy": syy,
            "sigma_xy": sxy,
            "dominant": dominant,
        }
    )


def cmd_evaluate(
    checkpoint_path: str,
    cache_path: str,
    mode: EvaluationMode,
    n_mc: int,
    p: float,
    seed: int,
    output_dir: str,
    export_distributions: bool = True,
) -> EvaluationReport:
    """Report CSV plus, for MC mode, per-trajectory distribution CSVs."""
    loaded = load_checkpoint(checkpoint_path)
    dataset = load_cache(cache_path)
    _check_compatible(loaded, dataset, checkpoint_path)
    result = evaluate_cell(
        loaded.graph,
        loaded.stats,
        dataset.test_set(),
        mode,
        n_mc,
        p,
        seed,
        round(loaded.graph.horizon * loaded.header.dt, 6),
    )

    os.makedirs(output_dir, exist_ok=True)
    reports_frame([result.report]).to_csv(os.path.join(output_dir, "report.csv"), index=False)
    if mode == "mc" and result.report.n_mc >= 2:
        _mean_covariance_profile(result.distributions).to_csv(
            os.path.join(output_dir, "covariance_profile.csv"), index=False
        )
        if export_distributions:
            dist_dir = os.path.join(output_dir, "distributions")
            os.makedirs(dist_dir, exist_ok=True)
            for i, dist in enumerate(result.distributions):
                distribution_frame(dist).to_csv(
                    os.path.join(dist_dir, f"traj_{i:04d}.csv"), index=False
                )
                samples_frame(dist).to_csv(
                    os.path.join(dist_dir, f"traj_{i:04d}_samples.csv"), index=False
                )
    print(reports_frame([result.report]).to_string(index=False))
    return result.report


# --------------------------------
# sweep
# --------------------------------
TAG_COLUMNS = ["checkpoint", "dataset"]


class SweepModel(NamedTuple):
    stem: str
    loaded: LoadedCheckpoint


CheckpointIndex = Dict[Tuple[str, int], Dict[float, SweepModel]]


def _add_checkpoint(index: CheckpointIndex, path: str) -> None:
    """File a checkpoint under (architecture, F) and its training p."""
    loaded = load_checkpoint(path)
    graph = loaded.graph
    stem = os.path.splitext(os.path.basename(path))[0]
    by_p = index.setdefault((graph.architecture_id, graph.horizon), {})
    if graph.dropout_probability in by_p:
        raise UsageError(
            f"{stem} and {by_p[graph.dropout_probability].stem} both hold "
            f"{graph.architecture_id} at F={graph.horizon} trained with p={graph.dropout_probability}"
        )
    by_p[graph.dropout_probability] = SweepModel(stem, loaded)


def _pick_checkpoint(
    by_p: Dict[float, SweepModel], p: float, architecture: str, steps: int
) -> SweepModel:
    """The checkpoint trained at `p`, else the only one of its (architecture, F)."""
    if p in by_p:
        return by_p[p]
    if len(by_p) == 1:
        return next(iter(by_p.values()))
    raise UsageError(
        f"no {architecture} checkpoint at F={steps} was trained with p={p}; "
        f"the candidates were trained with p={sorted(by_p)}"
    )


def cmd_sweep(
    checkpoint_paths: Sequence[str],
    cache_paths: Sequence[str],
    experiment: ExperimentConfig,
    train_config: Optional[TrainConfig] = None,
) -> List[EvaluationReport]:
    """One MC row per (model, p, horizon) plus deterministic baselines.

    Models are horizon specific, so every requested horizon needs its own
    checkpoint per architecture and a prepared dataset with the same F. With
    `experiment.retrain` a missing checkpoint is trained from that dataset.
    Each p uses the checkpoint trained at that p when one was given.
    """
    if not cache_paths:
        raise UsageError("sweep needs at least one prepared dataset")
    if not checkpoint_paths and not experiment.retrain:
        raise UsageError("sweep needs checkpoints, or retrain = true to train them")
    probabilities, horizons = experiment.dropout_probabilities, experiment.horizons

    index: CheckpointIndex = {}
    for path in checkpoint_paths:
        _add_checkpoint(index, path)
    architectures: List[str] = []
    for architecture, _ in index:
        if architecture not in architectures:
            architectures.append(architecture)
    if not architectures:
        architectures = list(experiment.architectures)

    datasets: Dict[int, Tuple[str, PreparedDataset]] = {}
    for path in cache_paths:
        dataset = load_cache(path)
        if dataset.horizon in datasets:
            raise UsageError(
                f"{path} and {datasets[dataset.horizon][0]} both prepare F={dataset.horizon}; "
                "run one sweep per dataset"
            )
        datasets[dataset.horizon] = (path, dataset)
    dt = next(iter(datasets.values()))[1].dt

    def steps_of(horizon_s: float) -> int:
        return int(round(horizon_s / dt))

    if experiment.retrain:
        for architecture in architectures:
            for horizon_s in horizons:
                steps = steps_of(horizon_s)
                if (architecture, steps) in index or steps not in datasets:
                    continue
                logging.info(f"no {architecture} checkpoint at F={steps}, training one")
                checkpoint_path, _ = cmd_train(
                    datasets[steps][0],
                    architecture,
                    experiment,
                    train_config or TrainConfig(seed=experiment.seed),
                    show_graph=False,
                )
                _add_checkpoint(index, checkpoint_path)

    gaps = []
    for architecture in architectures:
        for horizon_s in horizons:
            steps = steps_of(horizon_s)
            if (architecture, steps) not in index:
                gaps.append(f"checkpoint {architecture} at {horizon_s}s (F={steps})")
            if steps not in datasets:
                gaps.append(f"prepared dataset at {horizon_s}s (F={steps})")
    if gaps:
        raise DataError("sweep is missing: " + "; ".join(sorted(set(gaps))))

    cells = [(a, h) for a in architectures for h in horizons]
    cell_seeds = spawn_seeds(experiment.seed, len(cells))
    baselines: Dict[str, EvaluationReport] = {}
    reports: List[EvaluationReport] = []
    tags: List[Dict[str, str]] = []
    baseline_rows = []
    uncertainty_rows = []
    for (architecture, horizon_s), cell_seed in zip(cells, cell_seeds):
        steps = steps_of(horizon_s)
        _, dataset = datasets[steps]
        test = dataset.test_set()
        for p_seed, p in zip(spawn_seeds(cell_seed, len(probabilities)), probabilities):
            model = _pick_checkpoint(index[(architecture, steps)], p, architecture, steps)
            graph, stats = model.loaded.graph, model.loaded.stats
            _check_compatible(model.loaded, dataset, model.stem)
            if model.stem not in baselines:
                baselines[model.stem] = evaluate_cell(
                    graph, stats, test, "deterministic", 1, 0.0, cell_seed, horizon_s
                ).report
            deterministic = baselines[model.stem]
            report, dists = evaluate_cell(
                graph, stats, test, "mc", experiment.mc_passes, p, p_seed, horizon_s
            )
            tag = {"checkpoint": model.stem, "dataset": dataset.source}
            reports.append(report)
            tags.append(tag)
            baseline_rows.append(
                {
                    "model": architecture,
                    "horizon_s": horizon_s,
                    "p": p,
                    "det_ade": deterministic.ade,
                    "det_fde": deterministic.fde,
                    "mc_ade": report.ade,
                    "mc_fde": report.fde,
                    "ade_improvement_pct": improvement_percent(deterministic.ade, report.ade),
                    "fde_improvement_pct": improvement_percent(deterministic.fde, report.fde),
                    **tag,
                }
            )
            if experiment.mc_passes >= 2:
                sigmas = np.array([mean_sigma(dist) for dist in dists])
                uncertainty_rows.append(
                    {
                        "model": report.model,
                        "p": p,
                        "horizon_s": horizon_s,
                        "mean_sigma_x": float(sigmas[:, 0].mean()),
                        "mean_sigma_y": float(sigmas[:, 1].mean()),
                        **tag,
                    }
                )

    output_dir = experiment.output_dir
    os.makedirs(output_dir, exist_ok=True)
    sweep = pd.concat([reports_frame(reports), pd.DataFrame(tags, columns=TAG_COLUMNS)], axis=1)
    sweep.to_csv(os.path.join(output_dir, "sweep.csv"), index=False)
    pd.DataFrame(baseline_rows).to_csv(os.path.join(output_dir, "baseline.csv"), index=False)
    pd.DataFrame(
        uncertainty_rows,
        columns=["model", "p", "horizon_s", "mean_sigma_x", "mean_sigma_y"] + TAG_COLUMNS,
    ).to_csv(os.path.join(output_dir, "uncertainty.csv"), index=False)
    print(sweep.to_string(index=False))
    return reports
