import json
import logging
import struct
import time
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from trajdrop.data import DEFAULT_DT, SampleSet, split_dataset
from trajdrop.diffcore import adam_step, mse_loss, spawn_seeds
from trajdrop.errors import (
    CheckpointError,
    DataError,
    NumericError,
    ParameterError,
    TrajdropError,
)
from trajdrop.models import ModelGraph, build_graph, predict
from trajdrop.objects import (
    ARCHITECTURES,
    ForwardMode,
    NormalizationStats,
    TrainConfig,
    TrainLog,
    TrainLogEntry,
)

CHECKPOINT_MAGIC = b"TRAJDROP"
CHECKPOINT_VERSION = 1
TRAIN_LOG_COLUMNS = ["epoch", "train_mse", "val_mse", "lr", "seconds"]


# --------------------------------
# Plateau rules
# --------------------------------
class StopDecision(NamedTuple):
    stop: bool
    best_epoch: int  # 1-based, 0 when the history is empty
    wait: int


def early_stopping(
    val_history: Sequence[float], patience: int, min_delta: float = 1e-6
) -> StopDecision:
    """Stop once validation MSE has not improved by min_delta for `patience` epochs."""
    best = np.inf
    best_epoch = 0
    wait = 0
    for epoch, value in enumerate(val_history, start=1):
        if best - value >= min_delta:
            best, best_epoch, wait = value, epoch, 0
        else:
            wait += 1
        if wait >= patience:
            return StopDecision(True, best_epoch, wait)
    return StopDecision(False, best_epoch, wait)


def reduce_lr_on_plateau(
    val_history: Sequence[float],
    initial_lr: float,
    patience: int,
    factor: float,
    min_lr: float,
    min_delta: float = 1e-6,
) -> float:
    """Learning rate for the epoch after `val_history`.

    The rate is multiplied by `factor` (floored at `min_lr`) after every run
    of `patience` non-improving epochs; the counter restarts on reduction.
    """
    if not 0.0 < factor < 1.0:
        raise ParameterError(f"lr reduce factor must be in (0, 1), got {factor}")
    lr = initial_lr
    best = np.inf
    wait = 0
    for value in val_history:
        if best - value >= min_delta:
            best, wait = value, 0
        else:
            wait += 1
        if wait >= patience:
            lr = max(lr * factor, min_lr)
            wait = 0
    return lr


# --------------------------------
# Training loop
# --------------------------------
def train_validation_split(
    samples: SampleSet, validation_fraction: float, seed: int
) -> Tuple[SampleSet, SampleSet]:
    """Hold out whole pedestrians for validation."""
    fit, validation = split_dataset(samples, 1.0 - validation_fraction, seed)
    if len(validation) == 0:
        raise DataError("validation split is empty; the corpus needs at least 2 pedestrians")
    return fit, validation


def evaluate_mse(graph: ModelGraph, samples: SampleSet, batch_size: int = 256) -> float:
    """Deterministic MSE over all elements of the set."""
    total = 0.0
    count = 0
    mode = ForwardMode.deterministic()
    for start in range(0, len(samples), batch_size):
        pred = predict(graph, samples.histories[start : start + batch_size], mode)
        diff = pred - samples.futures[start : start + batch_size]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def train(
    graph: ModelGraph,
    samples: SampleSet,
    config: TrainConfig,
    validation: Optional[SampleSet] = None,
) -> Tuple[ModelGraph, TrainLog]:
    """Adam on normalized MSE with dropout active; best validation weights restored.

    `samples` must already be normalized. Without an explicit `validation`
    set, whole pedestrians are held out per `config.validation_fraction`.
    """
    log = TrainLog()
    if config.epochs == 0:
        return graph, log
    if (samples.history_len, samples.horizon) != (graph.history_len, graph.horizon):
        raise DataError(
            f"samples are T={samples.history_len} F={samples.horizon}, graph expects "
            f"T={graph.history_len} F={graph.horizon}"
        )
    if validation is None:
        samples, validation = train_validation_split(
            samples, config.validation_fraction, config.seed
        )
    if len(samples) == 0:
        raise DataError("no training samples left after the validation split")

    shuffle_seed, mask_seed = spawn_seeds(config.seed, 2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    mask_rng = np.random.default_rng(mask_seed)
    params = [param for _, param in graph.named_parameters()]
    lr = config.learning_rate
    best_val = np.inf
    best_values: Optional[Dict[str, np.ndarray]] = None

    logging.info(
        f"training {graph.architecture_id}: {len(samples)} train / {len(validation)} val samples, "
        f"{graph.parameter_count()} parameters"
    )
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(samples))
        loss_sum = 0.0
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start : start + config.batch_size]
            mode = ForwardMode.stochastic(
                graph.dropout_probability, int(mask_rng.integers(0, 2**31 - 1))
            )
            pred, caches = graph.forward(samples.histories[batch], mode)
            loss, grad = mse_loss(pred, samples.futures[batch])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            graph.zero_grad()
            graph.backward(grad, caches)
            for param in params:
                adam_step(param, lr, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
            loss_sum += loss * len(batch)
            logging.debug(f"epoch {epoch} batch {batch_no}: loss {loss:.6f}")

        val_mse = evaluate_mse(graph, validation)
        log.entries.append(
            TrainLogEntry(
                epoch=epoch,
                train_mse=loss_sum / len(samples),
                val_mse=val_mse,
                lr=lr,
                seconds=time.perf_counter() - started,
            )
        )
        if val_mse < best_val:
            best_val = val_mse
            best_values = graph.snapshot()
        logging.info(
            f"epoch {epoch}/{config.epochs}: train {log.entries[-1].train_mse:.6f} "
            f"val {val_mse:.6f} lr {lr:.2e}"
        )

        decision = early_stopping(log.val_history, config.early_stop_patience, config.min_delta)
        if decision.stop:
            logging.info(f"early stop at epoch {epoch}, best epoch {decision.best_epoch}")
            break
        lr = reduce_lr_on_plateau(
            log.val_history,
            config.learning_rate,
            config.lr_reduce_patience,
            config.lr_reduce_factor,
            config.min_lr,
            config.min_delta,
        )

    if best_values is not None:
        graph.restore(best_values)
    return graph, log


def write_train_log(log: TrainLog, path: str) -> None:
    frame = pd.DataFrame([entry.model_dump() for entry in log.entries], columns=TRAIN_LOG_COLUMNS)
    frame.to_csv(path, index=False)


# --------------------------------
# Checkpoints
# --------------------------------
class ParameterEntry(BaseModel):
    name: str
    shape: List[int]


class CheckpointHeader(BaseModel):
    format_version: int = CHECKPOINT_VERSION
    architecture_id: str
    history_len: int = Field(..., ge=1)
    horizon: int = Field(..., ge=1)
    dt: float = Field(..., gt=0)
    dropout_probability: float = Field(..., ge=0, lt=1)
    seed: int = Field(..., ge=0)
    hyperparameters: Dict[str, Any]
    stats: NormalizationStats
    train_config: TrainConfig
    parameters: List[ParameterEntry]


class LoadedCheckpoint(NamedTuple):
    graph: ModelGraph
    stats: NormalizationStats
    header: CheckpointHeader


def checkpoint_stem(architecture_id: str, history_len: int, horizon: int, p: float, seed: int) -> str:
    return f"{architecture_id}_T{history_len}_F{horizon}_p{p:g}_s{seed}"


def save_checkpoint(
    graph: ModelGraph,
    stats: NormalizationStats,
    config: TrainConfig,
    path: str,
    dt: float = DEFAULT_DT,
) -> None:
    """Versioned header followed by little-endian float64 parameters."""
    header = CheckpointHeader(
        architecture_id=graph.architecture_id,
        history_len=graph.history_len,
        horizon=graph.horizon,
        dt=dt,
        dropout_probability=graph.dropout_probability,
        seed=graph.seed,
        hyperparameters=graph.hyperparameters,
        stats=stats,
        train_config=config,
        parameters=[
            ParameterEntry(name=name, shape=list(param.shape))
            for name, param in graph.named_parameters()
        ],
    )
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, param in graph.named_parameters():
            f.write(param.value.astype("<f8").tobytes())
    logging.info(f"saved checkpoint {path} ({graph.parameter_count()} parameters)")


def load_checkpoint(path: str) -> LoadedCheckpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(blob) < prefix or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a trajdrop checkpoint")
    version, header_len = struct.unpack("<II", blob[len(CHECKPOINT_MAGIC) : prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    if len(blob) < prefix + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = CheckpointHeader.model_validate_json(blob[prefix : prefix + header_len])
    except ValidationError as e:
        raise CheckpointError(f"{path}: invalid header: {e}") from e
    if header.architecture_id not in ARCHITECTURES:
        raise CheckpointError(f"{path}: unknown architecture {header.architecture_id!r}")

    try:
        graph = build_graph(
            header.architecture_id,
            header.history_len,
            header.horizon,
            header.dropout_probability,
            seed=header.seed,
            **header.hyperparameters,
        )
    except (TrajdropError, TypeError) as e:
        raise CheckpointError(f"{path}: cannot rebuild {header.architecture_id}: {e}") from e
    declared = [(p.name, tuple(p.shape)) for p in header.parameters]
    built = [(name, param.shape) for name, param in graph.named_parameters()]
    if declared != built:
        raise CheckpointError(f"{path}: parameter layout does not match {header.architecture_id}")

    payload = blob[prefix + header_len :]
    expected = 8 * graph.parameter_count()
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: expected {expected} bytes of parameters, found {len(payload)} (truncated?)"
        )
    values = np.frombuffer(payload, dtype="<f8")
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{path}: parameters hold non-finite values")
    offset = 0
    for _, param in graph.named_parameters():
        param.value[...] = values[offset : offset + param.size].reshape(param.shape)
        offset += param.size
    return LoadedCheckpoint(graph, header.stats, header)
