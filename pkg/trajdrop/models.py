import logging
from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from trajdrop.diffcore import Array, Parameter, as_buffer
from trajdrop.errors import DimensionError, ParameterError
from trajdrop.layers import (
    LSTM,
    Conv1DCausal,
    Dense,
    Dropout,
    Flatten,
    ForwardContext,
    Layer,
    MaxPool1D,
    RepeatVector,
    Reshape,
    TimeDistributedDense,
    UpSample1D,
)
from trajdrop.objects import ARCHITECTURES, FEATURE_COUNT, ForwardMode, check_probability

DEFAULT_KERNEL_SIZE = 5
DEFAULT_POOL = 2


class ModelGraph:
    """Ordered layers plus their parameters for one forecaster.

    The layer shapes are chained at construction time, so a graph that exists
    always maps [batch, T, 4] histories to [batch, F, 4] futures.
    """

    def __init__(
        self,
        architecture_id: str,
        layers: List[Layer],
        history_len: int,
        horizon: int,
        dropout_probability: float,
        hyperparameters: Dict[str, Any],
        seed: int = 0,
    ):
        if architecture_id not in ARCHITECTURES:
            raise ParameterError(f"unknown architecture {architecture_id!r}")
        if history_len < 1 or horizon < 1:
            raise ParameterError(
                f"history and horizon must be >= 1 step, got T={history_len}, F={horizon}"
            )
        self.architecture_id = architecture_id
        self.layers = layers
        self.history_len = history_len
        self.horizon = horizon
        self.feature_count = FEATURE_COUNT
        self.dropout_probability = check_probability(dropout_probability, "dropout")
        self.hyperparameters = dict(hyperparameters)
        self.seed = seed

        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ParameterError(f"layer names must be unique, got {names}")

        rng = np.random.default_rng(seed)
        shape: Tuple[int, ...] = (history_len, FEATURE_COUNT)
        for layer in layers:
            shape = layer.build(shape, rng)
        if shape != (horizon, FEATURE_COUNT):
            raise DimensionError(
                f"{architecture_id} graph ends with {shape}, expected {(horizon, FEATURE_COUNT)}"
            )
        logging.debug(
            f"built {architecture_id} T={history_len} F={horizon}: {self.parameter_count()} parameters"
        )

    # --------------------------------
    # Parameters
    # --------------------------------
    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        """Parameters in declaration order."""
        for layer in self.layers:
            for param in layer.params.values():
                yield param.name, param

    def parameter_count(self) -> int:
        return sum(param.size for _, param in self.named_parameters())

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.zero_grad()

    def snapshot(self) -> Dict[str, Array]:
        return {name: param.value.copy() for name, param in self.named_parameters()}

    def restore(self, values: Dict[str, Array]) -> None:
        for name, param in self.named_parameters():
            param.value[...] = values[name]

    # --------------------------------
    # Passes
    # --------------------------------
    def forward(self, x: Array, mode: ForwardMode) -> Tuple[Array, list]:
        ctx = ForwardContext(mode)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, ctx)
            caches.append(cache)
        return x, caches

    def backward(self, grad_out: Array, caches: list) -> Array:
        """Accumulate parameter gradients and return the input gradient."""
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad_out = layer.backward(grad_out, cache)
        return grad_out

    # --------------------------------
    # Display
    # --------------------------------
    def display_tree(self) -> None:
        """Print the layer chain with output shapes and parameter counts."""
        branch_mid = "├── "
        branch_last = "└── "

        print(
            f"\n{self.architecture_id} (T={self.history_len}, F={self.horizon}, "
            f"p={self.dropout_probability}):"
        )
        print("=" * 48)
        for i, layer in enumerate(self.layers):
            branch = branch_last if i == len(self.layers) - 1 else branch_mid
            shape = ", ".join(str(d) for d in layer.output_shape or ())
            print(
                f"{branch}{layer.name}: {layer.describe()} -> [batch, {shape}]"
                f" [params:{layer.parameter_count}]"
            )
        print(f"total parameters: {self.parameter_count()}")


def _check_lengths(history_len: int, horizon: int) -> None:
    if history_len < 1 or horizon < 1:
        raise ParameterError(
            f"history and horizon must be >= 1 step, got T={history_len}, F={horizon}"
        )


def build_lstm_ed(
    history_len: int = 8,
    horizon: int = 12,
    dropout: float = 0.2,
    encoder_units: Sequence[int] = (64, 64),
    decoder_units: int = 64,
    seed: int = 0,
) -> ModelGraph:
    """Two stacked encoder LSTMs, a repeated encoding, one decoder LSTM."""
    _check_lengths(history_len, horizon)
    if len(encoder_units) != 2:
        raise ParameterError(f"encoder needs 2 layer widths, got {list(encoder_units)}")
    layers: List[Layer] = [
        LSTM("encoder_lstm_1", encoder_units[0], return_sequences=True),
        Dropout("encoder_dropout_1"),
        LSTM("encoder_lstm_2", encoder_units[1], return_sequences=False),
        Dropout("encoder_dropout_2"),
        RepeatVector("repeat_encoding", horizon),
        LSTM("decoder_lstm", decoder_units, return_sequences=True),
        Dropout("decoder_dropout"),
        TimeDistributedDense("output_dense", FEATURE_COUNT, activation="linear"),
    ]
    hyperparameters = {
        "encoder_units": list(encoder_units),
        "decoder_units": decoder_units,
    }
    return ModelGraph("lstm_ed", layers, history_len, horizon, dropout, hyperparameters, seed)


def build_cnn1d(
    history_len: int = 8,
    horizon: int = 12,
    dropout: float = 0.2,
    filters: Sequence[int] = (128, 64, 64),
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    pool: int = DEFAULT_POOL,
    seed: int = 0,
) -> ModelGraph:
    """Three causal convolutions, max-pool and upsample, dense head to [F, 4]."""
    _check_lengths(history_len, horizon)
    if len(filters) != 3:
        raise ParameterError(f"cnn1d needs 3 filter counts, got {list(filters)}")
    if history_len < pool:
        raise ParameterError(f"cnn1d pools by {pool} and needs T >= {pool}, got T={history_len}")
    layers: List[Layer] = [
        Conv1DCausal("conv_1", filters[0], kernel_size),
        Dropout("conv_dropout_1"),
        Conv1DCausal("conv_2", filters[1], kernel_size),
        Dropout("conv_dropout_2"),
        Conv1DCausal("conv_3", filters[2], kernel_size),
        MaxPool1D("maxpool", pool),
        UpSample1D("upsample", pool),
        Flatten("flatten"),
        Dense("output_dense", horizon * FEATURE_COUNT, activation="linear"),
        Reshape("output_steps", (horizon, FEATURE_COUNT)),
    ]
    hyperparameters = {"filters": list(filters), "kernel_size": kernel_size, "pool": pool}
    return ModelGraph("cnn1d", layers, history_len, horizon, dropout, hyperparameters, seed)


def build_cnn_lstm(
    history_len: int = 8,
    horizon: int = 12,
    dropout: float = 0.2,
    filters: Sequence[int] = (128, 64),
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    decoder_units: int = 64,
    seed: int = 0,
) -> ModelGraph:
    """Two causal convolutions flattened into a repeated LSTM decoder."""
    _check_lengths(history_len, horizon)
    if len(filters) != 2:
        raise ParameterError(f"cnn_lstm needs 2 filter counts, got {list(filters)}")
    layers: List[Layer] = [
        Conv1DCausal("conv_1", filters[0], kernel_size),
        Dropout("conv_dropout_1"),
        Conv1DCausal("conv_2", filters[1], kernel_size),
        Dropout("conv_dropout_2"),
        Flatten("flatten"),
        RepeatVector("repeat_features", horizon),
        LSTM("decoder_lstm", decoder_units, return_sequences=True),
        TimeDistributedDense("output_dense", FEATURE_COUNT, activation="linear"),
    ]
    hyperparameters = {
        "filters": list(filters),
        "kernel_size": kernel_size,
        "decoder_units": decoder_units,
    }
    return ModelGraph("cnn_lstm", layers, history_len, horizon, dropout, hyperparameters, seed)


_BUILDERS = {
    "lstm_ed": build_lstm_ed,
    "cnn1d": build_cnn1d,
    "cnn_lstm": build_cnn_lstm,
}


def build_graph(
    architecture_id: str,
    history_len: int,
    horizon: int,
    dropout: float,
    seed: int = 0,
    **hyperparameters: Any,
) -> ModelGraph:
    """Build any architecture by id; used when reloading checkpoints."""
    if architecture_id not in _BUILDERS:
        raise ParameterError(
            f"unknown architecture {architecture_id!r}, expected one of {ARCHITECTURES}"
        )
    return _BUILDERS[architecture_id](
        history_len=history_len,
        horizon=horizon,
        dropout=dropout,
        seed=seed,
        **hyperparameters,
    )


def _lstm_count(inputs: int, units: int) -> int:
    return 4 * (inputs + units + 1) * units


def _conv_count(kernel_size: int, inputs: int, filters: int) -> int:
    return (kernel_size * inputs + 1) * filters


def expected_parameter_count(architecture_id: str, history_len: int, horizon: int, **hp: Any) -> int:
    """Closed-form parameter count of an architecture with the given widths."""
    f = FEATURE_COUNT
    if architecture_id == "lstm_ed":
        u1, u2 = hp.get("encoder_units", (64, 64))
        u3 = hp.get("decoder_units", 64)
        return _lstm_count(f, u1) + _lstm_count(u1, u2) + _lstm_count(u2, u3) + (u3 + 1) * f
    if architecture_id == "cnn1d":
        f1, f2, f3 = hp.get("filters", (128, 64, 64))
        k = hp.get("kernel_size", DEFAULT_KERNEL_SIZE)
        pool = hp.get("pool", DEFAULT_POOL)
        flat = (history_len // pool) * pool * f3
        return (
            _conv_count(k, f, f1)
            + _conv_count(k, f1, f2)
            + _conv_count(k, f2, f3)
            + (flat + 1) * horizon * f
        )
    if architecture_id == "cnn_lstm":
        f1, f2 = hp.get("filters", (128, 64))
        k = hp.get("kernel_size", DEFAULT_KERNEL_SIZE)
        u = hp.get("decoder_units", 64)
        return (
            _conv_count(k, f, f1)
            + _conv_count(k, f1, f2)
            + _lstm_count(history_len * f2, u)
            + (u + 1) * f
        )
    raise ParameterError(f"unknown architecture {architecture_id!r}")


def predict(graph: ModelGraph, history: Array, mode: ForwardMode) -> Array:
    """Forecast [batch, F, 4] from [batch, T, 4] normalized histories.

    Raises NumericError when the history holds NaN or Inf.
    """
    history = as_buffer(history, "history")
    expected = (graph.history_len, graph.feature_count)
    if history.ndim != 3 or history.shape[1:] != expected:
        raise DimensionError(
            f"history of shape {history.shape} does not match [batch, {expected[0]}, {expected[1]}]"
        )
    out, _ = graph.forward(history, mode)
    return out
