from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from trajdrop.diffcore import (
    ActivationKind,
    Array,
    DropoutMask,
    Parameter,
    activation,
    activation_backward,
    conv1d_causal_backward,
    conv1d_causal_forward,
    dense_backward,
    dense_forward,
    dropout_apply,
    dropout_backward,
    glorot_uniform,
    lstm_cell_backward,
    lstm_cell_forward,
    maxpool1d_backward,
    maxpool1d_forward,
    recurrent_uniform,
    time_distributed_dense,
    time_distributed_dense_backward,
    upsample1d_backward,
    upsample1d_forward,
)
from trajdrop.errors import DimensionError, ParameterError
from trajdrop.objects import ForwardMode

# Shapes exclude the batch axis
Shape = Tuple[int, ...]


class ForwardContext:
    """Mask stream of one forward pass; dropout layers draw from it in order."""

    def __init__(self, mode: ForwardMode):
        self.mode = mode
        self.rng: Optional[np.random.Generator] = (
            np.random.default_rng(mode.seed) if mode.masks_active else None
        )


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, Parameter] = {}
        self.input_shape: Optional[Shape] = None
        self.output_shape: Optional[Shape] = None

    def build(self, input_shape: Shape, rng: np.random.Generator) -> Shape:
        """Check the incoming shape, create parameters, return the output shape."""
        self.input_shape = input_shape
        self.output_shape = self._infer_shape(input_shape)
        self._init_params(input_shape, rng)
        return self.output_shape

    def _infer_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def _init_params(self, input_shape: Shape, rng: np.random.Generator) -> None:
        pass

    def _add_param(self, short_name: str, value: Array) -> None:
        self.params[short_name] = Parameter.create(f"{self.name}/{short_name}", value)

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        raise NotImplementedError

    def backward(self, grad_out: Array, cache: Any) -> Array:
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _expect_rank(layer: Layer, shape: Shape, rank: int) -> None:
    if len(shape) != rank:
        raise DimensionError(
            f"{layer.name} expects {rank}-D input (without batch), got {shape}"
        )


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, units: int, activation: ActivationKind = "linear"):
        super().__init__(name)
        self.units = units
        self.activation = activation

    def _infer_shape(self, input_shape: Shape) -> Shape:
        _expect_rank(self, input_shape, 1)
        return (self.units,)

    def _init_params(self, input_shape: Shape, rng: np.random.Generator) -> None:
        fan_in = input_shape[0]
        self._add_param("weight", glorot_uniform(rng, (fan_in, self.units), fan_in, self.units))
        self._add_param("bias", np.zeros(self.units))

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        pre = dense_forward(self.params["weight"].value, self.params["bias"].value, x)
        out = activation(pre, self.activation)
        return out, (x, pre, out)

    def backward(self, grad_out: Array, cache: Any) -> Array:
        x, pre, out = cache
        grad_pre = activation_backward(pre, out, grad_out, self.activation)
        grad_x, grad_w, grad_b = dense_backward(self.params["weight"].value, x, grad_pre)
        self.params["weight"].gradient += grad_w
        self.params["bias"].gradient += grad_b
        return grad_x

    def describe(self) -> str:
        return f"dense({self.units}, {self.activation})"


class TimeDistributedDense(Dense):
    kind = "time_distributed_dense"

    def _infer_shape(self, input_shape: Shape) -> Shape:
        _expect_rank(self, input_shape, 2)
        return (input_shape[0], self.units)

    def _init_params(self, input_shape: Shape, rng: np.random.Generator) -> None:
        super()._init_params(input_shape[1:], rng)

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        pre = time_distributed_dense(
            self.params["weight"].value, self.params["bias"].value, x
        )
        out = activation(pre, self.activation)
        return out, (x, pre, out)

    def backward(self, grad_out: Array, cache: Any) -> Array:
        x, pre, out = cache
        grad_pre = activation_backward(pre, out, grad_out, self.activation)
        grad_x, grad_w, grad_b = time_distributed_dense_backward(
            self.params["weight"].value, x, grad_pre
        )
        self.params["weight"].gradient += grad_w
        self.params["bias"].gradient += grad_b
        return grad_x

    def describe(self) -> str:
        return f"time_distributed_dense({self.units}, {self.activation})"


class LSTM(Layer):
    """LSTM over [T, in]; returns the full sequence or only the last state."""

    kind = "lstm"

    def __init__(self, name: str, units: int, return_sequences: bool):
        super().__init__(name)
        self.units = units
        self.return_sequences = return_sequences

    def _infer_shape(self, input_shape: Shape) -> Shape:
        _expect_rank(self, input_shape, 2)
        if self.return_sequences:
            return (input_shape[0], self.units)
        return (self.units,)

    def _init_params(self, input_shape: Shape, rng: np.random.Generator) -> None:
        features, gates = input_shape[1], 4 * self.units
        self._add_param("kernel", glorot_uniform(rng, (features, gates), features, gates))
        self._add_param("recurrent", recurrent_uniform(rng, (self.units, gates), self.units))
        self._add_param("bias", np.zeros(gates))

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        kernel = self.params["kernel"].value
        recurrent = self.params["recurrent"].value
        bias = self.params["bias"].value
        h = np.zeros((x.shape[0], self.units))
        c = np.zeros_like(h)
        outputs: List[Array] = []
        caches = []
        for t in range(x.shape[1]):
            h, c, cell_cache = lstm_cell_forward(kernel, recurrent, bias, x[:, t, :], h, c)
            outputs.append(h)
            caches.append(cell_cache)
        out = np.stack(outputs, axis=1) if self.return_sequences else h
        return out, caches

    def backward(self, grad_out: Array, cache: Any) -> Array:
        kernel = self.params["kernel"].value
        recurrent = self.params["recurrent"].value
        steps = len(cache)
        batch = grad_out.shape[0]
        grad_x = np.empty((batch, steps, kernel.shape[0]))
        grad_h = np.zeros((batch, self.units))
        grad_c = np.zeros_like(grad_h)
        for t in reversed(range(steps)):
            if self.return_sequences:
                grad_h = grad_h + grad_out[:, t, :]
            elif t == steps - 1:
                grad_h = grad_h + grad_out
            grads = lstm_cell_backward(kernel, recurrent, cache[t], grad_h, grad_c)
            grad_x[:, t, :] = grads.x_t
            grad_h, grad_c = grads.h_prev, grads.c_prev
            self.params["kernel"].gradient += grads.kernel
            self.params["recurrent"].gradient += grads.recurrent
            self.params["bias"].gradient += grads.bias
        return grad_x

    def describe(self) -> str:
        return f"lstm({self.units}, return_sequences={self.return_sequences})"


class Conv1DCausal(Layer):
    kind = "conv1d_causal"

    def __init__(
        self, name: str, filters: int, kernel_size: int, activation: ActivationKind = "relu"
    ):
        super().__init__(name)
        if kernel_size < 1:
            raise ParameterError(f"{name}: kernel size must be >= 1, got {kernel_size}")
        self.filters = filters
        self.kernel_size = kernel_size
        self.activation = activation

    def _infer_shape(self, input_shape: Shape) -> Shape:
        _expect_rank(self, input_shape, 2)
        return (input_shape[0], self.filters)

    def _init_params(self, input_shape: Shape, rng: np.random.Generator) -> None:
        channels, k = input_shape[1], self.kernel_size
        self._add_param(
            "kernel",
            glorot_uniform(rng, (k, channels, self.filters), k * channels, k * self.filters),
        )
        self._add_param("bias", np.zeros(self.filters))

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        pre = conv1d_causal_forward(self.params["kernel"].value, self.params["bias"].value, x)
        out = activation(pre, self.activation)
        return out, (x, pre, out)

    def backward(self, grad_out: Array, cache: Any) -> Array:
        x, pre, out = cache
        grad_pre = activation_backward(pre, out, grad_out, self.activation)
        grad_x, grad_k, grad_b = conv1d_causal_backward(
            self.params["kernel"].value, x, grad_pre
        )
        self.params["kernel"].gradient += grad_k
        self.params["bias"].gradient += grad_b
        return grad_x

    def describe(self) -> str:
        return f"conv1d_causal({self.filters}, k={self.kernel_size}, {self.activation})"


class MaxPool1D(Layer):
    kind = "maxpool1d"

    def __init__(self, name: str, pool: int):
        super().__init__(name)
        if pool < 1:
            raise ParameterError(f"{name}: pool must be >= 1, got {pool}")
        self.pool = pool

    def _infer_shape(self, input_shape: Shape) -> Shape:
        _expect_rank(self, input_shape, 2)
        if input_shape[0] < self.pool:
            raise DimensionError(
                f"{self.name}: {input_shape[0]} steps shorter than pool {self.pool}"
            )
        return (input_shape[0] // self.pool, input_shape[1])

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        pooled, argmax = maxpool1d_forward(x, self.pool)
        return pooled, (argmax, x.shape[1])

    def backward(self, grad_out: Array, cache: Any) -> Array:
        argmax, steps = cache
        return maxpool1d_backward(grad_out, argmax, self.pool, steps)

    def describe(self) -> str:
        return f"maxpool1d({self.pool})"


class UpSample1D(Layer):
    kind = "upsample1d"

    def __init__(self, name: str, factor: int):
        super().__init__(name)
        if factor < 1:
            raise ParameterError(f"{name}: factor must be >= 1, got {factor}")
        self.factor = factor

    def _infer_shape(self, input_shape: Shape) -> Shape:
        _expect_rank(self, input_shape, 2)
        return (input_shape[0] * self.factor, input_shape[1])

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        return upsample1d_forward(x, self.factor), None

    def backward(self, grad_out: Array, cache: Any) -> Array:
        return upsample1d_backward(grad_out, self.factor)

    def describe(self) -> str:
        return f"upsample1d({self.factor})"


class Dropout(Layer):
    """Inverted dropout; the probability comes from the forward mode."""

    kind = "dropout"

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        if ctx.rng is None:
            return x, None
        mask = DropoutMask.draw(x.shape, ctx.mode.dropout_probability, ctx.rng)
        return dropout_apply(x, mask), mask

    def backward(self, grad_out: Array, cache: Any) -> Array:
        if cache is None:
            return grad_out
        return dropout_backward(grad_out, cache)


class Flatten(Layer):
    kind = "flatten"

    def _infer_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_out: Array, cache: Any) -> Array:
        return grad_out.reshape(cache)


class RepeatVector(Layer):
    kind = "repeat_vector"

    def __init__(self, name: str, times: int):
        super().__init__(name)
        self.times = times

    def _infer_shape(self, input_shape: Shape) -> Shape:
        _expect_rank(self, input_shape, 1)
        return (self.times, input_shape[0])

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        return np.repeat(x[:, None, :], self.times, axis=1), None

    def backward(self, grad_out: Array, cache: Any) -> Array:
        return grad_out.sum(axis=1)

    def describe(self) -> str:
        return f"repeat_vector({self.times})"


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, name: str, target: Shape):
        super().__init__(name)
        self.target = tuple(target)

    def _infer_shape(self, input_shape: Shape) -> Shape:
        if int(np.prod(input_shape)) != int(np.prod(self.target)):
            raise DimensionError(f"{self.name}: cannot reshape {input_shape} to {self.target}")
        return self.target

    def forward(self, x: Array, ctx: ForwardContext) -> Tuple[Array, Any]:
        return x.reshape((x.shape[0],) + self.target), x.shape

    def backward(self, grad_out: Array, cache: Any) -> Array:
        return grad_out.reshape(cache)

    def describe(self) -> str:
        return f"reshape{self.target}"
