"""Reverse-mode kernels for the layers the three forecasters need.

Every forward kernel is a pure function of explicit float64 buffers and every
backward kernel returns the gradients instead of storing them, so kernels can
run concurrently on disjoint data. Parameters own their gradient and Adam
moments; updating them is the only mutating operation.
"""

import logging
from typing import Dict, Iterable, List, Literal, NamedTuple, Optional, Protocol, Tuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from trajdrop.errors import DimensionError, NumericError, ParameterError
from trajdrop.objects import ForwardMode, GradientCheckReport

Array = npt.NDArray[np.float64]
ActivationKind = Literal["tanh", "relu", "linear", "sigmoid"]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-7


# --------------------------------
# Buffers, seeds and initializers
# --------------------------------
def as_buffer(values, what: str = "tensor") -> Array:
    """Return a C-contiguous float64 copy-or-view, rejecting NaN and Inf."""
    array = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{what} of shape {array.shape} holds non-finite values")
    return array


def spawn_seeds(root_seed: int, count: int) -> List[int]:
    """Independent integer seeds for `count` tasks derived from one root seed."""
    children = np.random.SeedSequence(root_seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def glorot_uniform(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int
) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def recurrent_uniform(
    rng: np.random.Generator, shape: Tuple[int, ...], units: int
) -> Array:
    limit = 1.0 / np.sqrt(units)
    return rng.uniform(-limit, limit, size=shape)


class Parameter(BaseModel):
    """A trainable tensor with its gradient and Adam state."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = Field(..., min_length=1)
    value: np.ndarray
    gradient: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _same_shapes(self) -> "Parameter":
        shapes = {a.shape for a in (self.value, self.gradient, self.adam_m, self.adam_v)}
        if len(shapes) != 1:
            raise DimensionError(f"parameter {self.name} has mismatched shapes {shapes}")
        return self

    @classmethod
    def create(cls, name: str, value) -> "Parameter":
        value = as_buffer(value, name).copy()
        return cls(
            name=name,
            value=value,
            gradient=np.zeros_like(value),
            adam_m=np.zeros_like(value),
            adam_v=np.zeros_like(value),
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.gradient.fill(0.0)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise DimensionError(message)


# --------------------------------
# Dense
# --------------------------------
def dense_forward(weight: Array, bias: Array, x: Array) -> Array:
    _require(
        x.ndim == 2 and weight.ndim == 2 and x.shape[1] == weight.shape[0],
        f"dense input {x.shape} does not match weight {weight.shape}",
    )
    _require(
        bias.shape == (weight.shape[1],),
        f"dense bias {bias.shape} does not match weight {weight.shape}",
    )
    return x @ weight + bias


def dense_backward(
    weight: Array, x: Array, grad_out: Array
) -> Tuple[Array, Array, Array]:
    """Return (grad_x, grad_weight, grad_bias)."""
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def time_distributed_dense(weight: Array, bias: Array, x: Array) -> Array:
    """Apply the same dense map independently at every step of [batch, T, in]."""
    _require(x.ndim == 3, f"time distributed input must be 3-D, got {x.shape}")
    steps = [dense_forward(weight, bias, x[:, t, :]) for t in range(x.shape[1])]
    return np.stack(steps, axis=1)


def time_distributed_dense_backward(
    weight: Array, x: Array, grad_out: Array
) -> Tuple[Array, Array, Array]:
    grad_x = np.empty_like(x)
    grad_w = np.zeros_like(weight)
    grad_b = np.zeros(weight.shape[1])
    for t in range(x.shape[1]):
        gx, gw, gb = dense_backward(weight, x[:, t, :], grad_out[:, t, :])
        grad_x[:, t, :] = gx
        grad_w += gw
        grad_b += gb
    return grad_x, grad_w, grad_b


# --------------------------------
# Activations
# --------------------------------
def sigmoid(x: Array) -> Array:
    # tanh form stays finite for any input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x: Array, kind: ActivationKind) -> Array:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "linear":
        return x
    raise ParameterError(f"unknown activation {kind!r}")


def activation_backward(
    x: Array, y: Array, grad_out: Array, kind: ActivationKind
) -> Array:
    """Gradient through `y = activation(x, kind)`."""
    if kind == "tanh":
        return grad_out * (1.0 - y * y)
    if kind == "relu":
        return grad_out * (x > 0.0)
    if kind == "sigmoid":
        return grad_out * y * (1.0 - y)
    if kind == "linear":
        return grad_out
    raise ParameterError(f"unknown activation {kind!r}")


# --------------------------------
# LSTM cell (gate order i, f, g, o)
# --------------------------------
class LSTMCellCache(NamedTuple):
    x_t: Array
    h_prev: Array
    c_prev: Array
    i: Array
    f: Array
    g: Array
    o: Array
    tanh_c: Array


def lstm_cell_forward(
    kernel: Array,
    recurrent: Array,
    bias: Array,
    x_t: Array,
    h_prev: Array,
    c_prev: Array,
) -> Tuple[Array, Array, LSTMCellCache]:
    units = h_prev.shape[1]
    _require(
        kernel.shape == (x_t.shape[1], 4 * units),
        f"lstm kernel {kernel.shape} does not match input {x_t.shape} and {units} units",
    )
    _require(
        recurrent.shape == (units, 4 * units) and bias.shape == (4 * units,),
        f"lstm recurrent {recurrent.shape} / bias {bias.shape} do not match {units} units",
    )
    _require(
        c_prev.shape == h_prev.shape,
        f"lstm states disagree: h {h_prev.shape} vs c {c_prev.shape}",
    )
    z = x_t @ kernel + h_prev @ recurrent + bias
    i = sigmoid(z[:, :units])
    f = sigmoid(z[:, units : 2 * units])
    g = np.tanh(z[:, 2 * units : 3 * units])
    o = sigmoid(z[:, 3 * units :])
    c_t = f * c_prev + i * g
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    return h_t, c_t, LSTMCellCache(x_t, h_prev, c_prev, i, f, g, o, tanh_c)


class LSTMCellGradients(NamedTuple):
    x_t: Array
    h_prev: Array
    c_prev: Array
    kernel: Array
    recurrent: Array
    bias: Array


def lstm_cell_backward(
    kernel: Array,
    recurrent: Array,
    cache: LSTMCellCache,
    grad_h: Array,
    grad_c: Array,
) -> LSTMCellGradients:
    x_t, h_prev, c_prev, i, f, g, o, tanh_c = cache
    grad_o = grad_h * tanh_c
    grad_cell = grad_c + grad_h * o * (1.0 - tanh_c * tanh_c)
    dz = np.concatenate(
        [
            grad_cell * g * i * (1.0 - i),
            grad_cell * c_prev * f * (1.0 - f),
            grad_cell * i * (1.0 - g * g),
            grad_o * o * (1.0 - o),
        ],
        axis=1,
    )
    return LSTMCellGradients(
        x_t=dz @ kernel.T,
        h_prev=dz @ recurrent.T,
        c_prev=grad_cell * f,
        kernel=x_t.T @ dz,
        recurrent=h_prev.T @ dz,
        bias=dz.sum(axis=0),
    )


# --------------------------------
# Causal convolution, pooling, upsampling
# --------------------------------
def _left_pad(x: Array, width: int) -> Array:
    if width == 0:
        return x
    pad = np.zeros((x.shape[0], width, x.shape[2]))
    return np.concatenate([pad, x], axis=1)


def conv1d_causal_forward(kernel: Array, bias: Array, x: Array) -> Array:
    """output[t] = sum_j x[t - j] @ kernel[j] + bias, with x[t < 0] = 0."""
    if kernel.ndim != 3 or kernel.shape[0] < 1:
        raise ParameterError(f"conv kernel must be [k>=1, in, out], got {kernel.shape}")
    _require(
        x.ndim == 3 and x.shape[2] == kernel.shape[1],
        f"conv input {x.shape} does not match kernel channels {kernel.shape}",
    )
    _require(
        bias.shape == (kernel.shape[2],),
        f"conv bias {bias.shape} does not match kernel {kernel.shape}",
    )
    width, steps = kernel.shape[0], x.shape[1]
    padded = _left_pad(x, width - 1)
    out = np.zeros((x.shape[0], steps, kernel.shape[2])) + bias
    for lag in range(width):
        start = width - 1 - lag
        out += padded[:, start : start + steps, :] @ kernel[lag]
    return out


def conv1d_causal_backward(
    kernel: Array, x: Array, grad_out: Array
) -> Tuple[Array, Array, Array]:
    width, steps = kernel.shape[0], x.shape[1]
    padded = _left_pad(x, width - 1)
    grad_padded = np.zeros_like(padded)
    grad_kernel = np.empty_like(kernel)
    for lag in range(width):
        start = width - 1 - lag
        window = padded[:, start : start + steps, :]
        grad_padded[:, start : start + steps, :] += grad_out @ kernel[lag].T
        grad_kernel[lag] = np.tensordot(window, grad_out, axes=([0, 1], [0, 1]))
    return grad_padded[:, width - 1 :, :], grad_kernel, grad_out.sum(axis=(0, 1))


def maxpool1d_forward(x: Array, pool: int) -> Tuple[Array, Array]:
    """Non-overlapping max over `pool` steps; a trailing remainder is dropped.

    Returns the pooled tensor and the within-window argmax (earliest on ties).
    """
    if pool < 1:
        raise ParameterError(f"pool must be >= 1, got {pool}")
    batch, steps, channels = x.shape
    windows = steps // pool
    if windows == 0:
        raise DimensionError(f"sequence of {steps} steps is shorter than pool {pool}")
    grouped = x[:, : windows * pool, :].reshape(batch, windows, pool, channels)
    argmax = np.argmax(grouped, axis=2)
    pooled = np.take_along_axis(grouped, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    return pooled, argmax


def maxpool1d_backward(
    grad_out: Array, argmax: Array, pool: int, input_steps: int
) -> Array:
    batch, windows, channels = grad_out.shape
    grouped = np.zeros((batch, windows, pool, channels))
    np.put_along_axis(grouped, argmax[:, :, None, :], grad_out[:, :, None, :], axis=2)
    grad_x = np.zeros((batch, input_steps, channels))
    grad_x[:, : windows * pool, :] = grouped.reshape(batch, windows * pool, channels)
    return grad_x


def upsample1d_forward(x: Array, factor: int) -> Array:
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(x, factor, axis=1)


def upsample1d_backward(grad_out: Array, factor: int) -> Array:
    batch, steps, channels = grad_out.shape
    return grad_out.reshape(batch, steps // factor, factor, channels).sum(axis=2)


# --------------------------------
# Dropout
# --------------------------------
class DropoutMask(BaseModel):
    """Bernoulli keep flags for inverted dropout."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    keep_flags: np.ndarray
    keep_probability: float = Field(..., gt=0.0, le=1.0)

    @classmethod
    def draw(
        cls, shape: Tuple[int, ...], p: float, rng: np.random.Generator
    ) -> "DropoutMask":
        if not 0.0 <= p < 1.0:
            raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
        keep = 1.0 - p
        return cls(keep_flags=rng.random(shape) < keep, keep_probability=keep)


def dropout_apply(x: Array, mask: DropoutMask) -> Array:
    if not 0.0 < mask.keep_probability <= 1.0:
        raise ParameterError(
            f"keep probability must be in (0, 1], got {mask.keep_probability}"
        )
    _require(
        mask.keep_flags.shape == x.shape,
        f"dropout mask {mask.keep_flags.shape} does not match input {x.shape}",
    )
    return x * mask.keep_flags / mask.keep_probability


# Same scaling applies to the gradient
dropout_backward = dropout_apply


# --------------------------------
# Loss and optimizer
# --------------------------------
def mse_loss(pred: Array, target: Array) -> Tuple[float, Array]:
    """Mean squared error and its gradient with respect to `pred`."""
    _require(
        pred.shape == target.shape,
        f"prediction {pred.shape} and target {target.shape} differ",
    )
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def adam_step(
    param: Parameter,
    learning_rate: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> Parameter:
    """Bias-corrected Adam update of `param` in place, using its gradient."""
    grad = param.gradient
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter {param.name}")
    param.step_count += 1
    t = param.step_count
    param.adam_m *= beta1
    param.adam_m += (1.0 - beta1) * grad
    param.adam_v *= beta2
    param.adam_v += (1.0 - beta2) * (grad * grad)
    m_hat = param.adam_m / (1.0 - beta1**t)
    v_hat = param.adam_v / (1.0 - beta2**t)
    param.value -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)
    return param


# --------------------------------
# Gradient check
# --------------------------------
class DifferentiableGraph(Protocol):
    def forward(self, x: Array, mode: ForwardMode) -> Tuple[Array, list]: ...

    def backward(self, grad_out: Array, caches: list) -> Array: ...

    def named_parameters(self) -> Iterable[Tuple[str, Parameter]]: ...

    def zero_grad(self) -> None: ...


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    graph: DifferentiableGraph,
    inputs: Array,
    target: Array,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_elements: int = 64,
    seed: int = 0,
    mode: Optional[ForwardMode] = None,
) -> GradientCheckReport:
    """Compare backward gradients with central finite differences of the MSE.

    Parameters with more than `max_elements` entries are checked on a seeded
    random subset. A stochastic `mode` replays the same masks on every pass.
    """
    mode = mode or ForwardMode.deterministic()
    rng = np.random.default_rng(seed)

    def loss_at() -> float:
        pred, _ = graph.forward(inputs, mode)
        return mse_loss(pred, target)[0]

    graph.zero_grad()
    pred, caches = graph.forward(inputs, mode)
    _, grad = mse_loss(pred, target)
    graph.backward(grad, caches)

    errors: Dict[str, float] = {}
    checked: Dict[str, int] = {}
    for name, param in graph.named_parameters():
        analytic = param.gradient.copy()
        flat_indices = np.arange(param.size)
        if param.size > max_elements:
            flat_indices = np.sort(rng.choice(param.size, max_elements, replace=False))
        worst = 0.0
        for flat in flat_indices:
            index = np.unravel_index(flat, param.shape)
            original = param.value[index]
            param.value[index] = original + step
            loss_plus = loss_at()
            param.value[index] = original - step
            loss_minus = loss_at()
            param.value[index] = original
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            worst = max(worst, relative_error(float(analytic[index]), numeric))
        errors[name] = worst
        checked[name] = len(flat_indices)
        logging.debug(f"gradient check {name}: {len(flat_indices)} entries, max err {worst:.3e}")
    return GradientCheckReport(errors=errors, checked=checked, tolerance=tolerance)
