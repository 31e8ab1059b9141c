#gradcore.py
"""
Dense tensor math with hand-written reverse-mode gradients

Only the operations the DeepFuse graph needs live here: "same" padded
stride-1 convolution, the feature merge layer, the Adam optimizer and a
central-difference gradient checker used as a test oracle.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)

# Max elements materialised per im2col block; bounds memory on full-size images
_BLOCK_ELEMENTS = 1 << 22

ParamDict = Dict[str, np.ndarray]


class Activation(str, Enum):
    RELU = "relu"
    LINEAR = "linear"


class MergeMode(str, Enum):
    ADD = "add"
    MEAN = "mean"
    MAX = "max"
    PRODUCT = "product"
    CONCAT = "concat"


@dataclass
class Tensor3:
    """
    H x W x C feature map stored row-major in (y, x, c) order

    Gradients flowing backwards are Tensor3 values of the same shape.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, np.newaxis]
        if values.ndim != 3:
            raise ConfigurationError(f"Tensor3 expects a 2-D or 3-D array, got shape {values.shape}")
        self.values = values

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    def plane(self) -> np.ndarray:
        """Return the single channel as a 2-D plane"""
        if self.channels != 1:
            raise ConfigurationError(f"Expected a single-channel tensor, got {self.channels} channels")
        return self.values[:, :, 0]


@dataclass
class ConvLayer:
    """Kernel shaped [kh, kw, cin, cout], bias shaped [cout]"""

    kernel: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        self.activation = Activation(self.activation)
        if self.kernel.ndim != 4:
            raise ConfigurationError(f"Kernel must be 4-D [kh, kw, cin, cout], got shape {self.kernel.shape}")
        kh, kw, _, cout = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"Kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise ConfigurationError(f"Bias length {self.bias.shape} does not match {cout} output channels")

    @property
    def kh(self) -> int:
        return self.kernel.shape[0]

    @property
    def kw(self) -> int:
        return self.kernel.shape[1]

    @property
    def cin(self) -> int:
        return self.kernel.shape[2]

    @property
    def cout(self) -> int:
        return self.kernel.shape[3]


def _require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NumericError(f"Non-finite value in {what} at index {tuple(int(i) for i in bad)}")


def _correlate(padded: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    Valid cross-correlation of a padded (H', W', Cin) array with a
    [kh, kw, Cin, Cout] kernel, computed as blocked im2col matmuls.
    """
    kh, kw, cin, cout = kernel.shape
    out_h = padded.shape[0] - kh + 1
    out_w = padded.shape[1] - kw + 1
    kmat = kernel.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout).astype(np.float64)
    out = np.empty((out_h, out_w, cout), dtype=np.float64)

    rows = max(1, _BLOCK_ELEMENTS // max(1, out_w * cin * kh * kw))
    for start in range(0, out_h, rows):
        stop = min(out_h, start + rows)
        windows = sliding_window_view(padded[start:stop + kh - 1], (kh, kw), axis=(0, 1))
        cols = windows.reshape((stop - start) * out_w, cin * kh * kw)
        out[start:stop] = (cols @ kmat).reshape(stop - start, out_w, cout)
    return out


def _pad_same(values: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(values, ((ph, ph), (pw, pw), (0, 0)), mode="constant")


def activate(pre_activation: np.ndarray, activation: Activation) -> np.ndarray:
    if Activation(activation) is Activation.RELU:
        return np.maximum(pre_activation, 0.0)
    return pre_activation


def conv2d_pre_activation(inp: Tensor3, layer: ConvLayer) -> np.ndarray:
    """Convolution plus bias, before the activation is applied"""
    if inp.channels != layer.cin:
        raise ConfigurationError(
            f"Layer expects {layer.cin} input channels, tensor has {inp.channels}"
        )
    _require_finite(inp.values, "convolution input")
    padded = _pad_same(inp.values, layer.kh, layer.kw)
    return _correlate(padded, layer.kernel) + layer.bias.astype(np.float64)


def conv2d_forward(inp: Tensor3, layer: ConvLayer) -> Tensor3:
    """
    Stride-1 "same" convolution followed by the layer activation

    Args:
        inp: Input feature map with layer.cin channels
        layer: Convolution layer

    Returns:
        Tensor3 with the input's spatial size and layer.cout channels

    Raises:
        ConfigurationError: Channel mismatch
        NumericError: Non-finite input
    """
    return Tensor3(activate(conv2d_pre_activation(inp, layer), layer.activation))


def conv2d_backward(
    inp: Tensor3,
    layer: ConvLayer,
    upstream_grad: Tensor3,
    pre_activation: Optional[np.ndarray] = None,
) -> Tuple[Tensor3, np.ndarray, np.ndarray]:
    """
    Exact gradients of conv2d_forward

    Args:
        inp: The forward input
        layer: The forward layer
        upstream_grad: dLoss/dOutput, shaped like the forward output
        pre_activation: Cached forward pre-activation; recomputed when omitted

    Returns:
        Tuple of (grad_input, grad_kernel, grad_bias)
    """
    expected = (inp.height, inp.width, layer.cout)
    if upstream_grad.shape != expected:
        raise ConfigurationError(f"Upstream gradient shape {upstream_grad.shape} != forward output {expected}")
    if pre_activation is None:
        pre_activation = conv2d_pre_activation(inp, layer)

    grad_pre = upstream_grad.values
    if layer.activation is Activation.RELU:
        grad_pre = grad_pre * (pre_activation > 0)

    grad_bias = grad_pre.sum(axis=(0, 1))

    # dL/dK[i, j, c, o] = sum_{y, x} padded[y + i, x + j, c] * grad_pre[y, x, o]
    kh, kw, cin, cout = layer.kernel.shape
    padded = _pad_same(inp.values, kh, kw)
    height, width = inp.height, inp.width
    kgrad = np.zeros((cin * kh * kw, cout), dtype=np.float64)
    rows = max(1, _BLOCK_ELEMENTS // max(1, width * cin * kh * kw))
    for start in range(0, height, rows):
        stop = min(height, start + rows)
        windows = sliding_window_view(padded[start:stop + kh - 1], (kh, kw), axis=(0, 1))
        cols = windows.reshape((stop - start) * width, cin * kh * kw)
        kgrad += cols.T @ grad_pre[start:stop].reshape(-1, cout)
    grad_kernel = kgrad.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)

    # Input gradient is the full correlation with the flipped, channel-swapped kernel
    flipped = layer.kernel[::-1, ::-1].transpose(0, 1, 3, 2)
    grad_input = _correlate(_pad_same(grad_pre, kh, kw), flipped)

    return Tensor3(grad_input), grad_kernel, grad_bias


def merge_forward(a: Tensor3, b: Tensor3, mode: MergeMode) -> Tensor3:
    """Combine two feature stacks elementwise (or along channels for concat)"""
    mode = MergeMode(mode)
    if a.shape != b.shape:
        raise ConfigurationError(f"Cannot merge tensors of shape {a.shape} and {b.shape}")
    x, y = a.values, b.values
    if mode is MergeMode.ADD:
        return Tensor3(x + y)
    if mode is MergeMode.MEAN:
        return Tensor3((x + y) / 2.0)
    if mode is MergeMode.MAX:
        return Tensor3(np.maximum(x, y))
    if mode is MergeMode.PRODUCT:
        return Tensor3(x * y)
    return Tensor3(np.concatenate([x, y], axis=2))


def merge_backward(a: Tensor3, b: Tensor3, mode: MergeMode, upstream_grad: Tensor3) -> Tuple[Tensor3, Tensor3]:
    """
    Distribute the merged gradient back to both operands

    Max routes the gradient to the larger operand; ties go to `a`.
    """
    mode = MergeMode(mode)
    if a.shape != b.shape:
        raise ConfigurationError(f"Cannot merge tensors of shape {a.shape} and {b.shape}")
    g = upstream_grad.values
    expected = (a.height, a.width, 2 * a.channels if mode is MergeMode.CONCAT else a.channels)
    if g.shape != expected:
        raise ConfigurationError(f"Upstream gradient shape {g.shape} != merged shape {expected}")

    if mode is MergeMode.ADD:
        return Tensor3(g.copy()), Tensor3(g.copy())
    if mode is MergeMode.MEAN:
        return Tensor3(g / 2.0), Tensor3(g / 2.0)
    if mode is MergeMode.MAX:
        to_a = a.values >= b.values
        return Tensor3(np.where(to_a, g, 0.0)), Tensor3(np.where(to_a, 0.0, g))
    if mode is MergeMode.PRODUCT:
        return Tensor3(g * b.values), Tensor3(g * a.values)
    return Tensor3(g[:, :, :a.channels]), Tensor3(g[:, :, a.channels:])


@dataclass
class AdamState:
    """Moment buffers keyed like the parameter dict, plus the step counter"""

    first_moment: ParamDict
    second_moment: ParamDict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamDict) -> "AdamState":
        return cls(
            first_moment={k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()},
            second_moment={k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()},
            step=0,
        )


def adam_step(
    params: ParamDict,
    grads: ParamDict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[ParamDict, AdamState]:
    """
    One bias-corrected Adam update

    Args:
        params: Parameter arrays keyed by name
        grads: Gradients with the same keys and shapes
        state: Current optimizer state
        lr: Learning rate
        beta1, beta2: Moment decay rates
        eps: Denominator floor

    Returns:
        Tuple of (new params, new state); inputs are left untouched.
        Parameters keep their dtype.

    Raises:
        ConfigurationError: Keys or shapes disagree
        NumericError: A gradient is not finite (no update is applied)
    """
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise ConfigurationError("Parameter, gradient and optimizer state keys do not agree")
    for name, value in params.items():
        if grads[name].shape != value.shape or state.first_moment[name].shape != value.shape:
            raise ConfigurationError(f"Shape mismatch for parameter '{name}'")
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"Non-finite gradient for '{name}'; Adam step aborted", {"parameter": name})

    step = state.step + 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step

    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name].astype(np.float64)
        m = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        v = beta2 * state.second_moment[name] + (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        new_params[name] = (value.astype(np.float64) - update).astype(value.dtype)
        new_m[name] = m
        new_v[name] = v

    return new_params, AdamState(first_moment=new_m, second_moment=new_v, step=step)


def finite_diff_check(
    loss_fn: Callable[[ParamDict], Tuple[float, ParamDict]],
    params: ParamDict,
    eps: float = 1e-4,
    samples: Optional[int] = None,
    seed: int = 0,
    exclude: Optional[Callable[[str, Tuple[int, ...]], bool]] = None,
    min_magnitude: float = 0.0,
) -> float:
    """
    Compare analytic gradients against central differences

    Args:
        loss_fn: Maps a parameter dict to (loss, gradient dict)
        params: Point at which to check
        eps: Central-difference step
        samples: Coordinates sampled per array (all when None)
        seed: Sampling seed
        exclude: Predicate (name, index) -> True for non-differentiable
            coordinates (e.g. ReLU exactly at zero); those are skipped
        min_magnitude: Skip coordinates where both estimates are below this
            (their difference is round-off)

    Returns:
        Max over sampled coordinates of |a - d| / (|a| + |d| + 1e-12)
    """
    perturbed = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = loss_fn(perturbed)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for name, value in perturbed.items():
        if samples is None or samples >= value.size:
            flat_indices = np.arange(value.size)
        else:
            flat_indices = rng.choice(value.size, size=samples, replace=False)
        for flat in flat_indices:
            index = tuple(int(i) for i in np.unravel_index(int(flat), value.shape))
            if exclude is not None and exclude(name, index):
                continue
            original = value[index]
            value[index] = original + eps
            loss_plus, _ = loss_fn(perturbed)
            value[index] = original - eps
            loss_minus, _ = loss_fn(perturbed)
            value[index] = original

            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            exact = float(analytic[name][index])
            if abs(exact) < min_magnitude and abs(numeric) < min_magnitude:
                continue
            err = abs(exact - numeric) / (abs(exact) + abs(numeric) + 1e-12)
            worst = max(worst, err)

    logger.debug(f"Finite-difference check max relative error: {worst:.3e}")
    return worst
