"""Quantized and plain layers, loss, and their backward passes."""
# pylint: disable=W1203, R0902, R0913, R0917
import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from pydantic.dataclasses import dataclass

from lts_qat.common import ConfigError, DataValidationError, DimensionError
from lts_qat.quantizer import (
    ClipBounds,
    QuantCache,
    QuantConfig,
    clamp_bounds,
    fake_quant_backward,
    fake_quant_forward,
    init_bounds,
    level_snapshot,
)
from lts_qat.sparse_backward import SkipGemmReport, weight_grad_skipped
from lts_qat.tensor_core import (
    ConvGeometry,
    Tensor,
    col2im,
    im2col,
    matmul,
    transpose,
)

logger = logging.getLogger("lts-qat.layers")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class Parameter:
    """Trainable tensor with its gradient, momentum buffer and freeze mask.

    Only quantized weights carry a frozen mask; biases, batch-norm
    parameters and clip bounds never do.
    """
    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = None
    frozen_mask: Optional[np.ndarray] = None
    is_bounds: bool = False

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)

    def freeze(self, new_mask: np.ndarray) -> int:
        """Mark positions frozen for good and zero their momentum."""
        if self.frozen_mask is None:
            raise ConfigError(f"{self.name} has no frozen mask")
        fresh = new_mask & ~self.frozen_mask
        self.frozen_mask |= fresh
        self.velocity[fresh] = 0
        return int(fresh.sum())

    @property
    def frozen_count(self) -> int:
        """Number of frozen positions."""
        return 0 if self.frozen_mask is None else int(self.frozen_mask.sum())

    def clamp(self) -> None:
        """Keep u >= l + eps for bound parameters."""
        if self.is_bounds:
            lower, upper = clamp_bounds(float(self.value[0]), float(self.value[1]),
                                         self.value.dtype)
            self.value[0], self.value[1] = lower, upper


class QuantOptions(BaseModel):
    """Quantizer behaviour switches shared by every quantized layer."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    route_clipped_grad: bool = False
    frozen_bound_grad: bool = True


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class LayerCache:
    """Forward state of a quantized linear or conv layer."""
    kind: str
    weight_shape: tuple
    act_cols: np.ndarray
    w_mat: np.ndarray
    weight_cache: Optional[QuantCache] = None
    act_cache: Optional[QuantCache] = None
    geometry: Optional[ConvGeometry] = None
    frozen_mask: Optional[np.ndarray] = None
    frozen_bound_grad: bool = True


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class LayerGrads:
    """Gradients of one quantized layer."""
    g_x: np.ndarray
    g_weight: np.ndarray
    g_bias: np.ndarray
    g_weight_bounds: np.ndarray
    g_act_bounds: np.ndarray
    report: SkipGemmReport


def _quantize_operands(x: Tensor, weight: Tensor, bounds_w: Optional[ClipBounds],
                       bounds_a: Optional[ClipBounds], cfg_w: Optional[QuantConfig],
                       cfg_a: Optional[QuantConfig]):
    if cfg_w is not None and bounds_w is not None:
        w_bar, wcache = fake_quant_forward(weight, bounds_w, cfg_w)
    else:
        w_bar, wcache = weight, None
    if cfg_a is not None and bounds_a is not None:
        x_bar, acache = fake_quant_forward(x, bounds_a, cfg_a)
    else:
        x_bar, acache = x, None
    return w_bar, wcache, x_bar, acache


def quant_linear_forward(x: Tensor, weight: Tensor, bias: Tensor,
                         bounds_w: Optional[ClipBounds], bounds_a: Optional[ClipBounds],
                         cfg_w: Optional[QuantConfig] = None,
                         cfg_a: Optional[QuantConfig] = None,
                         frozen_mask: Optional[np.ndarray] = None,
                         frozen_bound_grad: bool = True) -> tuple[Tensor, LayerCache]:
    """y = Q(x) . Q(W)^T + b for an N x in input and out x in weight."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}")
    w_bar, wcache, x_bar, acache = _quantize_operands(
        x, weight, bounds_w, bounds_a, cfg_w, cfg_a)
    y = matmul(x_bar, transpose(w_bar)) + bias
    cache = LayerCache(kind="linear", weight_shape=weight.shape,
                       act_cols=transpose(x_bar), w_mat=w_bar,
                       weight_cache=wcache, act_cache=acache,
                       frozen_mask=frozen_mask, frozen_bound_grad=frozen_bound_grad)
    return y, cache


def quant_conv_forward(x: Tensor, weight: Tensor, bias: Tensor,
                       bounds_w: Optional[ClipBounds], bounds_a: Optional[ClipBounds],
                       cfg_w: Optional[QuantConfig] = None,
                       cfg_a: Optional[QuantConfig] = None,
                       stride: int = 1, pad: int = 0,
                       frozen_mask: Optional[np.ndarray] = None,
                       frozen_bound_grad: bool = True) -> tuple[Tensor, LayerCache]:
    """Convolution as W_mat [C_out x C*kh*kw] . im2col(Q(x))."""
    c_out, c_in, kh, kw = weight.shape
    if x.ndim != 4 or x.shape[1] != c_in:
        raise DimensionError(
            f"conv: input {x.shape} incompatible with weight {weight.shape}")
    geometry = ConvGeometry.of(x, kh, kw, stride, pad)
    w_bar, wcache, x_bar, acache = _quantize_operands(
        x, weight, bounds_w, bounds_a, cfg_w, cfg_a)
    cols = im2col(x_bar, kh, kw, stride, pad)
    w_mat = w_bar.reshape(c_out, -1)
    y_mat = matmul(w_mat, cols)
    y = y_mat.reshape(c_out, geometry.batch, geometry.h_out, geometry.w_out)
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3)) + bias.reshape(1, -1, 1, 1)
    mask = None if frozen_mask is None else frozen_mask.reshape(c_out, -1)
    cache = LayerCache(kind="conv", weight_shape=weight.shape, act_cols=cols,
                       w_mat=w_mat, weight_cache=wcache, act_cache=acache,
                       geometry=geometry, frozen_mask=mask,
                       frozen_bound_grad=frozen_bound_grad)
    return y, cache


def layer_backward(g_out: Tensor, cache: LayerCache) -> LayerGrads:
    """Gradients of a quantized linear/conv layer.

    The weight gradient goes through the skip kernel with the current frozen
    mask. Bound gradients see every weight, frozen ones included, unless
    ``frozen_bound_grad`` is off.
    """
    if cache.kind == "linear":
        g_mat = transpose(g_out)
        g_bias = g_out.sum(axis=0)
    else:
        g_mat = np.ascontiguousarray(
            g_out.transpose(1, 0, 2, 3)).reshape(g_out.shape[1], -1)
        g_bias = g_mat.sum(axis=1)
    m, n = cache.w_mat.shape
    mask = cache.frozen_mask
    if mask is None:
        mask = np.zeros((m, n), dtype=bool)
    g_wbar, report = weight_grad_skipped(cache.act_cols, g_mat, mask)
    if cache.frozen_bound_grad and cache.weight_cache is not None and mask.any():
        g_frozen, frozen_report = weight_grad_skipped(cache.act_cols, g_mat, ~mask)
        g_wbar_full = g_wbar + g_frozen
        report = report.model_copy(
            update={"macs_bound_grad": frozen_report.macs_performed})
    else:
        g_wbar_full = g_wbar
    g_weight_bounds = np.zeros(2, dtype=np.float64)
    if cache.weight_cache is not None:
        g_w, g_lw, g_uw = fake_quant_backward(
            g_wbar_full.reshape(cache.weight_shape), cache.weight_cache)
        g_w = np.where(mask.reshape(cache.weight_shape), g_w.dtype.type(0), g_w)
        g_weight_bounds[:] = (g_lw, g_uw)
    else:
        g_w = g_wbar.reshape(cache.weight_shape)

    if cache.kind == "linear":
        g_xbar = matmul(g_out, cache.w_mat)
    else:
        g_cols = matmul(transpose(cache.w_mat), g_mat)
        g_xbar = col2im(g_cols, cache.geometry)
    g_act_bounds = np.zeros(2, dtype=np.float64)
    if cache.act_cache is not None:
        g_x, g_la, g_ua = fake_quant_backward(g_xbar, cache.act_cache)
        g_act_bounds[:] = (g_la, g_ua)
    else:
        g_x = g_xbar
    return LayerGrads(g_x=g_x, g_weight=g_w, g_bias=g_bias,
                      g_weight_bounds=g_weight_bounds,
                      g_act_bounds=g_act_bounds, report=report)


def batchnorm_forward(x: Tensor, gamma: Tensor, beta: Tensor,
                      running_mean: Tensor, running_var: Tensor,
                      training: bool) -> tuple[Tensor, Optional[dict]]:
    """Batch normalization over every axis but the channel axis.

    In training mode the running statistics are updated in place.
    """
    if x.shape[1] != gamma.shape[0]:
        raise DimensionError(
            f"batchnorm: {x.shape[1]} channels but state has {gamma.shape[0]}")
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = -1
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(BN_EPS))
    x_hat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = gamma.reshape(bshape) * x_hat + beta.reshape(bshape)
    if not training:
        return y.astype(x.dtype, copy=False), None
    cache = {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma,
             "axes": axes, "bshape": bshape}
    return y.astype(x.dtype, copy=False), cache


def batchnorm_backward(g_out: Tensor, cache: dict) -> tuple[Tensor, Tensor, Tensor]:
    """Input, gamma and beta gradients of training-mode batch norm."""
    x_hat, inv_std = cache["x_hat"], cache["inv_std"]
    axes, bshape = cache["axes"], cache["bshape"]
    n = g_out.size // g_out.shape[1]
    g_beta = g_out.sum(axis=axes)
    g_gamma = (g_out * x_hat).sum(axis=axes)
    g_xhat = g_out * cache["gamma"].reshape(bshape)
    g_x = (inv_std.reshape(bshape) / n) * (
        n * g_xhat
        - g_xhat.sum(axis=axes).reshape(bshape)
        - x_hat * (g_xhat * x_hat).sum(axis=axes).reshape(bshape))
    return g_x.astype(g_out.dtype, copy=False), g_gamma, g_beta


def cross_entropy_fwd_bwd(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataValidationError(
            f"label out of range [0, {classes}): min={labels.min()} max={labels.max()}")
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(batch)
    loss = float(np.mean(np.log(total[:, 0]) - shifted[rows, labels]))
    probs = exp / total
    probs[rows, labels] -= 1.0
    return loss, (probs / batch).astype(logits.dtype)


class Layer:
    """Base layer: forward caches what backward needs."""
    name: str = "layer"

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        """Forward pass."""
        raise NotImplementedError

    def backward(self, g_out: Tensor) -> Tensor:
        """Backward pass; parameter gradients are written to ``Parameter.grad``."""
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state."""
        return {}


class QuantLayer(Layer):
    """Shared state of quantized linear and convolution layers."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray,
                 bit_width: Optional[int], options: QuantOptions):
        self.name = name
        self.quantize = bit_width is not None
        self.options = options
        self.weight = Parameter(name=f"{name}.weight", value=weight,
                                frozen_mask=np.zeros(weight.shape, dtype=bool))
        self.bias = Parameter(name=f"{name}.bias", value=bias)
        self.weight_bounds: Optional[Parameter] = None
        self.act_bounds: Optional[Parameter] = None
        self.weight_config: Optional[QuantConfig] = None
        self.act_config: Optional[QuantConfig] = None
        if bit_width is not None:
            self.weight_config = QuantConfig(
                bit_width=bit_width, kind="weight",
                route_clipped_grad=options.route_clipped_grad)
            self.act_config = QuantConfig(
                bit_width=bit_width, kind="activation",
                route_clipped_grad=options.route_clipped_grad)
            self.weight_bounds = Parameter(
                name=f"{name}.weight_bounds",
                value=np.array([-1.0, 1.0], dtype=weight.dtype), is_bounds=True)
            self.act_bounds = Parameter(
                name=f"{name}.act_bounds",
                value=np.array([0.0, 1.0], dtype=weight.dtype), is_bounds=True)
        self._cache: Optional[LayerCache] = None
        self.last_report: Optional[SkipGemmReport] = None

    @property
    def bit_width(self) -> Optional[int]:
        """Bit width, None when the layer runs in full precision."""
        return None if self.weight_config is None else self.weight_config.bit_width

    def bounds(self) -> tuple[Optional[ClipBounds], Optional[ClipBounds]]:
        """Current weight and activation ClipBounds."""
        if not self.quantize:
            return None, None
        return (ClipBounds.from_array(self.weight_bounds.value),
                ClipBounds.from_array(self.act_bounds.value))

    def init_weight_bounds(self) -> ClipBounds:
        """-3 std / +3 std of the current full-precision weight."""
        b = init_bounds(self.weight.value, "weight", self.weight_bounds.value.dtype)
        self.weight_bounds.value[:] = (b.lower, b.upper)
        return b

    def init_act_bounds(self, x: Tensor) -> ClipBounds:
        """min / max of a calibration activation."""
        b = init_bounds(x, "activation", self.act_bounds.value.dtype)
        self.act_bounds.value[:] = (b.lower, b.upper)
        return b

    def weight_levels(self) -> np.ndarray:
        """Current integer weight levels (uint8)."""
        bounds_w, _ = self.bounds()
        return level_snapshot(self.weight.value, bounds_w, self.bit_width)

    def parameters(self) -> list[Parameter]:
        params = [self.weight, self.bias]
        if self.quantize:
            params += [self.weight_bounds, self.act_bounds]
        return params

    def backward(self, g_out: Tensor) -> Tensor:
        grads = layer_backward(g_out, self._cache)
        self.weight.grad[...] = grads.g_weight
        self.bias.grad[...] = grads.g_bias
        if self.quantize:
            self.weight_bounds.grad[...] = grads.g_weight_bounds
            self.act_bounds.grad[...] = grads.g_act_bounds
        self.last_report = grads.report
        self._cache = None
        return grads.g_x


class QuantLinear(QuantLayer):
    """Fully connected layer with fake-quantized weight and input."""

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        bounds_w, bounds_a = self.bounds()
        y, cache = quant_linear_forward(
            x, self.weight.value, self.bias.value, bounds_w, bounds_a,
            self.weight_config, self.act_config,
            frozen_mask=self.weight.frozen_mask,
            frozen_bound_grad=self.options.frozen_bound_grad)
        self._cache = cache if training else None
        return y


class QuantConv2d(QuantLayer):
    """Convolution through im2col with fake-quantized weight and input."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray,
                 bit_width: Optional[int], options: QuantOptions,
                 stride: int = 1, pad: int = 0):
        super().__init__(name, weight, bias, bit_width, options)
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        bounds_w, bounds_a = self.bounds()
        y, cache = quant_conv_forward(
            x, self.weight.value, self.bias.value, bounds_w, bounds_a,
            self.weight_config, self.act_config, stride=self.stride, pad=self.pad,
            frozen_mask=self.weight.frozen_mask,
            frozen_bound_grad=self.options.frozen_bound_grad)
        self._cache = cache if training else None
        return y


class BatchNorm(Layer):
    """Full-precision batch norm; never quantized, never frozen."""

    def __init__(self, name: str, channels: int, dtype=np.float32):
        self.name = name
        self.gamma = Parameter(name=f"{name}.gamma", value=np.ones(channels, dtype=dtype))
        self.beta = Parameter(name=f"{name}.beta", value=np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache: Optional[dict] = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        y, self._cache = batchnorm_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var, training)
        return y

    def backward(self, g_out: Tensor) -> Tensor:
        g_x, g_gamma, g_beta = batchnorm_backward(g_out, self._cache)
        self.gamma.grad[...] = g_gamma
        self.beta.grad[...] = g_beta
        self._cache = None
        return g_x

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


class ReLU(Layer):
    """max(x, 0)."""

    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask: Optional[np.ndarray] = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, g_out: Tensor) -> Tensor:
        return np.where(self._mask, g_out, g_out.dtype.type(0))


class MaxPool2d(Layer):
    """Non-overlapping max pooling; ties go to the first element."""

    def __init__(self, name: str = "pool", size: int = 2):
        self.name = name
        self.size = size
        self._argmax: Optional[np.ndarray] = None
        self._shape: Optional[tuple] = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ConfigError(f"maxpool{s}: spatial extent {h}x{w} not divisible")
        windows = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, h // s, w // s, s * s)
        self._argmax = windows.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, g_out: Tensor) -> Tensor:
        n, c, h, w = self._shape
        s = self.size
        windows = np.zeros((n, c, h // s, w // s, s * s), dtype=g_out.dtype)
        np.put_along_axis(windows, self._argmax[..., None], g_out[..., None], axis=-1)
        windows = windows.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(windows).reshape(n, c, h, w)


class Flatten(Layer):
    """N x C x H x W -> N x (C*H*W)."""

    def __init__(self, name: str = "flatten"):
        self.name = name
        self._shape: Optional[tuple] = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g_out: Tensor) -> Tensor:
        return g_out.reshape(self._shape)
