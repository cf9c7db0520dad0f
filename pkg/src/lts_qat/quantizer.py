"""Uniform fake quantizer with trainable clipping bounds and STE backward."""
# pylint: disable=W1203
import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from pydantic.dataclasses import dataclass

from lts_qat.common import BitWidth, QuantizationError, TensorKind
from lts_qat.tensor_core import Tensor, check_same_shape

logger = logging.getLogger("lts-qat.quantizer")

BOUND_EPS = 1e-6


class QuantConfig(BaseModel):
    """Bit width and tensor kind of one quantizer."""
    model_config = ConfigDict(frozen=True)

    bit_width: BitWidth
    kind: TensorKind
    # off: literal derivative, clipped elements give no bound gradient
    route_clipped_grad: bool = False

    @property
    def levels(self) -> int:
        """Largest level index, 2^B - 1."""
        return 2 ** self.bit_width - 1

    @property
    def interval(self) -> float:
        """Quantization interval 2 / 2^B used by the freezing rule."""
        return interval(self.bit_width)

    @property
    def scale(self) -> float:
        """Slope of the dequantized value w.r.t. the normalized one."""
        return 2.0 if self.kind == "weight" else 1.0


def interval(bit_width: int) -> float:
    """Delta^B = 2 / 2^B."""
    return 2.0 / 2 ** bit_width


class ClipBounds(BaseModel):
    """Layer-wise lower and upper clipping bounds."""
    model_config = ConfigDict(frozen=True)

    lower: float
    upper: float

    @model_validator(mode="after")
    def _check_order(self):
        """u must exceed l."""
        if not self.upper > self.lower:
            raise ValueError(
                f"upper bound {self.upper} must exceed lower bound {self.lower}")
        return self

    @property
    def span(self) -> float:
        """u - l."""
        return self.upper - self.lower

    @classmethod
    def from_array(cls, value: np.ndarray) -> "ClipBounds":
        """Bounds stored as a (2,) parameter array [l, u]."""
        return cls(lower=float(value[0]), upper=float(value[1]))

    def to_array(self, dtype=np.float32) -> np.ndarray:
        """(2,) array [l, u]."""
        return np.array([self.lower, self.upper], dtype=dtype)


def clamp_bounds(lower: float, upper: float, dtype=np.float64) -> tuple[float, float]:
    """Repair u >= l + eps in the dtype the bounds are stored in."""
    kind = np.dtype(dtype).type
    lo, hi = kind(lower), kind(upper)
    # l + eps rounds back to l once |l| is large in float32
    floor = max(kind(lo + kind(BOUND_EPS)), np.nextafter(lo, kind(np.inf)))
    if hi < floor:
        hi = floor
    return float(lo), float(hi)


@dataclass(frozen=True, config=ConfigDict(arbitrary_types_allowed=True))
class QuantCache:
    """Forward values needed by the STE backward."""
    x: np.ndarray
    x_n: np.ndarray
    q: np.ndarray
    in_range: np.ndarray
    lower: float
    upper: float
    config: QuantConfig


def normalize(x: Tensor, bounds: ClipBounds) -> Tensor:
    """x_n = clip((x - l) / (u - l), 0, 1)."""
    if not bounds.upper > bounds.lower:
        raise QuantizationError(
            f"invalid bounds: u={bounds.upper} <= l={bounds.lower}")
    x_n = (x - x.dtype.type(bounds.lower)) / x.dtype.type(bounds.span)
    return np.clip(x_n, 0, 1)


def quantize_levels(x_n: Tensor, bit_width: int) -> Tensor:
    """q = round((2^B - 1) * x_n), ties to even."""
    return np.rint(x_n * x_n.dtype.type(2 ** bit_width - 1))


def dequantize(q: Tensor, bit_width: int, kind: TensorKind) -> Tensor:
    """Map integer levels back to [-1, 1] (weights) or [0, 1] (activations)."""
    levels = q.dtype.type(2 ** bit_width - 1)
    if kind == "weight":
        return 2 * (q / levels - q.dtype.type(0.5))
    return q / levels


def fake_quant_forward(x: Tensor, bounds: ClipBounds,
                       config: QuantConfig) -> tuple[Tensor, QuantCache]:
    """Normalize, quantize and dequantize ``x``."""
    x_n = normalize(x, bounds)
    q = quantize_levels(x_n, config.bit_width)
    x_bar = dequantize(q, config.bit_width, config.kind)
    in_range = (x >= bounds.lower) & (x <= bounds.upper)
    cache = QuantCache(x=x, x_n=x_n, q=q, in_range=in_range,
                       lower=bounds.lower, upper=bounds.upper, config=config)
    return x_bar, cache


def surrogate_forward(x: Tensor, bounds: ClipBounds, config: QuantConfig) -> Tensor:
    """Forward with the round replaced by identity, the function STE differentiates."""
    x_n = normalize(x, bounds)
    if config.kind == "weight":
        return 2 * (x_n - x.dtype.type(0.5))
    return x_n


def fake_quant_backward(g_out: Tensor, cache: QuantCache) -> tuple[Tensor, float, float]:
    """STE backward: gradients w.r.t. x, l and u.

    Clipped elements contribute nothing to any gradient unless
    ``route_clipped_grad`` is set, in which case their upstream gradient is
    passed to the violated bound.
    """
    check_same_shape(g_out, cache.x, "fake_quant_backward")
    span = cache.upper - cache.lower
    k = cache.config.scale
    dtype = g_out.dtype.type
    scaled = g_out * dtype(k / span)
    g_x = np.where(cache.in_range, scaled, dtype(0))
    inside = g_x.astype(np.float64, copy=False)
    x64 = cache.x.astype(np.float64, copy=False)
    g_l = float(np.sum(inside * (x64 - cache.upper)) / span)
    g_u = float(np.sum(inside * -(x64 - cache.lower)) / span)
    if cache.config.route_clipped_grad:
        g64 = g_out.astype(np.float64, copy=False)
        g_l += float(np.sum(g64[cache.x < cache.lower]))
        g_u += float(np.sum(g64[cache.x > cache.upper]))
    return g_x, g_l, g_u


def init_bounds(x: Tensor, kind: TensorKind, dtype=None) -> ClipBounds:
    """-3 std / +3 std for weights, min / max for activations.

    The result is representable in ``dtype`` (default: the dtype of ``x``).
    """
    if x.size == 0:
        raise QuantizationError("cannot initialize bounds from an empty tensor")
    if kind == "weight":
        std = float(np.std(x, dtype=np.float64))
        lower, upper = -3.0 * std + 0.0, 3.0 * std
    else:
        lower, upper = float(np.min(x)), float(np.max(x))
    if dtype is None:
        dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    lower, upper = clamp_bounds(lower, upper, dtype)
    logger.debug(f"init {kind} bounds l={lower:.6g} u={upper:.6g}")
    return ClipBounds(lower=lower, upper=upper)


def level_snapshot(x: Tensor, bounds: ClipBounds, bit_width: int,
                   out: Optional[np.ndarray] = None) -> np.ndarray:
    """Integer levels of ``x`` as uint8, without building a cache."""
    q = quantize_levels(normalize(x, bounds), bit_width)
    if out is None:
        return q.astype(np.uint8)
    np.copyto(out, q, casting="unsafe")
    return out
