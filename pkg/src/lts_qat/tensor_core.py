"""Dense tensor arithmetic: matmul, im2col and col2im.

Tensors are row-major ``numpy.ndarray`` values. Convolution is only ever
expressed as im2col followed by a single GEMM, so the weight-gradient GEMM is
the one place the sparse backward pass has to instrument.
"""
# pylint: disable=W1203
import logging
from contextlib import contextmanager
from typing import Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from lts_qat.common import ConfigError, DimensionError

logger = logging.getLogger("lts-qat.tensor_core")

Tensor = np.ndarray

_DETERMINISTIC = True


def set_deterministic(flag: bool) -> None:
    """Select the ascending-index matmul kernel (True) or BLAS (False)."""
    global _DETERMINISTIC  # pylint: disable=global-statement
    _DETERMINISTIC = bool(flag)
    logger.debug(f"deterministic kernels: {_DETERMINISTIC}")


def is_deterministic() -> bool:
    """Whether the ascending-index kernels are active."""
    return _DETERMINISTIC


@contextmanager
def deterministic(flag: bool = True) -> Iterator[None]:
    """Temporarily switch the matmul kernel."""
    previous = _DETERMINISTIC
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(previous)


def check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    """Raise DimensionError unless both shapes agree exactly."""
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[i, j] = sum_k a[i, k] * b[k, j].

    In deterministic mode the sum is accumulated in ascending k, one rank-1
    update at a time, so repeated calls are bit-identical.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner extents differ: {a.shape} x {b.shape}")
    if not _DETERMINISTIC:
        return np.matmul(a, b)
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def transpose(a: Tensor) -> Tensor:
    """Contiguous transpose of a matrix."""
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return np.ascontiguousarray(a.T)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent of a convolution; the division must be exact."""
    span = size + 2 * pad - kernel
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if span < 0:
        raise ConfigError(
            f"kernel {kernel} larger than padded extent {size + 2 * pad}")
    if span % stride != 0:
        raise ConfigError(
            f"non-exact output extent: ({size}+2*{pad}-{kernel})/{stride}")
    return span // stride + 1


class ConvGeometry(BaseModel):
    """Input shape and kernel geometry of one convolution."""
    model_config = ConfigDict(frozen=True)

    batch: int = Field(..., ge=1)
    channels: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    kh: int = Field(..., ge=1)
    kw: int = Field(..., ge=1)
    stride: int = 1
    pad: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_extents(self):
        """Output extents must be exact."""
        conv_output_size(self.height, self.kh, self.stride, self.pad)
        conv_output_size(self.width, self.kw, self.stride, self.pad)
        return self

    @classmethod
    def of(cls, x: Tensor, kh: int, kw: int, stride: int = 1,
           pad: int = 0) -> "ConvGeometry":
        """Geometry for an N x C x H x W input."""
        if x.ndim != 4:
            raise DimensionError(f"expected N x C x H x W input, got {x.shape}")
        n, c, h, w = x.shape
        try:
            return cls(batch=n, channels=c, height=h, width=w,
                       kh=kh, kw=kw, stride=stride, pad=pad)
        except ValidationError as e:
            reason = e.errors()[0]["msg"]
            logger.error(f"Invalid {kh}x{kw} stride {stride} pad {pad} geometry for "
                         f"input {x.shape}: {reason}")
            raise ConfigError(f"invalid convolution geometry for input {x.shape}: "
                              f"{reason}") from e

    @property
    def h_out(self) -> int:
        """Output height."""
        return conv_output_size(self.height, self.kh, self.stride, self.pad)

    @property
    def w_out(self) -> int:
        """Output width."""
        return conv_output_size(self.width, self.kw, self.stride, self.pad)

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        """N, C, H, W."""
        return (self.batch, self.channels, self.height, self.width)

    @property
    def cols_shape(self) -> tuple[int, int]:
        """(C*kh*kw, N*H_out*W_out)."""
        return (self.channels * self.kh * self.kw,
                self.batch * self.h_out * self.w_out)


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold receptive fields into columns.

    Row index is c*kh*kw + i*kw + j, column index is n*H_out*W_out +
    oh*W_out + ow. Padding contributes zeros.
    """
    geom = ConvGeometry.of(x, kh, kw, stride, pad)
    n, c, _, _ = geom.input_shape
    h_out, w_out = geom.h_out, geom.w_out
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        h_end = i + stride * h_out
        for j in range(kw):
            w_end = j + stride * w_out
            cols[:, i, j] = x[:, :, i:h_end:stride, j:w_end:stride].transpose(1, 0, 2, 3)
    return cols.reshape(geom.cols_shape)


def col2im(cols: Tensor, geometry: ConvGeometry) -> Tensor:
    """Scatter-add columns back to an image; overlapping positions sum."""
    if cols.shape != geometry.cols_shape:
        raise DimensionError(
            f"col2im: columns {cols.shape} do not match geometry {geometry.cols_shape}")
    n, c, h, w = geometry.input_shape
    kh, kw, stride, pad = geometry.kh, geometry.kw, geometry.stride, geometry.pad
    h_out, w_out = geometry.h_out, geometry.w_out
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(c, kh, kw, n, h_out, w_out)
    for i in range(kh):
        h_end = i + stride * h_out
        for j in range(kw):
            w_end = j + stride * w_out
            padded[:, :, i:h_end:stride, j:w_end:stride] += blocks[:, i, j].transpose(1, 0, 2, 3)
    if pad > 0:
        return np.ascontiguousarray(padded[:, :, pad:pad + h, pad:pad + w])
    return padded
