"""Model specifications, the reference networks and the Network container."""
# pylint: disable=W1203, too-few-public-methods
import logging
from typing import Iterator, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from typing_extensions import Annotated

from lts_qat.common import BitWidth, CheckpointError, DimensionError, Precision, dtype_for
from lts_qat.layers import (
    BatchNorm,
    Flatten,
    Layer,
    MaxPool2d,
    Parameter,
    QuantConv2d,
    QuantLayer,
    QuantLinear,
    QuantOptions,
    ReLU,
    cross_entropy_fwd_bwd,
)
from lts_qat.tensor_core import conv_output_size

logger = logging.getLogger("lts-qat.models")


class LinearSpec(BaseModel):
    """Quantizable fully connected layer."""
    kind: Literal["linear"] = "linear"
    name: str
    in_features: int = Field(..., ge=1)
    out_features: int = Field(..., ge=1)
    quantize: bool = True


class ConvSpec(BaseModel):
    """Quantizable convolution."""
    kind: Literal["conv"] = "conv"
    name: str
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    pad: int = Field(1, ge=0)
    quantize: bool = True


class BatchNormSpec(BaseModel):
    """Full-precision batch normalization."""
    kind: Literal["batchnorm"] = "batchnorm"
    name: str
    channels: int = Field(..., ge=1)


class ReluSpec(BaseModel):
    """ReLU."""
    kind: Literal["relu"] = "relu"
    name: str = "relu"


class MaxPoolSpec(BaseModel):
    """Max pooling."""
    kind: Literal["maxpool"] = "maxpool"
    name: str = "pool"
    size: int = Field(2, ge=1)


class FlattenSpec(BaseModel):
    """Flatten to N x features."""
    kind: Literal["flatten"] = "flatten"
    name: str = "flatten"


LayerSpec = Annotated[
    Union[LinearSpec, ConvSpec, BatchNormSpec, ReluSpec, MaxPoolSpec, FlattenSpec],
    Field(discriminator="kind")]


class ModelSpec(BaseModel):
    """Ordered layer descriptors plus input shape and loss."""
    name: str
    input_shape: tuple[int, ...]
    num_classes: int = Field(10, ge=2)
    bit_width: Optional[BitWidth] = None
    layers: list[LayerSpec]
    loss: Literal["cross_entropy"] = "cross_entropy"

    @model_validator(mode="after")
    def _check_shapes(self):
        """Walk the layers and check adjacent shapes agree."""
        shape = tuple(self.input_shape)
        names = set()
        for layer in self.layers:
            if layer.name in names:
                raise ValueError(f"duplicate layer name {layer.name}")
            names.add(layer.name)
            shape = _output_shape(layer, shape)
        if shape != (self.num_classes,):
            raise ValueError(
                f"model output {shape} does not match {self.num_classes} classes")
        return self


def _output_shape(layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, LinearSpec):
        if shape != (layer.in_features,):
            raise ValueError(f"{layer.name}: expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, ConvSpec):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ValueError(f"{layer.name}: expects {layer.in_channels} channels, got {shape}")
        h = conv_output_size(shape[1], layer.kernel, layer.stride, layer.pad)
        w = conv_output_size(shape[2], layer.kernel, layer.stride, layer.pad)
        return (layer.out_channels, h, w)
    if isinstance(layer, BatchNormSpec):
        if shape[0] != layer.channels:
            raise ValueError(f"{layer.name}: expects {layer.channels} channels, got {shape}")
        return shape
    if isinstance(layer, MaxPoolSpec):
        if len(shape) != 3 or shape[1] % layer.size or shape[2] % layer.size:
            raise ValueError(f"{layer.name}: cannot pool {shape} by {layer.size}")
        return (shape[0], shape[1] // layer.size, shape[2] // layer.size)
    if isinstance(layer, FlattenSpec):
        return (int(np.prod(shape)),)
    return shape


def mlp_s(bit_width: Optional[int] = None,
          input_shape: tuple[int, ...] = (1, 28, 28), num_classes: int = 10) -> ModelSpec:
    """784 -> 128 -> 10, both layers quantized when ``bit_width`` is set."""
    quantize = bit_width is not None
    features = int(np.prod(input_shape))
    return ModelSpec(
        name="mlp-s", input_shape=input_shape, num_classes=num_classes,
        bit_width=bit_width,
        layers=[FlattenSpec(),
                LinearSpec(name="fc1", in_features=features, out_features=128,
                           quantize=quantize),
                ReluSpec(name="relu1"),
                LinearSpec(name="fc2", in_features=128, out_features=num_classes,
                           quantize=quantize)])


def convnet_s(bit_width: Optional[int] = None,
              input_shape: tuple[int, ...] = (1, 28, 28), num_classes: int = 10) -> ModelSpec:
    """conv3x3x16/BN/ReLU -> conv3x3x32/BN/ReLU -> maxpool2 -> fc."""
    quantize = bit_width is not None
    c, h, w = input_shape
    return ModelSpec(
        name="convnet-s", input_shape=input_shape, num_classes=num_classes,
        bit_width=bit_width,
        layers=[ConvSpec(name="conv1", in_channels=c, out_channels=16, quantize=quantize),
                BatchNormSpec(name="bn1", channels=16),
                ReluSpec(name="relu1"),
                ConvSpec(name="conv2", in_channels=16, out_channels=32, quantize=quantize),
                BatchNormSpec(name="bn2", channels=32),
                ReluSpec(name="relu2"),
                MaxPoolSpec(name="pool"),
                FlattenSpec(),
                LinearSpec(name="fc", in_features=32 * (h // 2) * (w // 2),
                           out_features=num_classes, quantize=quantize)])


MODEL_FACTORIES = {"mlp-s": mlp_s, "convnet-s": convnet_s}


class Network:
    """Sequential stack of layers with a cross-entropy head."""

    def __init__(self, spec: ModelSpec, layers: list[Layer]):
        self.spec = spec
        self.layers = layers

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        """Logits of a batch."""
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, g_logits: np.ndarray) -> np.ndarray:
        """Backpropagate; fills every ``Parameter.grad``."""
        g = g_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def loss_and_backward(self, x: np.ndarray, labels: np.ndarray) -> float:
        """Forward, cross-entropy and backward for one batch."""
        logits = self.forward(x, training=True)
        loss, g_logits = cross_entropy_fwd_bwd(logits, labels)
        self.backward(g_logits)
        return loss

    def parameters(self) -> list[Parameter]:
        """All trainable parameters in layer order."""
        return [p for layer in self.layers for p in layer.parameters()]

    def quant_layers(self) -> list[QuantLayer]:
        """Linear and conv layers, quantized or not."""
        return [layer for layer in self.layers if isinstance(layer, QuantLayer)]

    def quantized_layers(self) -> list[QuantLayer]:
        """Layers whose weights are fake-quantized."""
        return [layer for layer in self.quant_layers() if layer.quantize]

    def init_weight_bounds(self) -> None:
        """-3 std / +3 std weight bounds for every quantized layer."""
        for layer in self.quantized_layers():
            b = layer.init_weight_bounds()
            logger.info(f"{layer.name}: weight bounds [{b.lower:.4f}, {b.upper:.4f}]")

    def calibrate_activation_bounds(self, x: np.ndarray) -> None:
        """Set activation bounds from one calibration batch.

        Each quantized layer sees its input as produced by the layers before
        it, which are already quantizing with freshly calibrated bounds.
        """
        for layer in self.layers:
            if isinstance(layer, QuantLayer) and layer.quantize:
                b = layer.init_act_bounds(x)
                logger.info(f"{layer.name}: activation bounds [{b.lower:.4f}, {b.upper:.4f}]")
            x = layer.forward(x, training=False)

    def weight_levels(self) -> dict[str, np.ndarray]:
        """Current integer levels of every quantized weight."""
        return {layer.name: layer.weight_levels() for layer in self.quantized_layers()}

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every persistent tensor of the model, in a fixed order."""
        for layer in self.layers:
            for param in layer.parameters():
                yield param.name, param.value
                yield f"{param.name}.velocity", param.velocity
                if param.frozen_mask is not None:
                    yield f"{param.name}.frozen", param.frozen_mask
            yield from layer.buffers().items()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every persistent tensor."""
        return {name: np.array(t, copy=True) for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy tensors in place; returns the names that were loaded.

        With ``strict`` every model tensor must be present. Shape conflicts
        always raise.
        """
        loaded = []
        for name, target in self.named_tensors():
            if name not in state:
                if strict:
                    raise CheckpointError(f"missing tensor {name}")
                continue
            source = state[name]
            if source.shape != target.shape:
                raise CheckpointError(
                    f"shape conflict for tensor {name}: checkpoint {source.shape} "
                    f"vs model {target.shape}")
            np.copyto(target, source, casting="unsafe")
            loaded.append(name)
        return loaded


def build_model(spec: ModelSpec, seed: int = 0, precision: Precision = 32,
                options: Optional[QuantOptions] = None) -> Network:
    """Instantiate a ModelSpec with He-normal weights and zero biases."""
    dtype = dtype_for(precision)
    options = options or QuantOptions()
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for ls in spec.layers:
        bits = spec.bit_width if getattr(ls, "quantize", False) else None
        if isinstance(ls, LinearSpec):
            w = rng.normal(0.0, np.sqrt(2.0 / ls.in_features),
                           (ls.out_features, ls.in_features)).astype(dtype)
            layers.append(QuantLinear(ls.name, w, np.zeros(ls.out_features, dtype=dtype),
                                      bits, options))
        elif isinstance(ls, ConvSpec):
            fan_in = ls.in_channels * ls.kernel * ls.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (ls.out_channels, ls.in_channels, ls.kernel, ls.kernel)).astype(dtype)
            layers.append(QuantConv2d(ls.name, w, np.zeros(ls.out_channels, dtype=dtype),
                                      bits, options, stride=ls.stride, pad=ls.pad))
        elif isinstance(ls, BatchNormSpec):
            layers.append(BatchNorm(ls.name, ls.channels, dtype=dtype))
        elif isinstance(ls, ReluSpec):
            layers.append(ReLU(ls.name))
        elif isinstance(ls, MaxPoolSpec):
            layers.append(MaxPool2d(ls.name, ls.size))
        elif isinstance(ls, FlattenSpec):
            layers.append(Flatten(ls.name))
    return Network(spec, layers)


def evaluate(model: Network, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in percent, eval-mode forward."""
    if images.shape[0] != labels.shape[0]:
        raise DimensionError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size == 0:
        return 0.0
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward(images[start:start + batch_size], training=False)
        correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return 100.0 * correct / labels.shape[0]
