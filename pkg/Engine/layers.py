"""
Слои Residual Encoder U-Net поверх ядер tensor_core и sparse_ops.
Каждый слой хранит кэш последнего прямого прохода; обратный проход
накапливает градиенты в Parameter.grad.
"""

import math
from typing import Iterator, List, Optional

import numpy as np

from Engine.sparse_ops import (
    masked_instance_norm,
    masked_instance_norm_backward,
    sparse_conv3d,
    sparse_conv3d_backward,
)
from Engine.tensor_core import (
    ConvSpec,
    Parameter,
    conv3d,
    conv3d_backward,
    conv3d_transpose,
    conv3d_transpose_backward,
    leaky_relu,
    leaky_relu_backward,
)


KAIMING_NEGATIVE_SLOPE = 1e-2


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + KAIMING_NEGATIVE_SLOPE ** 2))
    return (rng.standard_normal(shape) * (gain / math.sqrt(fan_in))).astype(dtype)


class Layer:
    def parameters(self) -> Iterator[Parameter]:
        for child in self.children():
            yield from child.parameters()

    def children(self) -> List['Layer']:
        return []


class Conv3d(Layer):
    """
    Свёртка; при переданной маске работает как sparse_conv3d.
    """

    def __init__(self, name: str, spec: ConvSpec, component: str, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        self.weight = Parameter(f"{name}.weight", kaiming_normal(spec.weight_shape, fan_in, rng), component)
        self.bias = None
        if spec.has_bias:
            self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_channels, dtype=np.float32), component)
        self._cache = None
        self._sparse = False

    def parameters(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        bias = None if self.bias is None else self.bias.data
        self._sparse = mask is not None
        if self._sparse:
            y, self._cache = sparse_conv3d(x, self.weight.data, bias, self.spec, mask)
        else:
            y, self._cache = conv3d(x, self.weight.data, bias, self.spec)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        backward = sparse_conv3d_backward if self._sparse else conv3d_backward
        dx, dw, db = backward(dy, self._cache)
        self.weight.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(db)
        return dx


class ConvTranspose3d(Layer):
    def __init__(self, name: str, spec: ConvSpec, component: str, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.out_channels * int(np.prod(spec.kernel))
        self.weight = Parameter(f"{name}.weight", kaiming_normal(spec.transpose_weight_shape, fan_in, rng), component)
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_channels, dtype=np.float32), component)
        self._cache = None

    def parameters(self):
        yield self.weight
        yield self.bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._cache = conv3d_transpose(x, self.weight.data, self.spec, self.bias.data)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw, db = conv3d_transpose_backward(dy, self._cache)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class InstanceNorm3d(Layer):
    def __init__(self, name: str, channels: int, component: str, eps: float):
        self.eps = eps
        self.gain = Parameter(f"{name}.gain", np.ones(channels, dtype=np.float32), component, decay=False)
        self.shift = Parameter(f"{name}.shift", np.zeros(channels, dtype=np.float32), component, decay=False)
        self._cache = None

    def parameters(self):
        yield self.gain
        yield self.shift

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        y, self._cache = masked_instance_norm(x, self.gain.data, self.shift.data, self.eps, mask)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dgain, dshift = masked_instance_norm_backward(dy, self._cache)
        self.gain.accumulate(dgain)
        self.shift.accumulate(dshift)
        return dx


class LeakyReLU(Layer):
    def __init__(self, slope: float):
        self.slope = slope
        self._positive = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._positive = leaky_relu(x, self.slope)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return leaky_relu_backward(dy, self._positive, self.slope)


class ConvNormAct(Layer):
    """
    conv -> norm -> leaky ReLU. С маской: sparse conv + masked norm;
    замаскированные воксели остаются нулями и после активации.
    """

    def __init__(self, name: str, spec: ConvSpec, component: str, rng: np.random.Generator,
                 eps: float, slope: float):
        self.conv = Conv3d(f"{name}.conv", spec, component, rng)
        self.norm = InstanceNorm3d(f"{name}.norm", spec.out_channels, component, eps)
        self.act = LeakyReLU(slope)

    def children(self):
        return [self.conv, self.norm, self.act]

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        return self.act.forward(self.norm.forward(self.conv.forward(x, mask), mask))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.conv.backward(self.norm.backward(self.act.backward(dy)))


class ResidualBlock(Layer):
    """
    Два свёрточных слоя 3x3x3 с нормализацией и активацией, тождественный
    или проекционный (1x1x1 conv + norm) shortcut.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int, component: str,
                 rng: np.random.Generator, eps: float, slope: float):
        self.conv1 = ConvNormAct(f"{name}.conv1", ConvSpec(in_channels, out_channels), component, rng, eps, slope)
        self.conv2 = Conv3d(f"{name}.conv2.conv", ConvSpec(out_channels, out_channels), component, rng)
        self.norm2 = InstanceNorm3d(f"{name}.conv2.norm", out_channels, component, eps)
        self.projection = None
        self.projection_norm = None
        if in_channels != out_channels:
            self.projection = Conv3d(f"{name}.projection.conv", ConvSpec(in_channels, out_channels, kernel=1),
                                     component, rng)
            self.projection_norm = InstanceNorm3d(f"{name}.projection.norm", out_channels, component, eps)
        self.act = LeakyReLU(slope)

    def children(self):
        layers = [self.conv1, self.conv2, self.norm2]
        if self.projection is not None:
            layers += [self.projection, self.projection_norm]
        return layers + [self.act]

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        residual = self.norm2.forward(self.conv2.forward(self.conv1.forward(x, mask), mask), mask)
        shortcut = x
        if self.projection is not None:
            shortcut = self.projection_norm.forward(self.projection.forward(x, mask), mask)
        return self.act.forward(residual + shortcut)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dsum = self.act.backward(dy)
        dx = self.conv1.backward(self.conv2.backward(self.norm2.backward(dsum)))
        if self.projection is not None:
            return dx + self.projection.backward(self.projection_norm.backward(dsum))
        return dx + dsum


class EncoderStage(Layer):
    def __init__(self, name: str, in_channels: int, width: int, blocks: int, stride, rng: np.random.Generator,
                 eps: float, slope: float):
        self.down = None
        channels = in_channels
        if any(s > 1 for s in stride) or in_channels != width:
            self.down = ConvNormAct(f"{name}.down", ConvSpec(in_channels, width, stride=stride), 'encoder',
                                    rng, eps, slope)
            channels = width
        self.blocks = [
            ResidualBlock(f"{name}.blocks.{i}", channels if i == 0 else width, width, 'encoder', rng, eps, slope)
            for i in range(blocks)
        ]

    def children(self):
        return ([self.down] if self.down is not None else []) + self.blocks

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        if self.down is not None:
            x = self.down.forward(x, mask)
        for block in self.blocks:
            x = block.forward(x, mask)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for block in reversed(self.blocks):
            dy = block.backward(dy)
        if self.down is not None:
            dy = self.down.backward(dy)
        return dy


class DecoderStage(Layer):
    """
    Транспонированная свёртка вверх, конкатенация со skip-соединением,
    затем два блока conv-norm-act.
    """

    def __init__(self, name: str, low_channels: int, width: int, stride, rng: np.random.Generator,
                 eps: float, slope: float):
        self.width = width
        up_spec = ConvSpec(low_channels, width, kernel=stride, stride=stride, padding=0)
        self.up = ConvTranspose3d(f"{name}.up", up_spec, 'decoder', rng)
        self.conv1 = ConvNormAct(f"{name}.conv1", ConvSpec(2 * width, width), 'decoder', rng, eps, slope)
        self.conv2 = ConvNormAct(f"{name}.conv2", ConvSpec(width, width), 'decoder', rng, eps, slope)

    def children(self):
        return [self.up, self.conv1, self.conv2]

    def forward(self, low: np.ndarray, skip: np.ndarray) -> np.ndarray:
        x = np.concatenate([self.up.forward(low), skip], axis=1)
        return self.conv2.forward(self.conv1.forward(x))

    def backward(self, dy: np.ndarray):
        dcat = self.conv1.backward(self.conv2.backward(dy))
        dlow = self.up.backward(np.ascontiguousarray(dcat[:, :self.width]))
        return dlow, np.ascontiguousarray(dcat[:, self.width:])
