"""Parameterized layers shared by the searching blocks and the supernet."""

from __future__ import annotations

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    BatchNorm,
    Module,
    Tensor,
    batch_norm,
    conv2d_depthwise,
    conv2d_pointwise,
    layer_norm,
    linear,
)


def fan_in_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> Tensor:
    data = rng.standard_normal(shape) * np.sqrt(gain / max(fan_in, 1))
    return Tensor(data.astype(DEFAULT_DTYPE), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> Tensor:
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data.astype(DEFAULT_DTYPE), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=True)


class PointwiseConv(Module):
    def __init__(self, c_out: int, c_in: int, rng: np.random.Generator, bias: bool = False):
        self.weight = fan_in_normal(rng, (c_out, c_in), c_in)
        self.bias = zeros_param((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_pointwise(x, self.weight, self.bias)


class DepthwiseConv(Module):
    def __init__(self, channels: int, kernel: int, stride: int, rng: np.random.Generator):
        self.weight = fan_in_normal(rng, (channels, kernel, kernel), kernel * kernel)
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_depthwise(x, self.weight, stride=self.stride)


class ConvBN(Module):
    """Pointwise conv + batch norm, the projection idiom used throughout."""

    def __init__(self, c_out: int, c_in: int, rng: np.random.Generator):
        self.conv = PointwiseConv(c_out, c_in, rng)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(self.conv.forward(x), self.bn)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = fan_in_normal(rng, (d_in, d_out), d_in, gain=1.0)
        self.bias = zeros_param((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
