"""Layers shared by the temporal encoders.

A dilated residual unit is: dilated conv -> ReLU -> 1x1 conv -> channel
norm -> ReLU, added back onto its input. Channel normalization uses the
current sequence's statistics because training runs one variable-length
sequence at a time, so cross-sequence batch statistics are undefined.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .errors import DimensionError, ParameterError
from .tensor import Tensor

NORM_EPS = 1e-5


def kernel_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Trainable tensor drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class ChannelNorm:
    """Per-channel normalization over time with trainable gain and bias."""

    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tt.channel_norm(x, self.gain, self.bias, eps=NORM_EPS)

    def parameters(self):
        return [self.gain, self.bias]


class DilatedResidualBlock:
    """Residual unit whose branch sees (kernel_size-1)*dilation/2 frames each side."""

    def __init__(self, dim: int, dilation: int, rng: np.random.Generator,
                 kernel_size: int = 3):
        if dilation < 1:
            raise ParameterError(f"dilation must be >= 1, got {dilation}")
        self.dim = dim
        self.dilation = dilation
        self.dilated_kernel = kernel_init(rng, (dim, dim, kernel_size), dim * kernel_size)
        self.pointwise_kernel = kernel_init(rng, (dim, dim, 1), dim)
        self.norm = ChannelNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dim:
            raise DimensionError(f"block expects {self.dim} channels, got {x.shape[1]}")
        h = tt.relu(tt.conv1d(x, self.dilated_kernel, dilation=self.dilation))
        h = tt.relu(self.norm(tt.conv1d(h, self.pointwise_kernel)))
        return tt.add(x, h)

    def parameters(self):
        return [self.dilated_kernel, self.pointwise_kernel] + self.norm.parameters()


def temporal_conv_in(x: Tensor, kernel: Tensor) -> Tensor:
    """Entry 1x1 projection mapping extractor features to the working width."""
    if kernel.data.ndim != 3 or kernel.shape[2] != 1:
        raise DimensionError(f"entry projection needs a (d, d_in, 1) kernel, got {kernel.shape}")
    return tt.conv1d(x, kernel)


def receptive_radius(layers: int, kernel_size: int = 3) -> int:
    """Frames reachable on each side of t after `layers` blocks with doubling dilation."""
    half = (kernel_size - 1) // 2
    return half * (2 ** layers - 1)
