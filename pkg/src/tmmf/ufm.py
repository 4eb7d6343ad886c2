"""Unimodal feature mapping: per-modality temporal encoder.

Each mode gets its own stack of dilated residual blocks behind an entry
1x1 projection; there is no prediction head, the output feeds the fusion
stage. Dilation doubles at every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks, tensor as tt
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class UFMConfig:
    in_dim: int          # extractor feature size for this mode
    width: int = 64      # channel dim of the encoded sequence
    layers: int = 12     # residual blocks, dilations 2^0 .. 2^(layers-1)

    def validate(self):
        if self.in_dim < 1 or self.width < 1:
            raise ConfigError(f"dims must be positive, got {self}")
        if self.layers < 1:
            raise ConfigError(f"need at least one layer, got {self.layers}")


class UFMBlock:
    """Maps a (T, in_dim) feature stream to a (T, width) encoding."""

    def __init__(self, config: UFMConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.entry_kernel = blocks.kernel_init(
            rng, (config.width, config.in_dim, 1), config.in_dim)
        self.blocks = [
            blocks.DilatedResidualBlock(config.width, 2 ** layer, rng)
            for layer in range(config.layers)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise DimensionError(
                f"stream shape {x.shape} does not match in_dim {self.config.in_dim}")
        h = blocks.temporal_conv_in(x, self.entry_kernel)
        for block in self.blocks:
            h = block(h)
        return h

    def parameters(self):
        params = [self.entry_kernel]
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    @property
    def receptive_radius(self) -> int:
        return blocks.receptive_radius(self.config.layers)


def ufm_forward(block: UFMBlock, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return block(x)
