"""Temporally aligned multi-modal fusion.

At each frame t, a window of temporally adjacent feature units is selected
from every mode (the attention level A fixes the window span), the per-mode
sub-vectors are concatenated into a (d, A*M) frame, and a channel gate
(global average pool over the window axis -> two-layer bottleneck ->
sigmoid) rescales each of the d channels.

Window placement follows the attention-level rule: even A looks one unit
further ahead than behind, odd A is symmetric. Frames outside [0, T)
contribute zero columns so every frame yields the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import blocks, tensor as tt
from .errors import (ConfigError, DimensionError, ParameterError,
                     SynchronizationError)
from .tensor import Tensor


@dataclass(frozen=True)
class WindowBounds:
    """Units ahead of and behind the current frame inside one fusion window."""
    ahead: int   # frames after t
    behind: int  # frames before t

    @property
    def span(self) -> int:
        return self.behind + 1 + self.ahead


def window_bounds(attention_level: int) -> WindowBounds:
    """Split an attention level into (ahead, behind) window offsets.

    Even levels reach one unit further forward; odd levels are symmetric;
    level 1 degenerates to the current frame alone.
    """
    a = int(attention_level)
    if a < 1:
        raise ParameterError(f"attention level must be >= 1, got {attention_level}")
    if a % 2 == 0:
        return WindowBounds(ahead=a // 2, behind=(a - 2) // 2)
    return WindowBounds(ahead=(a - 1) // 2, behind=(a - 1) // 2)


def select_subvector(v: Tensor, t: int, bounds: WindowBounds) -> Tensor:
    """Window of one mode around frame t as a (d, span) tensor.

    Columns run v[t-behind] .. v[t+ahead] in temporal order; out-of-range
    frames are zero columns.
    """
    return tt.select_frame_window(v, t, bounds.behind, bounds.ahead)


def concat_modes(subvectors: Sequence[Tensor]) -> Tensor:
    """Concatenate per-mode (d, span) windows along the window axis, mode order fixed."""
    if not subvectors:
        raise ParameterError("need at least one mode")
    shape = subvectors[0].shape
    for s in subvectors:
        if s.shape != shape:
            raise DimensionError(f"mode windows disagree: {s.shape} vs {shape}")
    return tt.concat_last(list(subvectors))


class FeatureEnhancer:
    """Trainable channel gate over fused windows.

    The gate is one sigmoid per channel, broadcast across the window axis;
    the bottleneck width is d / reduction. No biases, matching the gating
    form it implements.
    """

    def __init__(self, width: int, reduction: int = 4,
                 rng: np.random.Generator | None = None):
        if width < 1:
            raise ConfigError(f"width must be positive, got {width}")
        if reduction < 1 or width % reduction != 0:
            raise ConfigError(
                f"width {width} must be divisible by reduction {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = width // reduction
        self.width = width
        self.reduction = reduction
        self.w1 = blocks.kernel_init(rng, (hidden, width), width)
        self.w2 = blocks.kernel_init(rng, (width, hidden), hidden)

    def parameters(self):
        return [self.w1, self.w2]


def feature_enhance(fused: Tensor, fe: FeatureEnhancer) -> Tensor:
    """Gate one fused frame: pool over the window axis, squeeze, rescale rows."""
    if fused.data.ndim != 2 or fused.shape[0] != fe.width:
        raise DimensionError(
            f"fused frame shape {fused.shape} does not match gate width {fe.width}")
    pooled = fused.mean(axes=(1,)).reshape((fe.width, 1))       # (d, 1)
    gate = tt.sigmoid(tt.matmul(fe.w2, tt.relu(tt.matmul(fe.w1, pooled))))
    return tt.mul(fused, gate)                                   # (d, span) * (d, 1)


def enhance_sequence(fused: Tensor, fe: FeatureEnhancer) -> Tensor:
    """Same gate as feature_enhance, applied to all frames of a (T, d, W) stack."""
    if fused.data.ndim != 3 or fused.shape[1] != fe.width:
        raise DimensionError(
            f"fused stack shape {fused.shape} does not match gate width {fe.width}")
    t_len = fused.shape[0]
    pooled = fused.mean(axes=(2,))                               # (T, d)
    hidden = tt.relu(tt.matmul(pooled, tt.transpose(fe.w1)))     # (T, d/r)
    gate = tt.sigmoid(tt.matmul(hidden, tt.transpose(fe.w2)))    # (T, d)
    return tt.mul(fused, gate.reshape((t_len, fe.width, 1)))


def fuse_frame(streams: Sequence[Tensor], t: int, bounds: WindowBounds,
               fe: FeatureEnhancer | None = None) -> Tensor:
    """Literal per-frame composition: select windows, concatenate, gate."""
    fused = concat_modes([select_subvector(v, t, bounds) for v in streams])
    return feature_enhance(fused, fe) if fe is not None else fused


def fuse_sequence(streams: Sequence[Tensor], attention_level: int,
                  fe: FeatureEnhancer | None = None) -> Tensor:
    """Fuse synchronized (T, d) mode encodings into a (T, d, A*M) stack.

    Equivalent to applying fuse_frame at every t; computed with
    whole-sequence window/pool ops so training stays fast.
    """
    if not streams:
        raise ParameterError("need at least one mode")
    t_len = streams[0].shape[0]
    width = streams[0].shape[1]
    for v in streams:
        if v.data.ndim != 2:
            raise DimensionError(f"mode encoding must be (T, d), got {v.shape}")
        if v.shape[0] != t_len:
            raise SynchronizationError(
                f"modes disagree on length: {v.shape[0]} vs {t_len}")
        if v.shape[1] != width:
            raise DimensionError(f"modes disagree on width: {v.shape[1]} vs {width}")
    bounds = window_bounds(attention_level)
    windows = [tt.temporal_window(v, bounds.behind, bounds.ahead) for v in streams]
    fused = tt.concat_last(windows)                              # (T, d, A*M)
    return enhance_sequence(fused, fe) if fe is not None else fused
