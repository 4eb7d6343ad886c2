"""Training loss: frame cross-entropy, truncated smoothing, mid-point alignment.

The smoothing term is a truncated mean absolute difference of log
probabilities between consecutive frames; the previous frame is detached so
the gradient only pushes the current frame, and terms at or above the
truncation threshold stop contributing gradient. The mid-point term slides
fixed-size windows over the sequence and penalizes the squared distance
between the one-hot ground truth and the predicted probability row at each
window's center frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_smooth: float = 0.15   # weight of the smoothing term
    lambda_mid: float = 0.25      # weight of the mid-point term
    tau: float = 4.0              # truncation threshold on log-prob jumps
    mid_window: int = 16          # frames per mid-point window
    mid_stride: int = 8           # window step

    def validate(self):
        if self.lambda_smooth < 0 or self.lambda_mid < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.mid_window < 1 or self.mid_stride < 1:
            raise ConfigError("mid-point window and stride must be >= 1")


@dataclass
class LossOutput:
    total: Tensor
    ce: float
    smooth: float
    mid: float


def _check_log_probs(log_probs: Tensor):
    if log_probs.data.ndim != 2:
        raise DataError(f"expected (T, C) log-probs, got {log_probs.shape}")


def cross_entropy(log_probs: Tensor, labels) -> Tensor:
    """Mean over frames of the negative log-probability at the true class."""
    _check_log_probs(log_probs)
    t_len = log_probs.shape[0]
    picked = tt.select_class_per_frame(log_probs, np.asarray(labels))
    return tt.scale(picked.sum(), -1.0 / t_len)


def smoothing_loss(log_probs: Tensor, tau: float) -> Tensor:
    """Truncated frame-to-frame log-probability change, normalized by T*C.

    Sequences without transitions (T < 2) contribute zero.
    """
    _check_log_probs(log_probs)
    t_len, classes = log_probs.shape
    if t_len < 2:
        return Tensor(0.0)
    current = tt.slice_rows(log_probs, 1, t_len)
    previous = tt.slice_rows(log_probs, 0, t_len - 1).detach()
    jumps = tt.clamp_max(tt.absolute(tt.sub(current, previous)), tau)
    return tt.scale(jumps.sum(), 1.0 / (t_len * classes))


def midpoint_indices(t_len: int, window: int, stride: int):
    """Center frames of sliding windows; one centered window if T < window."""
    if window > t_len:
        return [t_len // 2]
    return [start + window // 2 for start in range(0, t_len - window + 1, stride)]


def midpoint_loss(log_probs: Tensor, labels, window: int, stride: int) -> Tensor:
    """Squared distance between one-hot truth and predicted probabilities at
    every window center, summed over windows."""
    _check_log_probs(log_probs)
    labels = np.asarray(labels)
    t_len, classes = log_probs.shape
    if labels.shape != (t_len,):
        raise DataError(f"labels shape {labels.shape} does not match T={t_len}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"label out of range [0, {classes})")
    mids = midpoint_indices(t_len, window, stride)
    predicted = tt.exp(tt.take_rows(log_probs, mids))  # (num_windows, C)
    target = np.zeros((len(mids), classes))
    target[np.arange(len(mids)), labels[mids]] = 1.0
    diff = tt.sub(predicted, Tensor(target))
    return tt.mul(diff, diff).sum()


def total_loss(log_probs: Tensor, labels, weights: LossWeights) -> LossOutput:
    """Weighted sum of the three terms; components with zero weight are not
    built into the graph and are reported as 0."""
    weights.validate()
    ce = cross_entropy(log_probs, labels)
    total = ce
    smooth_value = 0.0
    mid_value = 0.0
    if weights.lambda_smooth > 0:
        smooth = smoothing_loss(log_probs, weights.tau)
        smooth_value = float(smooth.data)
        total = tt.add(total, tt.scale(smooth, weights.lambda_smooth))
    if weights.lambda_mid > 0:
        mid = midpoint_loss(log_probs, labels, weights.mid_window, weights.mid_stride)
        mid_value = float(mid.data)
        total = tt.add(total, tt.scale(mid, weights.lambda_mid))
    return LossOutput(total=total, ce=float(ce.data), smooth=smooth_value,
                      mid=mid_value)
