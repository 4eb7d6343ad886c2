"""Adam optimizer, the per-sequence training loop, and evaluation.

Training consumes one variable-length sequence per step (the model has no
batch axis); epoch order is shuffled with the config seed, so a (seed,
config, dataset) triple reproduces bitwise on one platform. The best model
by validation mean-Jaccard is kept and written to the checkpoint path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, TrainingAbort
from .losses import LossWeights, total_loss
from .metrics import MetricReport, mean_jaccard_index, sliding_window_predict
from .model import TMMFModel, save_checkpoint
from .tensor import Tensor


class Adam:
    """Standard bias-corrected Adam; gradients are cleared after each step."""

    def __init__(self, params, lr: float = 0.0005, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError("adam step with an unpopulated gradient")
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def clip_gradients(params, max_norm: float):
    """Rescale all gradients so their global norm does not exceed max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.0005
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 2
    seed: int = 0
    checkpoint_path: str | None = None
    grad_clip: float = 10.0
    sequences_per_epoch: int | None = None  # None = full pass

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        self.weights.validate()


@dataclass
class EpochStats:
    epoch: int
    ce: float
    smooth: float
    mid: float
    total: float
    val_frame_accuracy: float | None = None
    val_mean_jaccard: float | None = None


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_jaccard: float = -1.0

    def write_csv(self, path):
        new = not Path(path).exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["epoch", "ce", "smooth", "mid", "total",
                                 "val_frame_accuracy", "val_mean_jaccard"])
            for row in self.rows:
                writer.writerow([row.epoch, row.ce, row.smooth, row.mid,
                                 row.total,
                                 "" if row.val_frame_accuracy is None else row.val_frame_accuracy,
                                 "" if row.val_mean_jaccard is None else row.val_mean_jaccard])


def predict_dataset(model: TMMFModel, dataset, window=None, stride=None):
    predictions = []
    for sample in dataset:
        if window is None:
            predictions.append(model.predict(sample.streams).labels)
        else:
            predictions.append(
                sliding_window_predict(model, sample.streams, window, stride).labels)
    return predictions


def evaluate(model: TMMFModel, dataset, window=None, stride=None) -> MetricReport:
    """Score a dataset; windowed inference when (window, stride) are given."""
    predicted = predict_dataset(model, dataset, window, stride)
    return mean_jaccard_index([s.labels for s in dataset], predicted)


def train(model: TMMFModel, train_set, val_set, cfg: TrainConfig) -> TrainingLog:
    """Optimize the model; returns the log with the best epoch marked.

    The model is left holding the best-by-validation-MJI parameters; a
    non-finite loss aborts with the offending sequence id and components.
    """
    cfg.validate()
    if not train_set:
        raise ConfigError("training set is empty")
    params = model.parameters()
    optimizer = Adam(params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng(cfg.seed)
    log = TrainingLog()
    best_params = None

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        if cfg.sequences_per_epoch is not None:
            order = order[:cfg.sequences_per_epoch]
        sums = np.zeros(4)
        for index in order:
            sample = train_set[index]
            out = total_loss(model.forward(sample.streams), sample.labels,
                             cfg.weights)
            values = (out.ce, out.smooth, out.mid, float(out.total.data))
            if not all(np.isfinite(v) for v in values):
                raise TrainingAbort(sample.seq_id, out.ce, out.smooth, out.mid)
            tt.backward(out.total)
            clip_gradients(params, cfg.grad_clip)
            optimizer.step()
            sums += values
        sums /= max(1, len(order))
        stats = EpochStats(epoch=epoch, ce=sums[0], smooth=sums[1],
                           mid=sums[2], total=sums[3])

        if val_set and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate(model, val_set)
            stats.val_frame_accuracy = report.frame_accuracy
            stats.val_mean_jaccard = report.mean_jaccard
            if report.mean_jaccard > log.best_val_jaccard:
                log.best_val_jaccard = report.mean_jaccard
                log.best_epoch = epoch
                best_params = [p.data.copy() for p in params]
                if cfg.checkpoint_path:
                    save_checkpoint(model, cfg.checkpoint_path)
        log.rows.append(stats)

    if best_params is not None:
        for p, best in zip(params, best_params):
            p.data = best
    elif cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path)
    return log


def save_train_config(cfg: TrainConfig, path):
    """Serialize the resolved config as key = value lines next to outputs."""
    with open(path, "w") as fh:
        flat = asdict(cfg)
        weights = flat.pop("weights")
        for key, value in flat.items():
            fh.write(f"{key} = {value}\n")
        for key, value in weights.items():
            fh.write(f"{key} = {value}\n")
