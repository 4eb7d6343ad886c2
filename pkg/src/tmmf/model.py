"""The assembled model: per-mode encoders, fusion, frame classifier.

Ablation switches reroute the graph without changing the outer contract:
``use_ufm=False`` feeds extractor features straight into fusion,
``simple_fusion=True`` forces per-frame concatenation (window span 1, no
gate), ``use_fe=False`` drops the channel gate, and ``use_mfm=False``
classifies the fused frames with the linear head alone.

Checkpoints are a little-endian binary: a fixed header describing the
configuration, then every parameter tensor in declaration order as
(rank, dims, row-major float64). Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import blocks, tensor as tt
from .errors import (CheckpointError, ConfigError, DataError, DimensionError,
                     FormatError, SynchronizationError)
from .fusion import FeatureEnhancer, fuse_sequence
from .tensor import Tensor
from .ufm import UFMBlock, UFMConfig

CHECKPOINT_MAGIC = b"TMMF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_dims: tuple            # per-mode extractor feature size
    num_classes: int          # classes including the non-gesture class 0
    width: int = 64           # channel dim of encoders and fusion
    attention_level: int = 8  # fusion window span
    ufm_layers: int = 12
    mfm_layers: int = 10
    fe_reduction: int = 4
    use_ufm: bool = True
    use_fe: bool = True
    use_mfm: bool = True
    simple_fusion: bool = False

    @property
    def modes(self) -> int:
        return len(self.in_dims)

    @property
    def effective_attention(self) -> int:
        return 1 if self.simple_fusion else self.attention_level

    @property
    def effective_fe(self) -> bool:
        return self.use_fe and not self.simple_fusion

    @property
    def fused_width(self) -> int:
        return self.width if self.use_ufm else self.in_dims[0]

    @property
    def fused_dim(self) -> int:
        return self.fused_width * self.effective_attention * self.modes

    def validate(self):
        if self.modes < 1:
            raise ConfigError("need at least one mode")
        if any(d < 1 for d in self.in_dims):
            raise ConfigError(f"in_dims must be positive, got {self.in_dims}")
        if self.num_classes < 2:
            raise ConfigError(f"need >= 2 classes (incl. background), got {self.num_classes}")
        if self.width < 1 or self.attention_level < 1:
            raise ConfigError("width and attention_level must be positive")
        if self.ufm_layers < 1 or self.mfm_layers < 1:
            raise ConfigError("layer counts must be >= 1")
        if not self.use_ufm and len(set(self.in_dims)) > 1:
            raise ConfigError(
                "without per-mode encoders all modes must share a feature size, "
                f"got {self.in_dims}")
        if self.effective_fe and self.fused_width % self.fe_reduction != 0:
            raise ConfigError(
                f"width {self.fused_width} not divisible by fe_reduction {self.fe_reduction}")


@dataclass
class PredictionSequence:
    """Per-frame class probabilities plus the argmax label track."""
    probs: np.ndarray   # (T, C), rows sum to 1
    labels: np.ndarray  # (T,), int


class MFMBlock:
    """Post-fusion stage: temporal encoder (optional) plus the frame classifier."""

    def __init__(self, in_dim: int, width: int, layers: int, num_classes: int,
                 rng: np.random.Generator, temporal_stack: bool = True):
        self.in_dim = in_dim
        self.temporal_stack = temporal_stack
        if temporal_stack:
            self.entry_kernel = blocks.kernel_init(rng, (width, in_dim, 1), in_dim)
            self.blocks = [blocks.DilatedResidualBlock(width, 2 ** layer, rng)
                           for layer in range(layers)]
            head_in = width
        else:
            self.entry_kernel = None
            self.blocks = []
            head_in = in_dim
        self.head_kernel = blocks.kernel_init(rng, (num_classes, head_in, 1), head_in)
        self.head_bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def __call__(self, fused: Tensor) -> Tensor:
        if fused.data.ndim != 2 or fused.shape[1] != self.in_dim:
            raise DimensionError(
                f"fused input shape {fused.shape} does not match in_dim {self.in_dim}")
        h = fused
        if self.temporal_stack:
            h = blocks.temporal_conv_in(h, self.entry_kernel)
            for block in self.blocks:
                h = block(h)
        logits = tt.conv1d(h, self.head_kernel, self.head_bias)
        return tt.log_softmax_rows(logits)

    def parameters(self):
        params = []
        if self.temporal_stack:
            params.append(self.entry_kernel)
            for block in self.blocks:
                params.extend(block.parameters())
        params += [self.head_kernel, self.head_bias]
        return params


def mfm_forward(mfm: MFMBlock, fused: Tensor) -> Tensor:
    return mfm(fused)


class TMMFModel:
    """End-to-end frame labeler over M synchronized feature streams."""

    def __init__(self, config: ModelConfig, rng):
        config.validate()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self.ufms = None
        if config.use_ufm:
            self.ufms = [
                UFMBlock(UFMConfig(in_dim=d, width=config.width,
                                   layers=config.ufm_layers), rng)
                for d in config.in_dims
            ]
        self.fe = None
        if config.effective_fe:
            self.fe = FeatureEnhancer(config.fused_width, config.fe_reduction, rng)
        self.mfm = MFMBlock(config.fused_dim, config.width, config.mfm_layers,
                            config.num_classes, rng,
                            temporal_stack=config.use_mfm)

    def forward(self, streams: Sequence) -> Tensor:
        """Log-probabilities (T, C) for M equal-length (T, d_in) streams."""
        cfg = self.config
        if len(streams) != cfg.modes:
            raise DataError(f"model expects {cfg.modes} modes, got {len(streams)}")
        wrapped = [s if isinstance(s, Tensor) else Tensor(s) for s in streams]
        t_len = wrapped[0].shape[0]
        for s in wrapped:
            if s.data.ndim != 2:
                raise DimensionError(f"stream must be (T, d_in), got {s.shape}")
            if s.shape[0] != t_len:
                raise SynchronizationError(
                    f"streams disagree on length: {s.shape[0]} vs {t_len}")
        for mode, s in enumerate(wrapped):
            if s.shape[1] != cfg.in_dims[mode]:
                raise DimensionError(
                    f"mode {mode} has width {s.shape[1]}, expected {cfg.in_dims[mode]}")

        encoded = [self.ufms[m](wrapped[m]) for m in range(cfg.modes)] \
            if cfg.use_ufm else wrapped
        fused = fuse_sequence(encoded, cfg.effective_attention, self.fe)
        flat = fused.reshape((t_len, cfg.fused_dim))
        return self.mfm(flat)

    def predict(self, streams: Sequence) -> PredictionSequence:
        log_probs = self.forward(streams)
        probs = np.exp(log_probs.data)
        return PredictionSequence(probs=probs, labels=probs.argmax(axis=1))

    def parameters(self):
        params = []
        if self.ufms is not None:
            for ufm in self.ufms:
                params.extend(ufm.parameters())
        if self.fe is not None:
            params.extend(self.fe.parameters())
        params.extend(self.mfm.parameters())
        return params


# ---------------------------------------------------------------------------
# checkpoint format

_FLAG_USE_UFM = 1
_FLAG_USE_FE = 2
_FLAG_USE_MFM = 4
_FLAG_SIMPLE_FUSION = 8

_HEADER = struct.Struct("<4sIIIIIIIII")  # magic, version, M, A, d, k, k', C, r, flags


def _config_flags(cfg: ModelConfig) -> int:
    flags = 0
    if cfg.use_ufm:
        flags |= _FLAG_USE_UFM
    if cfg.use_fe:
        flags |= _FLAG_USE_FE
    if cfg.use_mfm:
        flags |= _FLAG_USE_MFM
    if cfg.simple_fusion:
        flags |= _FLAG_SIMPLE_FUSION
    return flags


def save_checkpoint(model: TMMFModel, path):
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.modes,
                              cfg.attention_level, cfg.width, cfg.ufm_layers,
                              cfg.mfm_layers, cfg.num_classes, cfg.fe_reduction,
                              _config_flags(cfg)))
        fh.write(struct.pack(f"<{cfg.modes}I", *cfg.in_dims))
        params = model.parameters()
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            dims = p.shape
            fh.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
            fh.write(np.ascontiguousarray(p.data).astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}: "
                          f"expected {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> TMMFModel:
    with open(path, "rb") as fh:
        header = _read_exact(fh, _HEADER.size, "header")
        (magic, version, modes, attention, width, ufm_layers, mfm_layers,
         num_classes, reduction, flags) = _HEADER.unpack(header)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        in_dims = struct.unpack(f"<{modes}I", _read_exact(fh, 4 * modes, "mode dims"))
        cfg = ModelConfig(
            in_dims=tuple(in_dims), num_classes=num_classes, width=width,
            attention_level=attention, ufm_layers=ufm_layers,
            mfm_layers=mfm_layers, fe_reduction=reduction,
            use_ufm=bool(flags & _FLAG_USE_UFM), use_fe=bool(flags & _FLAG_USE_FE),
            use_mfm=bool(flags & _FLAG_USE_MFM),
            simple_fusion=bool(flags & _FLAG_SIMPLE_FUSION))
        model = TMMFModel(cfg, rng=np.random.default_rng(0))
        params = model.parameters()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        if count != len(params):
            raise CheckpointError(
                f"checkpoint stores {count} tensors, model declares {len(params)}")
        for i, p in enumerate(params):
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"tensor {i} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"tensor {i} dims"))
            if dims != p.shape:
                raise CheckpointError(
                    f"tensor {i} has shape {dims}, model expects {p.shape}")
            n_bytes = 8 * int(np.prod(dims)) if rank else 8
            payload = _read_exact(fh, n_bytes, f"tensor {i} payload")
            p.data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("checkpoint has trailing bytes after last tensor")
    return model


def copy_parameters(src: TMMFModel, dst: TMMFModel):
    """Copy parameter values between structurally identical models."""
    src_params, dst_params = src.parameters(), dst.parameters()
    if len(src_params) != len(dst_params):
        raise CheckpointError("models declare different parameter lists")
    for a, b in zip(src_params, dst_params):
        if a.shape != b.shape:
            raise CheckpointError(f"parameter shape mismatch: {a.shape} vs {b.shape}")
        b.data = a.data.copy()


def clone_model(model: TMMFModel) -> TMMFModel:
    twin = TMMFModel(replace(model.config), rng=np.random.default_rng(0))
    copy_parameters(model, twin)
    return twin
