"""Synthetic multi-modal gesture streams and feature-file IO.

Sequences alternate background and gesture segments. Each (mode, class)
pair owns a Gaussian prototype; classes marked uninformative in a mode all
share that mode's common prototype, so they are indistinguishable from each
other there (the lever that makes fusion necessary). Frames are the active
prototype plus isotropic noise, with a linear cross-fade over the ramp
around segment boundaries.

Feature files are little-endian binary: magic "TMFF", version, T, d_in, a
mode tag, then T*d_in float64 row-major. Labels live in a sibling CSV; a
manifest lists one sequence per line (mode paths then the label path).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .metrics import read_labels_csv, write_labels_csv

FEATURE_MAGIC = b"TMFF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int                   # gesture classes, excluding background
    feature_dims: tuple                # per-mode d_in
    signal_scale: float = 1.0          # prototype spread
    noise_scale: float = 0.5           # per-frame noise sigma
    gesture_len: tuple = (10, 20)      # frames, inclusive range
    gap_len: tuple = (3, 8)            # background frames between gestures
    ramp: int = 2                      # cross-fade frames at each boundary
    informative: tuple | None = None   # per-mode frozenset of class ids; None = all
    seed: int = 0

    @property
    def modes(self) -> int:
        return len(self.feature_dims)

    def informative_sets(self):
        if self.informative is None:
            full = frozenset(range(1, self.num_classes + 1))
            return tuple(full for _ in range(self.modes))
        return tuple(frozenset(s) for s in self.informative)

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError("need at least one gesture class")
        if self.modes < 1 or any(d < 1 for d in self.feature_dims):
            raise ConfigError(f"bad feature_dims {self.feature_dims}")
        if self.informative is not None:
            if len(self.informative) != self.modes:
                raise ConfigError(
                    f"informative mask has {len(self.informative)} entries "
                    f"for {self.modes} modes")
            valid = set(range(1, self.num_classes + 1))
            for mode, classes in enumerate(self.informative):
                if not set(classes) <= valid:
                    raise ConfigError(f"mode {mode} mask {set(classes)} outside {valid}")
        if self.gesture_len[0] < 1 or self.gesture_len[0] > self.gesture_len[1]:
            raise ConfigError(f"bad gesture_len {self.gesture_len}")
        if self.gap_len[0] < 1 or self.gap_len[0] > self.gap_len[1]:
            raise ConfigError(f"bad gap_len {self.gap_len}")
        if self.ramp < 0:
            raise ConfigError("ramp must be non-negative")
        if self.noise_scale < 0 or self.signal_scale <= 0:
            raise ConfigError("scales must be positive")


@dataclass
class SequenceSample:
    seq_id: str
    streams: list                      # per-mode (T, d_in) float arrays
    labels: np.ndarray                 # (T,) ints, 0 = background


@dataclass
class Prototypes:
    """Per-mode rows: index 0 is background, 1..C gesture classes.

    Uninformative classes point at the shared row stored at index C+1.
    """
    per_mode: list = field(default_factory=list)

    def row(self, mode: int, label: int) -> np.ndarray:
        return self.per_mode[mode][label]


def build_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> Prototypes:
    informative = spec.informative_sets()
    proto = Prototypes()
    for mode in range(spec.modes):
        dim = spec.feature_dims[mode]
        table = rng.normal(scale=spec.signal_scale, size=(spec.num_classes + 2, dim))
        shared = table[spec.num_classes + 1]
        for cls in range(1, spec.num_classes + 1):
            if cls not in informative[mode]:
                table[cls] = shared
        proto.per_mode.append(table)
    return proto


def _segment_layout(spec: SyntheticSpec, rng: np.random.Generator, t_len: int):
    """Alternating (label, length) runs covering exactly t_len frames."""
    runs = []
    pos = 0
    gesture_turn = False
    while pos < t_len:
        if gesture_turn:
            label = int(rng.integers(1, spec.num_classes + 1))
            length = int(rng.integers(spec.gesture_len[0], spec.gesture_len[1] + 1))
        else:
            label = 0
            length = int(rng.integers(spec.gap_len[0], spec.gap_len[1] + 1))
        runs.append((label, min(length, t_len - pos)))
        pos += length
        gesture_turn = not gesture_turn
    if not any(label for label, _ in runs):  # too short for the first gap
        runs = [(int(rng.integers(1, spec.num_classes + 1)), t_len)]
    return runs


def _render_mode(spec, proto, mode, runs, rng):
    t_len = sum(length for _, length in runs)
    track = np.empty((t_len, spec.feature_dims[mode]))
    pos = 0
    for label, length in runs:
        track[pos:pos + length] = proto.row(mode, label)
        pos += length
    if spec.ramp > 1:
        # linear cross-fade centered on each boundary
        boundaries = np.cumsum([length for _, length in runs])[:-1]
        blended = track.copy()
        for b in boundaries:
            prev_row = track[b - 1]
            next_row = track[b]
            for k in range(spec.ramp):
                t = b - spec.ramp // 2 + k
                if 0 <= t < t_len:
                    w = (k + 0.5) / spec.ramp
                    blended[t] = (1.0 - w) * prev_row + w * next_row
        track = blended
    noise = rng.normal(scale=spec.noise_scale, size=track.shape)
    return track + noise


def generate_dataset(spec: SyntheticSpec, n_sequences: int, t_range: tuple):
    """Deterministic paired feature streams and labels for one seed."""
    spec.validate()
    if n_sequences < 1:
        raise ConfigError("need at least one sequence")
    if t_range[0] < 1 or t_range[0] > t_range[1]:
        raise ConfigError(f"bad t_range {t_range}")
    rng = np.random.default_rng(spec.seed)
    proto = build_prototypes(spec, rng)
    samples = []
    for index in range(n_sequences):
        t_len = int(rng.integers(t_range[0], t_range[1] + 1))
        runs = _segment_layout(spec, rng, t_len)
        labels = np.concatenate([np.full(length, label, dtype=int)
                                 for label, length in runs])
        streams = [_render_mode(spec, proto, mode, runs, rng)
                   for mode in range(spec.modes)]
        samples.append(SequenceSample(seq_id=f"seq{index:04d}",
                                      streams=streams, labels=labels))
    return samples


# ---------------------------------------------------------------------------
# feature files

def write_feature_file(path, stream: np.ndarray, mode_tag: str = ""):
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim != 2:
        raise FormatError(f"feature stream must be (T, d_in), got {stream.shape}")
    tag = mode_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", FEATURE_MAGIC, FEATURE_VERSION,
                             stream.shape[0], stream.shape[1], len(tag)))
        fh.write(tag)
        fh.write(stream.astype("<f8").tobytes())


def read_feature_file(path):
    """Returns (stream, mode_tag); raises FormatError naming the byte offset."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20:
            raise FormatError(f"{path}: truncated header at byte {len(head)}, "
                              f"expected 20 bytes")
        magic, version, t_len, dim, tag_len = struct.unpack("<4sIIII", head)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at byte 0, "
                              f"expected {FEATURE_MAGIC!r}")
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at byte 4")
        tag = fh.read(tag_len)
        if len(tag) != tag_len:
            raise FormatError(f"{path}: truncated mode tag, expected {tag_len} "
                              f"bytes, got {len(tag)}")
        expected = 8 * t_len * dim
        payload = fh.read(expected)
        if len(payload) != expected:
            raise FormatError(f"{path}: truncated payload, expected {expected} "
                              f"bytes, got {len(payload)}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    stream = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return stream.reshape(t_len, dim), tag.decode("utf-8")


# ---------------------------------------------------------------------------
# on-disk datasets

def save_dataset(directory, samples) -> Path:
    """Write feature files, label CSVs and the manifest; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.txt"
    with open(manifest, "w") as fh:
        for sample in samples:
            paths = []
            for mode, stream in enumerate(sample.streams):
                rel = f"{sample.seq_id}_mode{mode}.tmff"
                write_feature_file(directory / rel, stream, mode_tag=f"mode{mode}")
                paths.append(rel)
            label_rel = f"{sample.seq_id}_labels.csv"
            write_labels_csv(directory / label_rel, sample.labels)
            fh.write("\t".join(paths + [label_rel]) + "\n")
    return manifest


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise FormatError(f"{manifest_path}:{line_no + 1}: need at least "
                                  f"one mode path and a label path")
            streams = [read_feature_file(base / rel)[0] for rel in parts[:-1]]
            labels = read_labels_csv(base / parts[-1])
            seq_id = Path(parts[-1]).stem.replace("_labels", "")
            samples.append(SequenceSample(seq_id=seq_id, streams=streams,
                                          labels=labels))
    return samples
