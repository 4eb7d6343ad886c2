"""Evaluation: mean Jaccard index, Levenshtein accuracy, frame accuracy,
and overlapped sliding-window inference.

Frame indices are 0-based everywhere; segments are (label, start, end) with
inclusive ends, background removed, and consecutive identical labels merged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, ParameterError
from .model import PredictionSequence

BG_CLASS = 0


@dataclass(frozen=True)
class Segment:
    label: int
    start: int  # first frame, 0-based
    end: int    # last frame, inclusive


@dataclass
class MetricReport:
    mean_jaccard: float
    levenshtein_accuracy: float
    frame_accuracy: float
    num_sequences: int
    per_sequence_jaccard: list = field(default_factory=list)
    per_sequence_label_counts: list = field(default_factory=list)

    def as_flat_dict(self):
        flat = {
            "mean_jaccard": self.mean_jaccard,
            "levenshtein_accuracy": self.levenshtein_accuracy,
            "frame_accuracy": self.frame_accuracy,
            "num_sequences": self.num_sequences,
        }
        for i, (j, l) in enumerate(zip(self.per_sequence_jaccard,
                                       self.per_sequence_label_counts)):
            flat[f"sequence_{i}_jaccard"] = j
            flat[f"sequence_{i}_unique_labels"] = l
        return flat


def collapse_to_segments(labels, min_len: int = 1, bg_class: int = BG_CLASS):
    """Merge label runs into segments, dropping background and short runs."""
    labels = np.asarray(labels)
    segments = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            label = int(labels[start])
            if label != bg_class and (i - start) >= min_len:
                segments.append(Segment(label=label, start=start, end=i - 1))
            start = i
    return segments


def jaccard_per_sequence(gt, pred, include_bg: bool = False) -> tuple[float, int]:
    """Per-sequence Jaccard: mean class overlap over the unique true labels.

    Classes present only in the prediction still enter the sum (adding zero
    overlap), so spurious classes lower the score; the normalizer stays the
    number of unique true labels.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise DataError(f"length mismatch: {gt.shape} vs {pred.shape}")
    classes = set(np.unique(gt)) | set(np.unique(pred))
    if not include_bg:
        classes.discard(BG_CLASS)
    true_classes = set(np.unique(gt))
    if not include_bg:
        true_classes.discard(BG_CLASS)
    unique_true = len(true_classes)
    if unique_true == 0:
        return (1.0 if not classes else 0.0), 0
    total = 0.0
    for cls in classes:
        in_gt = gt == cls
        in_pred = pred == cls
        union = np.logical_or(in_gt, in_pred).sum()
        if union:
            total += np.logical_and(in_gt, in_pred).sum() / union
    return total / unique_true, unique_true


def frame_accuracy(gt_list, pred_list) -> float:
    correct = 0
    total = 0
    for gt, pred in zip(gt_list, pred_list):
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise DataError(f"length mismatch: {gt.shape} vs {pred.shape}")
        correct += int((gt == pred).sum())
        total += gt.size
    return correct / total if total else 0.0


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance (insert/delete/substitute), two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, item_a in enumerate(a, start=1):
        current = [i] + [0] * len(b)
        for j, item_b in enumerate(b, start=1):
            current[j] = min(previous[j] + 1,
                             current[j - 1] + 1,
                             previous[j - 1] + (item_a != item_b))
        previous = current
    return previous[-1]


def levenshtein_accuracy(gt_segments, pred_segments) -> float:
    """100 * (1 - edit distance / true instance count), clamped at 0."""
    gt_string = [s.label for s in gt_segments]
    pred_string = [s.label for s in pred_segments]
    if not gt_string:
        raise DataError("Levenshtein accuracy is undefined without true instances")
    distance = levenshtein(gt_string, pred_string)
    return max(0.0, (1.0 - distance / len(gt_string))) * 100.0


def mean_jaccard_index(gt_list, pred_list, include_bg: bool = False) -> MetricReport:
    """Score paired label sequences; Levenshtein uses min_len=1 segments."""
    if len(gt_list) != len(pred_list):
        raise DataError(f"{len(gt_list)} ground-truth vs {len(pred_list)} predictions")
    if not gt_list:
        raise DataError("no sequences to score")
    per_seq = []
    counts = []
    las = []
    for gt, pred in zip(gt_list, pred_list):
        score, unique_true = jaccard_per_sequence(gt, pred, include_bg)
        per_seq.append(score)
        counts.append(unique_true)
        gt_segments = collapse_to_segments(gt)
        if gt_segments:
            las.append(levenshtein_accuracy(gt_segments, collapse_to_segments(pred)))
    return MetricReport(
        mean_jaccard=float(np.mean(per_seq)),
        levenshtein_accuracy=float(np.mean(las)) if las else 0.0,
        frame_accuracy=frame_accuracy(gt_list, pred_list),
        num_sequences=len(gt_list),
        per_sequence_jaccard=per_seq,
        per_sequence_label_counts=counts,
    )


def sliding_window_predict(model, streams, window: int, stride: int) -> PredictionSequence:
    """Accumulate per-frame class scores over overlapped windows and argmax.

    Windows advance by ``stride``; a final window is pinned to the sequence
    end so every frame is covered. Sequences shorter than the window fall
    back to a single whole-sequence pass.
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if stride > window:
        raise ParameterError(f"stride {stride} must not exceed window {window}")
    t_len = np.asarray(streams[0]).shape[0]
    if t_len <= window:
        return model.predict(streams)
    starts = list(range(0, t_len - window + 1, stride))
    if starts[-1] != t_len - window:
        starts.append(t_len - window)
    arrays = [np.asarray(s) for s in streams]
    scores = np.zeros((t_len, model.config.num_classes))
    for start in starts:
        clips = [a[start:start + window] for a in arrays]
        scores[start:start + window] += model.predict(clips).probs
    probs = scores / scores.sum(axis=1, keepdims=True)
    return PredictionSequence(probs=probs, labels=scores.argmax(axis=1))


# ---------------------------------------------------------------------------
# interchange files

def write_labels_csv(path, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "label"])
        for i, label in enumerate(np.asarray(labels)):
            writer.writerow([i, int(label)])


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame_index", "label"]:
            raise DataError(f"{path}: expected header frame_index,label, got {header}")
        labels = []
        for row in reader:
            if len(row) != 2:
                raise DataError(f"{path}: malformed row {row}")
            if int(row[0]) != len(labels):
                raise DataError(f"{path}: frame indices must be dense from 0")
            labels.append(int(row[1]))
    return np.array(labels, dtype=int)


def write_report_text(path, report: MetricReport):
    with open(path, "w") as fh:
        for key, value in report.as_flat_dict().items():
            fh.write(f"{key} = {value}\n")


def write_report_csv(path, report: MetricReport):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in report.as_flat_dict().items():
            writer.writerow([key, value])
