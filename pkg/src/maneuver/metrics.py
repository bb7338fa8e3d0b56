"""Evaluation math: image-quality metrics and classification scores.

Image quality: MSE, PSNR, and Gaussian-windowed SSIM for comparing
predicted and target frames. Classification: accuracy, macro
precision/recall/F1, and confusion matrices, aggregated over
cross-validation folds as mean +- standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give inf."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _ssim_plane(a: np.ndarray, b: np.ndarray, max_value: float) -> float:
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    win = (SSIM_WINDOW, SSIM_WINDOW)
    wa = sliding_window_view(a, win)
    wb = sliding_window_view(b, win)
    k = _SSIM_KERNEL
    mu_a = np.einsum("hwij,ij->hw", wa, k)
    mu_b = np.einsum("hwij,ij->hw", wb, k)
    e_aa = np.einsum("hwij,ij->hw", wa * wa, k)
    e_bb = np.einsum("hwij,ij->hw", wb * wb, k)
    e_ab = np.einsum("hwij,ij->hw", wa * wb, k)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, max_value: float = 1.0,
         channel_axis: int | None = None) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    2-d inputs are single planes; for 3-d inputs pass ``channel_axis`` and
    the score is the mean over channels. Spatial extent must be >= 11.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ: {a.shape} vs {b.shape}")
    if channel_axis is None:
        if a.ndim != 2:
            raise DimensionError(f"ssim: pass channel_axis for rank-{a.ndim} input")
        planes = [(a, b)]
    else:
        planes = [(np.take(a, i, axis=channel_axis), np.take(b, i, axis=channel_axis))
                  for i in range(a.shape[channel_axis])]
    if min(planes[0][0].shape) < SSIM_WINDOW:
        raise DimensionError(
            f"ssim: image {planes[0][0].shape} smaller than the {SSIM_WINDOW}px window")
    return float(np.mean([_ssim_plane(pa, pb, max_value) for pa, pb in planes]))


def image_quality(predicted: np.ndarray, target: np.ndarray, max_value: float = 1.0,
                  channel_axis: int | None = None) -> dict[str, float]:
    """The three frame-comparison scores in one call."""
    return {
        "mse": mse(predicted, target),
        "ssim": ssim(predicted, target, max_value, channel_axis),
        "psnr": psnr(predicted, target, max_value),
    }


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @staticmethod
    def from_labels(true_labels, predicted_labels, n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        for t, p in zip(true_labels, predicted_labels):
            counts[int(t), int(p)] += 1
        return ConfusionMatrix(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class MetricsReport:
    """Scores for one evaluation run (optionally aggregated over folds)."""

    accuracy: float
    precision: float
    recall: float
    macro_f1: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    confusion: ConfusionMatrix
    fold_values: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "macro_f1": self.macro_f1,
            "per_class_precision": self.per_class_precision,
            "per_class_recall": self.per_class_recall,
            "confusion": self.confusion.counts.tolist(),
        }


def classification_report(true_labels, predicted_labels, n_classes: int = 5) -> MetricsReport:
    """Macro precision/recall/F1, accuracy, and the confusion matrix.

    Precision averages TP_i/P_i over all classes (a class never predicted
    contributes 0); recall averages TP_i/N_i; F1 is their harmonic mean.
    """
    true_labels = list(true_labels)
    predicted_labels = list(predicted_labels)
    if len(true_labels) != len(predicted_labels):
        raise DimensionError(
            f"label lists differ in length: {len(true_labels)} vs {len(predicted_labels)}")
    confusion = ConfusionMatrix.from_labels(true_labels, predicted_labels, n_classes)
    c = confusion.counts
    tp = np.diag(c).astype(np.float64)
    predicted_per_class = c.sum(axis=0).astype(np.float64)
    true_per_class = c.sum(axis=1).astype(np.float64)
    per_prec = np.divide(tp, predicted_per_class,
                         out=np.zeros(n_classes), where=predicted_per_class > 0)
    per_rec = np.divide(tp, true_per_class,
                        out=np.zeros(n_classes), where=true_per_class > 0)
    precision = float(per_prec.sum() / n_classes)
    recall = float(per_rec.sum() / n_classes)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    accuracy = float(tp.sum() / max(len(true_labels), 1))
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        macro_f1=float(f1),
        per_class_precision=per_prec.tolist(),
        per_class_recall=per_rec.tolist(),
        confusion=confusion,
    )


def aggregate_folds(per_fold_values) -> tuple[float, float]:
    """Mean and standard error (sample stddev / sqrt(k)) over fold scores."""
    vals = np.asarray(list(per_fold_values), dtype=np.float64)
    if vals.size < 2:
        raise ConfigError(f"fold aggregation needs >= 2 folds, got {vals.size}")
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))


def threshold_sweep(probability_sets, true_labels, thresholds,
                    fallback_class: int = 0, n_classes: int = 5) -> list[tuple[float, float]]:
    """Macro-F1 at each decision threshold.

    At each threshold the argmax class is kept only when its probability
    exceeds the threshold; otherwise the fallback class is predicted.
    """
    thresholds = list(thresholds)
    if any(not 0.0 <= t < 1.0 for t in thresholds):
        raise ConfigError(f"thresholds must lie in [0,1): {thresholds}")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("thresholds must be sorted ascending")
    probs = np.asarray(list(probability_sets), dtype=np.float64)
    curve = []
    for t in thresholds:
        best = probs.argmax(axis=1)
        confident = probs[np.arange(len(probs)), best] > t
        pred = np.where(confident, best, fallback_class)
        report = classification_report(true_labels, pred.tolist(), n_classes)
        curve.append((float(t), report.macro_f1))
    return curve
