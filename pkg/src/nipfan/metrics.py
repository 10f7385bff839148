"""Image fidelity (PSNR, SSIM) and classification (confusion matrix) metrics.

Images are float arrays in ``[0, 1]``; both fidelity metrics are evaluated
on the 8-bit scale so the numbers are comparable with common reporting.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import InputError, ShapeError
from .channel import N_CLASSES, REPORT_ORDER

PEAK = 255.0
PSNR_INF = math.inf  # sentinel for identical images; written as "inf" in reports
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * PEAK) ** 2
SSIM_C2 = (0.03 * PEAK) ** 2
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse255(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(((a - b) * PEAK) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in ``[0, 1]``; identical inputs give ``PSNR_INF``."""
    err = mse255(a, b)
    if err == 0:
        return PSNR_INF
    return 20 * math.log10(PEAK) - 10 * math.log10(err)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def luminance(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] == 3:
        return rgb @ LUMA_WEIGHTS
    if rgb.shape[-1] == 1:
        return rgb[..., 0]
    return rgb


def _gaussian_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _window_mean(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Separable Gaussian average over every fully-contained window position.
    k = len(g)
    x = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1) @ g
    x = np.lib.stride_tricks.sliding_window_view(x, k, axis=-2) @ g
    return x


def ssim(a, b) -> float:
    """Structural similarity on luminance with an 11x11 Gaussian window (sigma 1.5).

    Accepts ``[h, w]``, ``[h, w, 3]`` or a batch ``[n, h, w, 3]`` (mean over the batch).
    """
    a, b = _check_pair(a, b)
    ya, yb = luminance(a) * PEAK, luminance(b) * PEAK
    if ya.shape[-1] < SSIM_WINDOW or ya.shape[-2] < SSIM_WINDOW:
        raise InputError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {ya.shape[-2:]}")
    g = _gaussian_1d()
    mu_a, mu_b = _window_mean(ya, g), _window_mean(yb, g)
    var_a = _window_mean(ya * ya, g) - mu_a ** 2
    var_b = _window_mean(yb * yb, g) - mu_b ** 2
    cov = _window_mean(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class ConfusionMatrix:
    """``counts[true, predicted]`` indexed by manipulation-class code."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def per_class_accuracy(self) -> np.ndarray:
        return np.diag(self.normalized())

    def report_view(self) -> np.ndarray:
        """Row-normalized matrix in reporting order."""
        order = [int(c) for c in REPORT_ORDER]
        return self.normalized()[np.ix_(order, order)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted"] + [c.short for c in REPORT_ORDER])
        for c, row in zip(REPORT_ORDER, self.report_view()):
            w.writerow([c.short] + [f"{v:.4f}" for v in row])
        return buf.getvalue()

    def to_text(self) -> str:
        names = [c.short for c in REPORT_ORDER]
        width = max(len(n) for n in names) + 2
        lines = [" " * width + "".join(n.rjust(width) for n in names)]
        for name, row in zip(names, self.report_view()):
            lines.append(name.ljust(width) + "".join(f"{v:.2f}".rjust(width) for v in row))
        lines.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(lines)


def confusion(labels, predictions, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ShapeError(f"labels {labels.shape} and predictions {predictions.shape} must be equal-length vectors")
    for name, v in (("label", labels), ("prediction", predictions)):
        if v.size and (v.min() < 0 or v.max() >= n_classes or not np.all(v == np.round(v))):
            raise InputError(f"{name} values must be integers in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels.astype(np.intp), predictions.astype(np.intp)), 1)
    return ConfusionMatrix(counts)
