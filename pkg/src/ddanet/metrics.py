"""Evaluation metrics for binary segmentation and the inference-speed probe.

All metrics are pixel-level, computed per image from hard TP/FP/FN counts
after thresholding, then averaged over the dataset. The 0/0 cases (empty
ground truth matched by an empty prediction) count as 1.0 so a correct
all-negative prediction is not penalized.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class MetricsReport:
    dsc: float
    miou: float
    recall: float
    precision: float
    fps: float
    n_images: int

    def to_json(self) -> str:
        """Flat JSON object, float fields fixed to 6 decimals."""
        return (
            "{"
            f'"dsc": {self.dsc:.6f}, '
            f'"miou": {self.miou:.6f}, '
            f'"recall": {self.recall:.6f}, '
            f'"precision": {self.precision:.6f}, '
            f'"fps": {self.fps:.6f}, '
            f'"n_images": {self.n_images}'
            "}"
        )

    def summary(self) -> str:
        return (
            f"dsc={self.dsc:.4f} miou={self.miou:.4f} recall={self.recall:.4f} "
            f"precision={self.precision:.4f} fps={self.fps:.2f} n={self.n_images}"
        )


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5):
    """Per-image (dsc, iou, recall, precision) arrays for a batch of masks.

    ``pred`` holds probabilities in (0, 1), ``gt`` binary labels; axis 0
    indexes images and all remaining axes are flattened per image.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    n = pred.shape[0]
    pb = (pred >= threshold).reshape(n, -1)
    gb = (gt >= 0.5).reshape(n, -1)
    tp = np.sum(pb & gb, axis=1).astype(np.float64)
    fp = np.sum(pb & ~gb, axis=1).astype(np.float64)
    fn = np.sum(~pb & gb, axis=1).astype(np.float64)

    def ratio(num, den):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)

    dsc = ratio(2.0 * tp, 2.0 * tp + fp + fn)
    iou = ratio(tp, tp + fp + fn)
    recall = ratio(tp, tp + fn)
    precision = ratio(tp, tp + fp)
    return dsc, iou, recall, precision


def aggregate_report(per_image: tuple, fps: float) -> MetricsReport:
    """Dataset-level means of per-image metrics plus the measured throughput."""
    dsc, iou, recall, precision = per_image
    return MetricsReport(
        dsc=float(np.mean(dsc)),
        miou=float(np.mean(iou)),
        recall=float(np.mean(recall)),
        precision=float(np.mean(precision)),
        fps=fps,
        n_images=len(dsc),
    )


def fps_benchmark(params, input_size: int, n_warmup: int = 10, n_timed: int = 100) -> dict:
    """Wall-clock single-image forward throughput in eval mode.

    Returns images/second plus mean, median, and p95 per-image latency in
    seconds. Hardware dependent; there is no fixed target.
    """
    from .model import forward

    if n_timed < 1:
        raise ValueError("n_timed must be at least 1")
    if n_warmup < 0:
        raise ValueError("n_warmup must be non-negative")
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0.0, 1.0, (1, params.config.in_channels, input_size, input_size)),
               dtype=np.float32)
    for _ in range(n_warmup):
        forward(params, x, mode="eval")
    latencies = np.empty(n_timed)
    for i in range(n_timed):
        t0 = time.perf_counter()
        forward(params, x, mode="eval")
        latencies[i] = time.perf_counter() - t0
    total = float(latencies.sum())
    return {
        "fps": n_timed / total,
        "latency_mean": float(latencies.mean()),
        "latency_p50": float(np.percentile(latencies, 50)),
        "latency_p95": float(np.percentile(latencies, 95)),
        "n_timed": n_timed,
        "input_size": input_size,
    }
