import json

import numpy as np
import pytest

from ddanet.metrics import MetricsReport, aggregate_report, fps_benchmark, segmentation_metrics
from ddanet.model import ModelConfig, build


def confusion_oracle(pred, gt, threshold=0.5):
    """Brute-force per-image confusion matrix over explicit pixel loops."""
    n = pred.shape[0]
    results = []
    for i in range(n):
        p = pred[i].reshape(-1)
        g = gt[i].reshape(-1)
        tp = fp = fn = tn = 0
        for pv, gv in zip(p, g):
            pb = pv >= threshold
            gb = gv >= 0.5
            if pb and gb:
                tp += 1
            elif pb and not gb:
                fp += 1
            elif not pb and gb:
                fn += 1
            else:
                tn += 1
        dsc = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 1.0
        iou = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else 1.0
        rec = tp / (tp + fn) if (tp + fn) > 0 else 1.0
        prec = tp / (tp + fp) if (tp + fp) > 0 else 1.0
        results.append((dsc, iou, rec, prec))
    return np.array(results).T


class TestSegmentationMetrics:
    def test_perfect_prediction(self, rng):
        gt = (rng.uniform(0, 1, (3, 1, 8, 8)) > 0.5).astype(np.float64)
        dsc, iou, rec, prec = segmentation_metrics(gt.copy(), gt)
        for arr in (dsc, iou, rec, prec):
            assert np.all(arr == 1.0)

    def test_hand_counted_case(self):
        pred = np.array([1.0, 1.0, 1.0, 1.0]).reshape(1, 4)
        gt = np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 4)
        dsc, iou, rec, prec = segmentation_metrics(pred, gt)
        assert abs(dsc[0] - 2 * 2 / 6) < 1e-15
        assert iou[0] == 0.5
        assert rec[0] == 1.0
        assert prec[0] == 0.5

    def test_empty_gt_empty_pred_convention(self):
        zeros = np.zeros((1, 16))
        dsc, iou, rec, prec = segmentation_metrics(zeros.copy(), zeros)
        assert (dsc[0], iou[0], rec[0], prec[0]) == (1.0, 1.0, 1.0, 1.0)

    def test_empty_gt_nonempty_pred(self):
        pred = np.ones((1, 16))
        gt = np.zeros((1, 16))
        dsc, iou, rec, prec = segmentation_metrics(pred, gt)
        assert dsc[0] == 0.0 and iou[0] == 0.0 and prec[0] == 0.0
        assert rec[0] == 1.0  # no foreground to miss

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            segmentation_metrics(np.zeros((1, 4)), np.zeros((1, 5)))

    def test_matches_confusion_oracle_on_random_batches(self, rng):
        pred = rng.uniform(0, 1, (50, 16, 16))
        gt = (rng.uniform(0, 1, (50, 16, 16)) > rng.uniform(0.2, 0.8)).astype(np.float64)
        ours = segmentation_metrics(pred, gt)
        oracle = confusion_oracle(pred, gt)
        for a, b in zip(ours, oracle):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_per_image_identities(self, rng):
        pred = rng.uniform(0, 1, (100, 12, 12))
        gt = (rng.uniform(0, 1, (100, 12, 12)) > 0.5).astype(np.float64)
        dsc, iou, rec, prec = segmentation_metrics(pred, gt)
        assert np.max(np.abs(iou - dsc / (2 - dsc))) <= 1e-12
        assert np.max(np.abs(dsc - 2 * iou / (1 + iou))) <= 1e-12
        assert np.all(iou <= dsc + 1e-15)
        # harmonic-mean identity where defined (here gt and pred both nonempty)
        nonzero = (prec + rec) > 0
        hm = 2 * prec[nonzero] * rec[nonzero] / (prec[nonzero] + rec[nonzero])
        assert np.max(np.abs(dsc[nonzero] - hm)) <= 1e-12


class TestReport:
    def test_json_schema(self):
        report = MetricsReport(dsc=0.8576, miou=0.78, recall=0.888, precision=0.8643,
                               fps=69.59, n_images=120)
        parsed = json.loads(report.to_json())
        assert list(parsed.keys()) == ["dsc", "miou", "recall", "precision", "fps", "n_images"]
        assert parsed["dsc"] == 0.8576
        assert parsed["n_images"] == 120

    def test_six_decimal_fixed_formatting(self):
        report = MetricsReport(dsc=1 / 3, miou=0.25, recall=1.0, precision=0.5,
                               fps=12.3456789, n_images=3)
        text = report.to_json()
        assert '"dsc": 0.333333' in text
        assert '"fps": 12.345679' in text

    def test_aggregation_means(self):
        per_image = (np.array([1.0, 0.5]), np.array([1.0, 1 / 3]),
                     np.array([1.0, 0.5]), np.array([1.0, 0.5]))
        report = aggregate_report(per_image, fps=10.0)
        assert report.dsc == 0.75
        assert report.n_images == 2


class TestFpsBenchmark:
    def test_zero_iterations_rejected(self):
        params = build(ModelConfig(channel_widths=(4, 8, 16, 32), se_ratio=4), 0)
        with pytest.raises(ValueError):
            fps_benchmark(params, 16, n_timed=0)

    def test_positive_finite_fps(self):
        params = build(ModelConfig(channel_widths=(4, 8, 16, 32), se_ratio=4), 0)
        result = fps_benchmark(params, 16, n_warmup=1, n_timed=3)
        assert result["fps"] > 0 and np.isfinite(result["fps"])
        assert result["latency_p50"] <= result["latency_p95"]
