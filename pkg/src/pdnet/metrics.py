"""Saliency evaluation: MAE, adaptive-threshold F-measure, and the 256-point
precision-recall curve.

The PR curve binarizes on the 0..255 integer grid with a strict >, so every
point is an exact integer confusion count; precision at thresholds with no
predicted positives is defined as 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

DEFAULT_BETA2 = 0.3
THRESHOLDS = 256


class MetricError(ValueError):
    """Undefined metric for the given inputs (e.g. an all-negative mask)."""


@dataclass
class MetricsReport:
    mae: float
    f_beta: float
    pr_curve: np.ndarray  # (256, 2): precision, recall per threshold 0..255
    n_samples: int


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_pair(s, g):
    if s.shape != g.shape:
        raise MetricError(f"prediction shape {s.shape} != mask shape {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise MetricError("ground truth mask must be binary 0/1")


def mae(s, g) -> float:
    """Mean absolute per-pixel error."""
    s, g = _arr(s), _arr(g)
    _check_pair(s, g)
    return float(np.abs(s.astype(np.float64) - g).mean())


def _counts_per_threshold(preds, masks):
    """Histogram trick: pixel with value v is predicted positive at threshold t
    iff v*255 > t, i.e. for every t <= ceil(v*255) - 1."""
    tp_h = np.zeros(THRESHOLDS, np.int64)
    pp_h = np.zeros(THRESHOLDS, np.int64)
    npos = 0
    for s, g in zip(preds, masks):
        s, g = _arr(s), _arr(g)
        _check_pair(s, g)
        v = s.astype(np.float64).ravel() * 255.0
        pos = g.ravel() > 0.5
        npos += int(pos.sum())
        b = np.ceil(v).astype(np.int64) - 1  # v in (b, b+1]
        keep = b >= 0
        pp_h += np.bincount(b[keep], minlength=THRESHOLDS)[:THRESHOLDS]
        kb = b[keep & pos]
        tp_h += np.bincount(kb, minlength=THRESHOLDS)[:THRESHOLDS]
    # counts at threshold t = number of pixels with bucket >= t
    tp = np.cumsum(tp_h[::-1])[::-1]
    pp = np.cumsum(pp_h[::-1])[::-1]
    return tp, pp, npos


def pr_curve(predictions: list, masks: list) -> np.ndarray:
    """256 (precision, recall) pairs, micro-averaged over all pixels."""
    if not predictions or len(predictions) != len(masks):
        raise MetricError("pr_curve needs matched, nonempty prediction/mask lists")
    tp, pp, npos = _counts_per_threshold(predictions, masks)
    if npos == 0:
        raise MetricError("all masks are empty: recall is undefined")
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 1.0)
    recall = tp / npos
    return np.stack([precision, recall], axis=1)


def _fbeta(p: float, r: float, beta2: float) -> float:
    if p == 0.0 and r == 0.0:
        return 0.0
    return (1.0 + beta2) * p * r / (beta2 * p + r)


def f_measure_adaptive(s, g, beta2: float = DEFAULT_BETA2,
                       threshold_scale: float = 2.0) -> float:
    """F-beta at the adaptive threshold T = min(scale * mean(S), 1)."""
    s, g = _arr(s), _arr(g)
    _check_pair(s, g)
    pos = g > 0.5
    npos = int(pos.sum())
    if npos == 0:
        raise MetricError("empty ground-truth mask: F-measure undefined")
    t = min(threshold_scale * float(s.mean()), 1.0)
    pred = s > t
    tp = int((pred & pos).sum())
    pp = int(pred.sum())
    p = tp / pp if pp > 0 else 0.0
    r = tp / npos
    return _fbeta(p, r, beta2)


def f_measure_max_curve(s, g, beta2: float = DEFAULT_BETA2) -> float:
    """Max F-beta over the 256-point PR curve of a single prediction."""
    curve = pr_curve([s], [g])
    return max(_fbeta(p, r, beta2) for p, r in curve)


def evaluate_dataset(forward_fn, samples, beta2: float = DEFAULT_BETA2,
                     f_mode: str = "adaptive", threshold_scale: float = 2.0) -> MetricsReport:
    """Runs ``forward_fn`` over samples and aggregates the evaluation suite.

    ``forward_fn(batch: list[Sample]) -> np.ndarray (B,1,H,W)``.  MAE and
    F-beta are per-sample values averaged over samples; the PR curve is
    micro-averaged over all pixels.
    """
    if not samples:
        raise MetricError("evaluate_dataset needs a nonempty sample list")
    if f_mode not in ("adaptive", "max-curve"):
        raise MetricError(f"unknown f_mode {f_mode!r}")
    preds = []
    batch = 25
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        out = forward_fn(chunk)
        for i in range(len(chunk)):
            preds.append(out[i:i + 1])
    maes, fbs = [], []
    for pred, sample in zip(preds, samples):
        g = sample.gt.data
        maes.append(mae(pred, g))
        if f_mode == "adaptive":
            fbs.append(f_measure_adaptive(pred, g, beta2, threshold_scale))
        else:
            fbs.append(f_measure_max_curve(pred, g, beta2))
    curve = pr_curve(preds, [s.gt.data for s in samples])
    return MetricsReport(
        mae=float(np.mean(maes)),
        f_beta=float(np.mean(fbs)),
        pr_curve=curve,
        n_samples=len(samples),
    )


def write_report_csv(report: MetricsReport, scalars_path, curve_path):
    """`metric,value` scalars plus a 256-row `threshold,precision,recall` curve."""
    with open(scalars_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["mae", repr(report.mae)])
        w.writerow(["fbeta", repr(report.f_beta)])
        w.writerow(["n_samples", report.n_samples])
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "precision", "recall"])
        for t, (p, r) in enumerate(report.pr_curve):
            w.writerow([t, repr(float(p)), repr(float(r))])
