"""Detection accuracy (precision, recall, AP/mAP50) and image-quality (PSNR, SSIM) metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .complexity import ComplexityReport, complexity_report, count_flops, count_gflops, count_params  # noqa: F401
from .head import box_iou_np

N_INTERP = 101


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    ap: float
    n_gt: int


def match_detections(dets, gts, iou_threshold: float = 0.5):
    """Greedy matching of detections to ground truth.

    ``dets`` rows: (class, score, x1, y1, x2, y2); ``gts`` rows: (class, x1, y1, x2, y2).
    Detections are visited by descending score; each takes the unmatched
    same-class ground truth with the highest IoU, if that IoU reaches the
    threshold. Returns ``(counts, is_tp)`` with ``is_tp`` aligned to the
    score-sorted detections.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 6)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    order = np.argsort(-dets[:, 1], kind="stable")
    dets = dets[order]
    is_tp = np.zeros(len(dets), dtype=bool)
    taken = np.zeros(len(gts), dtype=bool)
    if len(dets) and len(gts):
        ious = box_iou_np(dets[:, 2:], gts[:, 1:])
        for i, d in enumerate(dets):
            cand = np.flatnonzero((gts[:, 0] == d[0]) & ~taken)
            if len(cand) == 0:
                continue
            j = cand[np.argmax(ious[i, cand])]
            if ious[i, j] >= iou_threshold:
                taken[j] = True
                is_tp[i] = True
    tp = int(is_tp.sum())
    return ConfusionCounts(tp, len(dets) - tp, len(gts) - tp), is_tp


def precision_recall(counts: ConfusionCounts) -> tuple[float, float]:
    """TP/(TP+FP) and TP/(TP+FN); 0/0 is taken as 1 for both."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 1.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 1.0
    return p, r


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated area under a PR curve with the monotone precision envelope."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(np.asarray(precision, dtype=np.float64)[::-1])[::-1]
    t = np.linspace(0, 1, N_INTERP)
    idx = np.searchsorted(np.asarray(recall, dtype=np.float64), t, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _as_images(x, width: int):
    """A numpy array is one image; a list or tuple holds one array per image."""
    if not isinstance(x, (list, tuple)):
        return [np.asarray(x, dtype=np.float64).reshape(-1, width)]
    return [np.asarray(a, dtype=np.float64).reshape(-1, width) for a in x]


def pr_curve(dets, gts, class_id: int, iou_threshold: float = 0.5) -> PrCurve:
    """PR curve for one class over a set of images.

    ``dets``/``gts`` are either single arrays (one image) or lists of per-image
    arrays, in the row formats of :func:`match_detections`.
    """
    det_imgs, gt_imgs = _as_images(dets, 6), _as_images(gts, 5)
    if len(det_imgs) != len(gt_imgs):
        raise ValueError("dets and gts must cover the same images")
    scores, flags, n_gt = [], [], 0
    for d, g in zip(det_imgs, gt_imgs):
        d = d[d[:, 0] == class_id]
        g = g[g[:, 0] == class_id]
        n_gt += len(g)
        _, tp = match_detections(d, g, iou_threshold)
        scores.append(np.sort(d[:, 1], kind="stable")[::-1] if len(d) else np.zeros(0))
        flags.append(tp)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, bool)
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    tpc = np.cumsum(flags)
    fpc = np.cumsum(~flags)
    recall = tpc / n_gt if n_gt else np.ones(len(tpc))
    precision = tpc / np.maximum(tpc + fpc, 1)
    ap = interpolated_ap(recall, precision) if n_gt else 0.0
    return PrCurve(recall, precision, scores, ap, n_gt)


def average_precision(dets, gts, class_id: int, iou_threshold: float = 0.5) -> float:
    return pr_curve(dets, gts, class_id, iou_threshold).ap


def mean_average_precision(dets, gts, n_classes: int, iou_threshold: float = 0.5):
    """Per-class AP and their mean.

    Classes with neither ground truth nor detections are reported as NaN and
    left out of the mean.
    """
    det_imgs, gt_imgs = _as_images(dets, 6), _as_images(gts, 5)
    aps = np.full(n_classes, np.nan)
    curves = {}
    for c in range(n_classes):
        n_det = sum(int((d[:, 0] == c).sum()) for d in det_imgs)
        n_gt = sum(int((g[:, 0] == c).sum()) for g in gt_imgs)
        if n_det == 0 and n_gt == 0:
            continue
        curves[c] = pr_curve(det_imgs, gt_imgs, c, iou_threshold)
        aps[c] = curves[c].ap
    valid = ~np.isnan(aps)
    m = float(aps[valid].mean()) if valid.any() else 0.0
    return aps, m, curves


# --- image quality --------------------------------------------------------------


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(peak**2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, peak: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Inputs are (H, W) or (C, H, W); channels are scored separately and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}")
    g = _gaussian_window(win_size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    pad = win_size // 2

    def filt(x):
        y = correlate1d(correlate1d(x, g, axis=-1, mode="constant"), g, axis=-2, mode="constant")
        return y[..., pad:-pad, pad:-pad]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())
