"""Seed-quality metrics and weight-reliability analyses.

The segmentation metrics treat masks with the shared convention:
value 0 is background, foreground class c is value c + 1, and 255 is
ignored. Confusion matrices are (K, K) int64 with K = foreground
classes + 1, rows indexed by ground truth and columns by prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cam import CamSeed
from .errors import OutOfRangeError, ShapeMismatchError
from .resize import resize_bilinear
from .tensor_io import IGNORE_VALUE, FeatureStack

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(1, 20) * 0.05, 2).tolist())


@dataclass
class ThresholdResult:
    """Segmentation quality of the seeds binarized at one threshold."""

    threshold: float
    miou: float
    fwiou: float
    per_class_iou: np.ndarray  # (K,)
    confusion: np.ndarray  # (K, K) int64


@dataclass
class MpxapResult:
    """Pixel-pooled average precision per foreground class."""

    per_class_ap: list[float | None]  # None for classes with no positive pixel
    mean_ap: float
    excluded_classes: list[int]


@dataclass
class EvalReport:
    """Threshold sweep summary for a batch of seeds."""

    thresholds: list[float]
    miou_curve: list[float]
    fwiou_curve: list[float]
    best_threshold: float
    best_miou: float
    best_fwiou_threshold: float
    best_fwiou: float
    per_class_iou: np.ndarray  # at the mIoU-best threshold
    confusion: np.ndarray  # at the mIoU-best threshold
    num_samples: int
    mpxap: MpxapResult | None = None


@dataclass
class RelevanceReport:
    """Channels grouped by descending relevance, with weight sign counts."""

    group_sizes: list[int]
    group_mean_relevance: list[float]  # normalized so the largest group mean is 1
    group_positive_weights: list[int]  # strictly positive weights per group
    group_nonpositive_weights: list[int]
    pearson_r: float


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Count (gt, pred) pairs over non-ignored pixels.

    ``num_classes`` counts background plus foreground classes; mask
    values must stay below it or equal the ignore value.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatchError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    valid = gt != IGNORE_VALUE
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise OutOfRangeError(f"gt contains value {int(g.max())}, outside 0..{num_classes - 1}")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise OutOfRangeError(f"pred contains value {int(p.max())}, outside 0..{num_classes - 1}")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def iou_from_confusion(confusion: np.ndarray) -> np.ndarray:
    """Per-class IoU; a class absent from both gt and prediction scores 0."""
    confusion = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(confusion)
    denom = confusion.sum(axis=1) + confusion.sum(axis=0) - tp
    return np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), 0.0)


def miou_from_confusion(confusion: np.ndarray) -> float:
    """Unweighted mean IoU over every class, background included."""
    return float(iou_from_confusion(confusion).mean())


def fwiou(confusion: np.ndarray) -> float:
    """IoU per class weighted by that class's share of ground-truth pixels."""
    confusion = np.asarray(confusion, dtype=np.float64)
    total = confusion.sum()
    if total == 0:
        return 0.0
    freq = confusion.sum(axis=1) / total
    return float((freq * iou_from_confusion(confusion)).sum())


def _flatten_pairs(
    pairs: list[tuple[CamSeed, np.ndarray, np.ndarray]], num_fg_classes: int
) -> list[tuple[CamSeed, np.ndarray, np.ndarray, np.ndarray]]:
    """Validate each (seed, gt, present) triple and precompute argmax maps.

    For every sample this returns the ground truth alongside the
    highest-scoring present class per pixel and its score, which is all
    a threshold needs to reproduce cam_to_mask.
    """
    flat = []
    for seed, gt, present in pairs:
        gt = np.asarray(gt)
        if gt.shape != seed.spatial_shape:
            raise ShapeMismatchError(
                f"sample {seed.sample_id!r}: mask shape {gt.shape} != seed shape {seed.spatial_shape}"
            )
        if seed.num_classes != num_fg_classes:
            raise ShapeMismatchError(
                f"sample {seed.sample_id!r}: seed has {seed.num_classes} classes, expected {num_fg_classes}"
            )
        bad = (gt > num_fg_classes) & (gt != IGNORE_VALUE)
        if bad.any():
            raise OutOfRangeError(
                f"sample {seed.sample_id!r}: mask value {int(gt[bad][0])} outside 0..{num_fg_classes}"
            )
        present = np.unique(np.asarray(present, dtype=np.intp))
        if present.size == 0:
            raise ValueError(f"sample {seed.sample_id!r}: present_classes is empty")
        if present.min() < 0 or present.max() >= num_fg_classes:
            raise ValueError(f"sample {seed.sample_id!r}: present classes out of range")
        sub = seed.maps[present].astype(np.float64)
        best = np.argmax(sub, axis=0)
        score = np.take_along_axis(sub, best[None], axis=0)[0]
        label = (present[best] + 1).astype(np.uint8)
        flat.append((seed, gt, label, score))
    return flat


def miou_sweep(
    pairs: list[tuple[CamSeed, np.ndarray, np.ndarray]],
    num_fg_classes: int,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> list[ThresholdResult]:
    """Score the seeds at every threshold.

    ``pairs`` holds (seed, ground-truth mask, present class indices)
    per sample. The prediction at threshold t is exactly
    ``cam_to_mask(seed, present, t)``.
    """
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    k = num_fg_classes + 1
    flat = _flatten_pairs(list(pairs), num_fg_classes)
    results = []
    for t in thresholds:
        conf = np.zeros((k, k), dtype=np.int64)
        for _seed, gt, label, score in flat:
            pred = np.where(score >= t, label, np.uint8(0))
            conf += confusion_matrix(gt, pred, k)
        results.append(
            ThresholdResult(
                threshold=float(t),
                miou=miou_from_confusion(conf),
                fwiou=fwiou(conf),
                per_class_iou=iou_from_confusion(conf),
                confusion=conf,
            )
        )
    return results


def _pixel_ap(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Average precision over a pooled pixel set, ties grouped.

    Sweeps the distinct score values in descending order; each cutoff
    contributes (recall gain) * (precision at the cutoff). Returns None
    when there is no positive pixel.
    """
    total_pos = int(positive.sum())
    if total_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positive[order].astype(np.int64)
    cum_tp = np.cumsum(p)
    # last index of each run of equal scores = the cutoffs of the sweep
    cut = np.flatnonzero(np.diff(s) != 0)
    cut = np.append(cut, s.size - 1)
    precision = cum_tp[cut] / (cut + 1)
    recall = cum_tp[cut] / total_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def mpxap(pairs: list[tuple[CamSeed, np.ndarray, np.ndarray]], num_fg_classes: int) -> MpxapResult:
    """Mean pixel-pooled AP over the foreground classes.

    All non-ignored pixels of every sample are pooled; a pixel is a
    positive for class c when the ground truth stores c + 1. Classes
    with no positive pixel anywhere are left out of the mean and
    reported as excluded.
    """
    per_class_scores: list[list[np.ndarray]] = [[] for _ in range(num_fg_classes)]
    per_class_pos: list[list[np.ndarray]] = [[] for _ in range(num_fg_classes)]
    for seed, gt, _present in pairs:
        gt = np.asarray(gt)
        if gt.shape != seed.spatial_shape:
            raise ShapeMismatchError(
                f"sample {seed.sample_id!r}: mask shape {gt.shape} != seed shape {seed.spatial_shape}"
            )
        valid = gt != IGNORE_VALUE
        for c in range(num_fg_classes):
            per_class_scores[c].append(seed.maps[c][valid].astype(np.float64))
            per_class_pos[c].append(gt[valid] == c + 1)
    per_class_ap: list[float | None] = []
    excluded = []
    included = []
    for c in range(num_fg_classes):
        scores = np.concatenate(per_class_scores[c]) if per_class_scores[c] else np.zeros(0)
        pos = np.concatenate(per_class_pos[c]) if per_class_pos[c] else np.zeros(0, dtype=bool)
        ap = _pixel_ap(scores, pos)
        per_class_ap.append(ap)
        (excluded if ap is None else included).append(c)
    mean_ap = float(np.mean([per_class_ap[c] for c in included])) if included else 0.0
    return MpxapResult(per_class_ap=per_class_ap, mean_ap=mean_ap, excluded_classes=excluded)


def evaluate_seeds(
    pairs: list[tuple[CamSeed, np.ndarray, np.ndarray]],
    num_fg_classes: int,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    with_mpxap: bool = True,
) -> EvalReport:
    """Full sweep report: peak mIoU, peak FwIoU and optional pooled AP.

    Peaks report the first threshold on ties. The per-class IoU table
    and confusion counts come from the mIoU-best threshold; FwIoU is
    also reported at its own best threshold.
    """
    pairs = list(pairs)
    results = miou_sweep(pairs, num_fg_classes, thresholds)
    mious = np.array([r.miou for r in results])
    fwious = np.array([r.fwiou for r in results])
    best = int(np.argmax(mious))
    best_fw = int(np.argmax(fwious))
    return EvalReport(
        thresholds=[r.threshold for r in results],
        miou_curve=mious.tolist(),
        fwiou_curve=fwious.tolist(),
        best_threshold=results[best].threshold,
        best_miou=results[best].miou,
        best_fwiou_threshold=results[best_fw].threshold,
        best_fwiou=results[best_fw].fwiou,
        per_class_iou=results[best].per_class_iou,
        confusion=results[best].confusion,
        num_samples=len(pairs),
        mpxap=mpxap(pairs, num_fg_classes) if with_mpxap else None,
    )


def feature_relevance_iou(
    channel_map: np.ndarray, mask: np.ndarray, mask_value: int, threshold: float = 0.1
) -> float:
    """Overlap between one channel's activated region and a mask class.

    The channel map is rectified, scaled to peak at 1, resized to the
    mask resolution, and binarized at the threshold; the IoU against
    ``mask == mask_value`` skips ignored pixels. Two empty regions
    score 0.
    """
    channel_map = np.asarray(channel_map, dtype=np.float64)
    if channel_map.ndim != 2:
        raise ShapeMismatchError(f"channel map must be 2-D, got shape {channel_map.shape}")
    mask = np.asarray(mask)
    normed = np.maximum(channel_map, 0.0)
    peak = normed.max()
    if peak > 0:
        normed = normed / peak
    resized = resize_bilinear(normed, mask.shape)
    valid = mask != IGNORE_VALUE
    activated = (resized >= threshold) & valid
    target = (mask == mask_value) & valid
    union = np.logical_or(activated, target).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(activated, target).sum() / union)


def relevance_matrix(
    stack: FeatureStack,
    layer_offsets: dict[int, tuple[int, int]],
    mask: np.ndarray,
    num_fg_classes: int,
    threshold: float = 0.1,
) -> np.ndarray:
    """(K, D) feature_relevance_iou for every channel and class at once.

    Exactly equivalent to calling feature_relevance_iou per channel,
    with the normalization and resize hoisted out of the class loop.
    """
    mask = np.asarray(mask)
    valid = mask != IGNORE_VALUE
    targets = [(mask == c + 1) & valid for c in range(num_fg_classes)]
    target_sums = [t.sum() for t in targets]
    d = max(stop for _start, stop in layer_offsets.values())
    out = np.zeros((num_fg_classes, d), dtype=np.float64)
    for layer in sorted(layer_offsets):
        start, stop = layer_offsets[layer]
        fmap = np.asarray(stack.layers[layer], dtype=np.float64)
        if fmap.shape[0] != stop - start:
            raise ShapeMismatchError(
                f"layer {layer} has {fmap.shape[0]} channels, weight layout expects {stop - start}"
            )
        normed = np.maximum(fmap, 0.0)
        peaks = normed.reshape(normed.shape[0], -1).max(axis=1)
        normed = normed / np.where(peaks > 0, peaks, 1.0)[:, None, None]
        resized = resize_bilinear(normed, mask.shape)
        activated = (resized >= threshold) & valid
        for c in range(num_fg_classes):
            inter = (activated & targets[c]).sum(axis=(1, 2))
            union = activated.sum(axis=(1, 2)) + target_sums[c] - inter
            out[c, start:stop] = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def pearson_r(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation with a zero fallback for constant inputs."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"correlation inputs have shapes {a.shape} and {b.shape}")
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def weight_relevance_report(weights: np.ndarray, relevance: np.ndarray, n_groups: int = 16) -> RelevanceReport:
    """Summarize how weight mass tracks channel relevance for one class.

    Channels are ranked by relevance, highest first, and cut into
    ``n_groups`` contiguous blocks of D // n_groups channels with the
    remainder folded into the last block. Group relevance means are
    scaled so the largest is 1; each group also reports how many of its
    weights are strictly positive versus zero-or-negative.
    """
    weights = np.asarray(weights, dtype=np.float64).ravel()
    relevance = np.asarray(relevance, dtype=np.float64).ravel()
    if weights.shape != relevance.shape:
        raise ShapeMismatchError(f"weights shape {weights.shape} != relevance shape {relevance.shape}")
    d = weights.size
    if not 1 <= n_groups <= d:
        raise ValueError(f"n_groups must be in 1..{d}, got {n_groups}")
    order = np.argsort(-relevance, kind="stable")
    base = d // n_groups
    sizes = [base] * n_groups
    sizes[-1] += d - base * n_groups
    means = []
    positives = []
    nonpositives = []
    start = 0
    for size in sizes:
        idx = order[start : start + size]
        means.append(float(relevance[idx].mean()))
        positives.append(int((weights[idx] > 0).sum()))
        nonpositives.append(int((weights[idx] <= 0).sum()))
        start += size
    top = max(means)
    if top > 0:
        means = [m / top for m in means]
    return RelevanceReport(
        group_sizes=sizes,
        group_mean_relevance=means,
        group_positive_weights=positives,
        group_nonpositive_weights=nonpositives,
        pearson_r=pearson_r(weights, relevance),
    )
