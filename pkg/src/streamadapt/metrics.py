"""Depth accuracy, mean IoU and panoptic quality.

Semantic and panoptic metrics accumulate over a sequence before dividing:
:class:`ConfusionMatrix` sums per-class pixel counts and
:class:`PanopticAccumulator` sums per-class TP/FP/FN counts and matched IoUs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import IGNORE_INDEX, InvalidInputError, check_depth_map


@dataclass
class DepthMetrics:
    rmse: float
    abs_rel: float
    delta1: float
    delta2: float
    delta3: float

    @classmethod
    def mean(cls, items):
        items = list(items)
        if not items:
            raise InvalidInputError("no depth metrics to average")
        return cls(*(float(np.mean([getattr(m, f) for m in items])) for f in
                     ("rmse", "abs_rel", "delta1", "delta2", "delta3")))


def depth_metrics(pred, gt, median_scaling=True, max_depth=None):
    """RMSE, absolute relative error and ratio accuracies over mutually valid pixels.

    With ``median_scaling`` the prediction is multiplied by
    ``median(gt) / median(pred)`` first.  ``max_depth`` drops ground-truth
    pixels beyond the cap.
    """
    pred = check_depth_map(pred, "pred")
    gt = check_depth_map(gt, "gt", shape=pred.shape)
    valid = (pred > 0) & (gt > 0)
    if max_depth is not None:
        valid &= gt <= max_depth
    if not np.any(valid):
        raise InvalidInputError("prediction and ground truth share no valid pixel")
    p, g = pred[valid], gt[valid]
    if median_scaling:
        p = p * (np.median(g) / np.median(p))
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


class ConfusionMatrix:
    """Confusion counts ``matrix[gt, pred]`` accumulated over frames."""

    def __init__(self, n_classes, ignore_index=IGNORE_INDEX):
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt):
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise InvalidInputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        keep = (gt != self.ignore_index) & (gt < self.n_classes)
        p = np.clip(pred[keep], 0, self.n_classes - 1)
        self.matrix += np.bincount(gt[keep] * self.n_classes + p,
                                   minlength=self.n_classes**2).reshape(self.n_classes, self.n_classes)
        return self

    def merge(self, other):
        self.matrix += other.matrix
        return self

    def iou(self):
        """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
        tp = np.diag(self.matrix).astype(np.float64)
        denom = self.matrix.sum(axis=0) + self.matrix.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def miou(self):
        iou = self.iou()
        return float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else 0.0


def mean_iou(pred, gt, n_classes, ignore_index=IGNORE_INDEX):
    """Per-class IoU and their mean over classes present in ``pred`` or ``gt``."""
    cm = ConfusionMatrix(n_classes, ignore_index).update(pred, gt)
    return cm.iou(), cm.miou()


@dataclass
class PanopticMetrics:
    pq: float
    sq: float
    rq: float
    per_class: dict = field(default_factory=dict)


class PanopticAccumulator:
    """Per-class TP/FP/FN counts and matched IoU sums over frames.

    Segments are one per stuff class and one per (thing class, instance id).
    A predicted and a ground-truth segment of the same class match when their
    IoU exceeds 0.5; such matches are unique.  Pixels with the ignore id in
    the ground truth are removed from both maps before matching.
    """

    def __init__(self, n_classes, thing_classes=(), ignore_index=IGNORE_INDEX):
        self.n_classes = n_classes
        self.thing_classes = set(int(c) for c in thing_classes)
        self.ignore_index = ignore_index
        self.tp = np.zeros(n_classes, dtype=np.int64)
        self.fp = np.zeros(n_classes, dtype=np.int64)
        self.fn = np.zeros(n_classes, dtype=np.int64)
        self.iou_sum = np.zeros(n_classes)

    def _segment_keys(self, semantic, instance):
        # class in the high bits, instance id (0 for stuff) in the low bits
        things = np.isin(semantic, list(self.thing_classes))
        return semantic * 2**31 + np.where(things, instance, 0)

    def update(self, pred, gt):
        p_sem, p_inst = (np.asarray(a, dtype=np.int64) for a in pred)
        g_sem, g_inst = (np.asarray(a, dtype=np.int64) for a in gt)
        if not (p_sem.shape == p_inst.shape == g_sem.shape == g_inst.shape):
            raise InvalidInputError("panoptic maps must share one shape")
        keep = g_sem != self.ignore_index
        p_key = self._segment_keys(p_sem, p_inst)
        g_key = self._segment_keys(g_sem, g_inst)
        p_ids, p_area = np.unique(p_key[keep], return_counts=True)
        g_ids, g_area = np.unique(g_key[keep], return_counts=True)
        pairs, inter = np.unique(np.stack([g_key[keep], p_key[keep]]), axis=1, return_counts=True)
        p_area = dict(zip(p_ids.tolist(), p_area.tolist()))
        g_area = dict(zip(g_ids.tolist(), g_area.tolist()))
        matched_p, matched_g = set(), set()
        for (gk, pk), n in zip(pairs.T.tolist(), inter.tolist()):
            if gk // 2**31 != pk // 2**31:
                continue
            iou = n / (g_area[gk] + p_area[pk] - n)
            if iou > 0.5:
                c = gk // 2**31
                self.tp[c] += 1
                self.iou_sum[c] += iou
                matched_g.add(gk)
                matched_p.add(pk)
        for gk in g_area:
            if gk not in matched_g:
                self.fn[gk // 2**31] += 1
        for pk in p_area:
            if pk not in matched_p and 0 <= pk // 2**31 < self.n_classes:
                self.fp[pk // 2**31] += 1
        return self

    def merge(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        return self

    def compute(self):
        per_class = {}
        for c in range(self.n_classes):
            tp, fp, fn = int(self.tp[c]), int(self.fp[c]), int(self.fn[c])
            if tp + fp + fn == 0:
                continue
            sq = self.iou_sum[c] / tp if tp else 0.0
            rq = tp / (tp + 0.5 * fp + 0.5 * fn)
            per_class[c] = {"pq": sq * rq, "sq": sq, "rq": rq, "tp": tp, "fp": fp, "fn": fn}
        if not per_class:
            return PanopticMetrics(0.0, 0.0, 0.0, {})
        mean = lambda key: float(np.mean([v[key] for v in per_class.values()]))  # noqa: E731
        return PanopticMetrics(mean("pq"), mean("sq"), mean("rq"), per_class)


def panoptic_quality(pred, gt, n_classes, thing_classes=(), ignore_index=IGNORE_INDEX):
    """PQ/SQ/RQ of a single ``(semantic, instance)`` prediction against ground truth."""
    return PanopticAccumulator(n_classes, thing_classes, ignore_index).update(pred, gt).compute()
