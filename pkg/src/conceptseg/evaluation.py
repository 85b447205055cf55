"""Metric suite: gIoU/cIoU, instance-level F1, J&F, and condition-space
cluster separability.

Two benchmark protocols are provided. The union protocol merges retained
masks into one foreground mask per sample before scoring; the instance
protocol aligns predicted and ground-truth mask sets by Hungarian matching
and scores matched pairs, counting unmatched ground truth as IoU 0 and
unmatched predictions through F1's false positives only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import BinaryMask, ShapeError, hungarian_assign, mask_iou, mask_union

MaskSet = list[BinaryMask]


class UsageError(ValueError):
    pass


@dataclass
class MetricsReport:
    giou: float | None = None
    ciou: float | None = None
    f1_at_05: float | None = None
    per_count: dict[int, float] = field(default_factory=dict)
    j: float | None = None
    f: float | None = None
    jandf: float | None = None
    sample_count: int = 0

    def __post_init__(self) -> None:
        for name in ("giou", "ciou", "f1_at_05", "j", "f", "jandf"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} = {v} outside [0, 1]")
        if self.j is not None and self.f is not None:
            expected = (self.j + self.f) / 2
            if self.jandf is None or abs(self.jandf - expected) > 1e-12:
                raise ValueError("jandf must equal (j + f) / 2")

    def to_json(self) -> dict:
        return {
            "giou": self.giou,
            "ciou": self.ciou,
            "f1_at_05": self.f1_at_05,
            "per_count": {str(k): v for k, v in sorted(self.per_count.items())},
            "j": self.j,
            "f": self.f,
            "jandf": self.jandf,
            "sample_count": self.sample_count,
        }


def giou(per_sample_ious: list[float]) -> float:
    """Mean of per-sample IoU values."""
    if not per_sample_ious:
        raise UsageError("gIoU over an empty sample list")
    return float(np.mean(per_sample_ious))


def ciou(intersections: list[float], unions: list[float]) -> float:
    """Cumulative intersection over cumulative union; vacuously 1 when empty."""
    total_union = float(np.sum(unions)) if unions else 0.0
    if total_union == 0.0:
        return 1.0
    return float(np.sum(intersections)) / total_union


def f1_at(preds: MaskSet, gts: MaskSet, tau: float = 0.5) -> tuple[float, int, int, int]:
    """One-to-one Hungarian pairing on cost 1 - IoU, then count pairs >= tau.

    Returns (F1, TP, FP, FN); an empty-vs-empty sample scores F1 = 1.
    """
    all_masks = preds + gts
    if all_masks:
        ref_shape = all_masks[0].bits.shape
        for m in all_masks:
            if m.bits.shape != ref_shape:
                raise ShapeError("prediction and ground-truth masks must share dimensions")
    if preds and gts:
        iou = np.zeros((len(preds), len(gts)))
        for i, p in enumerate(preds):
            for j, g in enumerate(gts):
                iou[i, j] = mask_iou(p, g)
        assignment = hungarian_assign(1.0 - iou)
        tp = sum(1 for i, j in assignment.pairs if iou[i, j] >= tau)
    else:
        tp = 0
    fp = len(preds) - tp
    fn = len(gts) - tp
    if tp == fp == fn == 0:
        return 1.0, 0, 0, 0
    return 2 * tp / (2 * tp + fp + fn), tp, fp, fn


def grefcoco_protocol(results: list[MaskSet], gts: list[MaskSet],
                      height: int, width: int) -> MetricsReport:
    """Union protocol: merge retained masks per sample, score the unions."""
    if len(results) != len(gts):
        raise UsageError("results and ground truth differ in sample count")
    if not results:
        raise UsageError("empty corpus")
    ious, inters, unions = [], [], []
    tp = fp = fn = 0
    for preds, gt in zip(results, gts):
        pu = mask_union(preds, height=height, width=width)
        gu = mask_union(gt, height=height, width=width)
        ious.append(mask_iou(pu, gu))
        inters.append(float(np.logical_and(pu.bits, gu.bits).sum()))
        unions.append(float(np.logical_or(pu.bits, gu.bits).sum()))
        _, t, p_, n = f1_at(preds, gt)
        tp, fp, fn = tp + t, fp + p_, fn + n
    f1 = 1.0 if tp == fp == fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return MetricsReport(giou=giou(ious), ciou=ciou(inters, unions), f1_at_05=f1,
                         sample_count=len(results))


def muse_protocol(results: list[MaskSet], gts: list[MaskSet]) -> MetricsReport:
    """Instance protocol: Hungarian alignment, unmatched GT scores IoU 0."""
    if len(results) != len(gts):
        raise UsageError("results and ground truth differ in sample count")
    if not results:
        raise UsageError("empty corpus")
    iou_stream: list[float] = []
    inters, union_terms = [], []
    tp = fp = fn = 0
    buckets: dict[int, list[int]] = {}
    for preds, gt in zip(results, gts):
        matched_ious = []
        matched_pairs: list[tuple[int, int]] = []
        if preds and gt:
            iou = np.zeros((len(preds), len(gt)))
            for i, p in enumerate(preds):
                for j, g in enumerate(gt):
                    iou[i, j] = mask_iou(p, g)
            assignment = hungarian_assign(1.0 - iou)
            matched_pairs = list(assignment.pairs)
            matched_ious = [iou[i, j] for i, j in matched_pairs]
        matched_gt = {j for _, j in matched_pairs}
        for i, j in matched_pairs:
            inter = float(np.logical_and(preds[i].bits, gt[j].bits).sum())
            union = float(np.logical_or(preds[i].bits, gt[j].bits).sum())
            inters.append(inter)
            union_terms.append(union)
        for j, g in enumerate(gt):
            if j not in matched_gt:
                union_terms.append(float(g.bits.sum()))
        iou_stream.extend(matched_ious)
        iou_stream.extend(0.0 for j in range(len(gt)) if j not in matched_gt)
        _, t, p_, n = f1_at(preds, gt)
        tp, fp, fn = tp + t, fp + p_, fn + n
        b = buckets.setdefault(len(gt), [0, 0, 0])
        b[0], b[1], b[2] = b[0] + t, b[1] + p_, b[2] + n
    f1 = 1.0 if tp == fp == fn == 0 else 2 * tp / (2 * tp + fp + fn)
    per_count = {}
    for count, (t, p_, n) in buckets.items():
        per_count[count] = 1.0 if t == p_ == n == 0 else 2 * t / (2 * t + p_ + n)
    g = float(np.mean(iou_stream)) if iou_stream else 1.0
    return MetricsReport(giou=g, ciou=ciou(inters, union_terms), f1_at_05=f1,
                         per_count=per_count, sample_count=len(results))


def per_count_breakdown(results: list[MaskSet], gts: list[MaskSet]) -> dict[int, float]:
    """Pooled F1@0.5 per ground-truth cardinality bucket."""
    return muse_protocol(results, gts).per_count


# --- boundary measure ---------------------------------------------------------

def _shift(bits: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Zero-filled shift of a boolean grid."""
    h, w = bits.shape
    out = np.zeros_like(bits)
    rs = slice(max(dr, 0), min(h, h + dr))
    cs = slice(max(dc, 0), min(w, w + dc))
    rs_src = slice(max(-dr, 0), min(h, h - dr))
    cs_src = slice(max(-dc, 0), min(w, w - dc))
    out[rs, cs] = bits[rs_src, cs_src]
    return out


def boundary_pixels(mask: BinaryMask) -> np.ndarray:
    """Foreground pixels with a 4-neighbor (or border) background contact."""
    bits = mask.bits
    interior = bits.copy()
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        interior &= _shift(bits, dr, dc)
    return bits & ~interior


def _disk_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [
        (dr, dc)
        for dr in range(-r, r + 1)
        for dc in range(-r, r + 1)
        if dr * dr + dc * dc <= radius * radius
    ]


def _dilate(bits: np.ndarray, offsets: list[tuple[int, int]]) -> np.ndarray:
    out = np.zeros_like(bits)
    for dr, dc in offsets:
        out |= _shift(bits, dr, dc)
    return out


def boundary_f_measure(pred: BinaryMask, gt: BinaryMask, tolerance_frac: float = 0.008) -> float:
    """Contour F-measure with a dilation tolerance of 0.8% of the diagonal.

    Empty-boundary conventions: both empty -> 1; exactly one empty -> 0.
    """
    if pred.bits.shape != gt.bits.shape:
        raise ShapeError("boundary comparison needs equal shapes")
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    n_p, n_g = int(pb.sum()), int(gb.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    radius = math.ceil(tolerance_frac * math.hypot(*pred.bits.shape))
    offsets = _disk_offsets(radius)
    precision = float((pb & _dilate(gb, offsets)).sum()) / n_p
    recall = float((gb & _dilate(pb, offsets)).sum()) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf_metric(pred_frames: list[MaskSet], gt_frames: list[MaskSet],
              height: int, width: int) -> MetricsReport:
    """Per-frame union masks scored by mean IoU (J) and boundary F."""
    if len(pred_frames) != len(gt_frames):
        raise ShapeError(f"frame count mismatch: {len(pred_frames)} vs {len(gt_frames)}")
    if not pred_frames:
        raise UsageError("empty frame sequence")
    js, fs = [], []
    for preds, gt in zip(pred_frames, gt_frames):
        pu = mask_union(preds, height=height, width=width)
        gu = mask_union(gt, height=height, width=width)
        js.append(mask_iou(pu, gu))
        fs.append(boundary_f_measure(pu, gu))
    j, f = float(np.mean(js)), float(np.mean(fs))
    return MetricsReport(j=j, f=f, jandf=(j + f) / 2, sample_count=len(pred_frames))


# --- embedding separability ----------------------------------------------------

@dataclass
class SeparabilityReport:
    silhouette_by_category: float
    silhouette_by_position: float
    knn_agreement_by_category: float
    knn_agreement_by_position: float

    def to_json(self) -> dict:
        return {
            "silhouette_by_category": self.silhouette_by_category,
            "silhouette_by_position": self.silhouette_by_position,
            "knn_agreement_by_category": self.knn_agreement_by_category,
            "knn_agreement_by_position": self.knn_agreement_by_position,
        }


def _silhouette(dist: np.ndarray, labels: np.ndarray) -> float:
    n = dist.shape[0]
    classes = np.unique(labels)
    if classes.size < 2:
        raise UsageError("silhouette needs at least two labels")
    scores = np.zeros(n)
    for i in range(n):
        same = (labels == labels[i])
        same[i] = False
        if not same.any():
            scores[i] = 0.0
            continue
        a = dist[i, same].mean()
        b = min(dist[i, labels == c].mean() for c in classes if c != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


def _knn_agreement(dist: np.ndarray, labels: np.ndarray, k: int) -> float:
    n = dist.shape[0]
    if n - 1 < k:
        raise UsageError(f"need at least {k + 1} vectors for {k}-NN agreement")
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    agree = (labels[idx] == labels[:, None]).mean(axis=1)
    return float(agree.mean())


def cluster_separability(
    vectors: np.ndarray,
    category_labels,
    position_labels,
    k: int = 10,
) -> SeparabilityReport:
    """Silhouette and k-NN label agreement under two labelings of the same
    vectors: semantic category and 3x3 spatial position bin."""
    vectors = np.asarray(vectors, dtype=np.float64)
    cat = np.asarray(category_labels)
    pos = np.asarray(position_labels)
    if vectors.shape[0] != cat.shape[0] or vectors.shape[0] != pos.shape[0]:
        raise UsageError("vector and label counts differ")
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    if dist.max() == 0.0:
        raise UsageError("all vectors identical: silhouette undefined")
    return SeparabilityReport(
        silhouette_by_category=_silhouette(dist, cat),
        silhouette_by_position=_silhouette(dist, pos),
        knn_agreement_by_category=_knn_agreement(dist, cat, k),
        knn_agreement_by_position=_knn_agreement(dist, pos, k),
    )


def position_bin(center: tuple[int, int], height: int, width: int, grid: int = 3) -> int:
    """3x3 spatial bin index of an instance center."""
    r = min(grid - 1, center[0] * grid // height)
    c = min(grid - 1, center[1] * grid // width)
    return int(r * grid + c)
