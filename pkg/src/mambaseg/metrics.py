"""Segmentation evaluation: overlap ratios, boundary distances, reports.

Overlap metrics are computed from one-vs-rest confusion counts per class.
Degenerate cases follow the challenge convention: Dice/IoU/precision/
sensitivity are 1 when prediction and reference are both empty and 0 when
exactly one is; specificity is 1 when no true negatives exist to judge.

Boundary distances operate on surface point sets (foreground pixels with a
4-neighbor outside the mask or on the image edge).  HD95 is the maximum of
the two directed nearest-rank 95th percentiles; ASD is the symmetric mean
of directed nearest-neighbor distances.  Distances are Euclidean in pixel
units unless a per-axis spacing pair is given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

OVERLAP_METRICS = ("dice", "iou", "acc", "pre", "sen", "spe")
DISTANCE_METRICS = ("hd95", "asd")
CSV_HEADER = "label,dice,iou,acc,pre,sen,spe,hd95,asd"

# Foreground-class counts of the evaluation presets (classes incl. background).
DATASET_CLASSES = {"acdc": 4, "synapse": 9}


class EmptySurfaceError(ValueError):
    """A boundary distance was requested for an empty surface."""


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest pixel counts for a single class."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _check_label_maps(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not (np.issubdtype(pred.dtype, np.integer) and np.issubdtype(gt.dtype, np.integer)):
        raise ValueError("label maps must be integer arrays")
    if pred.size and (pred.min() < 0 or gt.min() < 0):
        raise ValueError("labels must be nonnegative")
    return pred, gt


def confusion(pred, gt, cls: int) -> ConfusionCounts:
    """Count one-vs-rest outcomes for class ``cls`` over aligned label maps."""
    pred, gt = _check_label_maps(pred, gt)
    if cls < 0:
        raise ValueError("class index must be nonnegative")
    p = pred == cls
    g = gt == cls
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        tn=int(np.sum(~p & ~g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
    )


def dice(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    return 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn)


def iou(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fp + c.fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        return 1.0
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        return 1.0
    return c.tn / (c.tn + c.fp)


_OVERLAP_FUNCS = {
    "dice": dice,
    "iou": iou,
    "acc": accuracy,
    "pre": precision,
    "sen": sensitivity,
    "spe": specificity,
}


# ---------------------------------------------------------------------------
# boundary distances

def boundary_points(mask) -> np.ndarray:
    """(row, col) coordinates of foreground pixels on the mask boundary.

    A pixel is boundary when it is foreground and at least one 4-neighbor is
    background, counting positions beyond the image edge as background.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    padded = np.pad(mask, 1)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def _scaled(points, spacing) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"point set must be (n, 2), got {points.shape}")
    return points * np.asarray(spacing, dtype=np.float64)


def directed_distances(from_pts, to_pts, spacing=(1.0, 1.0)) -> np.ndarray:
    """Nearest-neighbor distance from every point of one set into the other."""
    a = _scaled(from_pts, spacing)
    b = _scaled(to_pts, spacing)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySurfaceError("boundary point set is empty")
    dists, _ = cKDTree(b).query(a)
    return dists


def nearest_rank(values: np.ndarray, q: float) -> float:
    """The ceil(q*n)-th smallest value; reproducible with no interpolation."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = int(np.ceil(q * ordered.size))
    return float(ordered[max(rank, 1) - 1])


def hd95(pred_surface, gt_surface, spacing=(1.0, 1.0)) -> float:
    """Max of the two directed nearest-rank 95th-percentile distances."""
    forward = directed_distances(pred_surface, gt_surface, spacing)
    backward = directed_distances(gt_surface, pred_surface, spacing)
    return max(nearest_rank(forward, 0.95), nearest_rank(backward, 0.95))


def hausdorff(pred_surface, gt_surface, spacing=(1.0, 1.0)) -> float:
    """Full symmetric Hausdorff distance (the HD95 upper bound)."""
    forward = directed_distances(pred_surface, gt_surface, spacing)
    backward = directed_distances(gt_surface, pred_surface, spacing)
    return max(float(forward.max()), float(backward.max()))


def asd(pred_surface, gt_surface, spacing=(1.0, 1.0)) -> float:
    """Symmetric average of all directed nearest-neighbor distances."""
    forward = directed_distances(pred_surface, gt_surface, spacing)
    backward = directed_distances(gt_surface, pred_surface, spacing)
    return float((forward.sum() + backward.sum()) / (forward.size + backward.size))


# ---------------------------------------------------------------------------
# histogram

def dice_histogram(values, bins: int = 10):
    """Fixed-width histogram of per-image Dice values over [0, 1]."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("dice values must lie in [0, 1]")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return edges, counts


def histogram_csv(edges, counts) -> str:
    lines = ["bin_left,bin_right,count"]
    for left, right, count in zip(edges[:-1], edges[1:], counts):
        lines.append(f"{left:.6f},{right:.6f},{int(count)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    """Per-foreground-class metrics and their averages over classes.

    ``per_class[c][name]`` is the mean over evaluated pairs; distance
    entries are None when no pair had both surfaces present.  Distance
    averages are reported twice — weighting classes equally
    (``*_by_class``) and pooling all image-class pairs (``*_by_image``) —
    since the two conventions differ and both are in circulation.
    """

    num_classes: int
    num_images: int
    per_class: dict
    mean: dict

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_images": self.num_images,
            "per_class": {str(c): m for c, m in self.per_class.items()},
            "mean": self.mean,
        }

    def to_csv(self) -> str:
        def fmt(value):
            return "" if value is None else f"{value:.6f}"

        lines = [CSV_HEADER]
        for cls in sorted(self.per_class):
            m = self.per_class[cls]
            cells = [f"class_{cls}"]
            cells += [fmt(m[name]) for name in OVERLAP_METRICS]
            cells += [fmt(m[name]) for name in DISTANCE_METRICS]
            lines.append(",".join(cells))
        mean_cells = ["mean"]
        mean_cells += [fmt(self.mean[name]) for name in OVERLAP_METRICS]
        mean_cells += [fmt(self.mean[name + "_by_class"]) for name in DISTANCE_METRICS]
        lines.append(",".join(mean_cells))
        return "\n".join(lines) + "\n"


def image_dice(pred, gt, num_classes: int) -> float:
    """Mean Dice over foreground classes for one prediction/reference pair."""
    scores = [dice(confusion(pred, gt, cls)) for cls in range(1, num_classes)]
    return float(np.mean(scores))


def evaluate_pair(pred, gt, num_classes: int, spacing=(1.0, 1.0)) -> dict:
    """All eight metrics for every foreground class of one pair.

    Distance entries are None when either boundary is empty for that class.
    """
    pred, gt = _check_label_maps(pred, gt)
    if pred.size and max(int(pred.max()), int(gt.max())) >= num_classes:
        raise ValueError(f"labels exceed num_classes={num_classes}")
    out = {}
    for cls in range(1, num_classes):
        counts = confusion(pred, gt, cls)
        row = {name: fn(counts) for name, fn in _OVERLAP_FUNCS.items()}
        pred_surface = boundary_points(pred == cls)
        gt_surface = boundary_points(gt == cls)
        if pred_surface.size and gt_surface.size:
            row["hd95"] = hd95(pred_surface, gt_surface, spacing)
            row["asd"] = asd(pred_surface, gt_surface, spacing)
        else:
            row["hd95"] = None
            row["asd"] = None
        out[cls] = row
    return out


def evaluate_batch(pairs, num_classes: int, spacing=(1.0, 1.0)) -> MetricReport:
    """Aggregate metrics over (pred, gt) pairs into a labeled report."""
    per_class = {
        cls: {name: [] for name in OVERLAP_METRICS + DISTANCE_METRICS}
        for cls in range(1, num_classes)
    }
    num_images = 0
    for pred, gt in pairs:
        num_images += 1
        for cls, row in evaluate_pair(pred, gt, num_classes, spacing).items():
            for name, value in row.items():
                if value is not None:
                    per_class[cls][name].append(value)

    summary = {}
    for cls, rows in per_class.items():
        entry = {}
        for name in OVERLAP_METRICS:
            entry[name] = float(np.mean(rows[name])) if rows[name] else None
        for name in DISTANCE_METRICS:
            entry[name] = float(np.mean(rows[name])) if rows[name] else None
            entry[name + "_count"] = len(rows[name])
        summary[cls] = entry

    mean = {}
    for name in OVERLAP_METRICS:
        values = [m[name] for m in summary.values() if m[name] is not None]
        mean[name] = float(np.mean(values)) if values else None
    for name in DISTANCE_METRICS:
        by_class = [m[name] for m in summary.values() if m[name] is not None]
        mean[name + "_by_class"] = float(np.mean(by_class)) if by_class else None
        pooled = [v for rows in per_class.values() for v in rows[name]]
        mean[name + "_by_image"] = float(np.mean(pooled)) if pooled else None

    return MetricReport(
        num_classes=num_classes,
        num_images=num_images,
        per_class=summary,
        mean=mean,
    )
