"""Per-voxel occupancy classification and IoU-based evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import LinearLayer, linear_forward, linear_backward

# Benchmark-style class table and its dynamic-object subset; synthetic
# scenes use generic names instead, with a configurable dynamic subset.
NUSCENES_CLASS_NAMES = (
    "others", "barrier", "bicycle", "bus", "car", "construction vehicle",
    "motorcycle", "pedestrian", "traffic cone", "trailer", "truck",
    "drivable surface", "other flat", "sidewalk", "terrain", "manmade",
    "vegetation",
)
DYNAMIC_CLASS_NAMES = (
    "bicycle", "bus", "car", "construction vehicle", "motorcycle",
    "pedestrian", "trailer", "truck",
)


def default_dynamic_ids(class_names) -> tuple[int, ...]:
    """Ids of the dynamic-object subset within a class-name table."""
    return tuple(i for i, n in enumerate(class_names) if n in DYNAMIC_CLASS_NAMES)


@dataclass
class OccupancyVolume:
    """Z x H x W voxel labels over K semantic classes plus a free class."""

    labels: np.ndarray
    class_names: tuple[str, ...]
    free_id: int
    dynamic_class_ids: tuple[int, ...] = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3-d (Z,H,W), got {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            self.labels = self.labels.astype(np.int32)
        k = len(self.class_names)
        if self.free_id != k:
            raise ValueError(f"free_id must equal the class count {k}")
        valid = (self.labels >= 0) & (self.labels <= k)
        if not valid.all():
            raise ValueError("labels contain ids outside 0..K (free)")
        if any(i < 0 or i >= k for i in self.dynamic_class_ids):
            raise ValueError("dynamic_class_ids must be semantic class ids")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class MetricsReport:
    """Per-class IoU plus means over all evaluated classes and the dynamic
    subset; classes with zero union are excluded from the means."""

    per_class_iou: dict[int, float]
    miou: float
    miou_dynamic: float
    intersections: dict[int, int] = field(default_factory=dict)
    unions: dict[int, int] = field(default_factory=dict)
    class_names: tuple[str, ...] = ()

    def to_kv(self) -> dict[str, str]:
        out = {"miou": f"{self.miou:.6f}", "miou_dynamic": f"{self.miou_dynamic:.6f}"}
        for cid in sorted(self.per_class_iou):
            out[f"iou.{cid}"] = f"{self.per_class_iou[cid]:.6f}"
            out[f"intersection.{cid}"] = str(self.intersections.get(cid, 0))
            out[f"union.{cid}"] = str(self.unions.get(cid, 0))
        return out

    def table(self) -> str:
        """Aligned-column text; IoU values in benchmark-style percent."""
        lines = [f"{'class':<24}{'IoU':>8}"]
        for cid in sorted(self.per_class_iou):
            name = (self.class_names[cid] if cid < len(self.class_names)
                    else f"class{cid}")
            lines.append(f"{name:<24}{100 * self.per_class_iou[cid]:>8.2f}")
        lines.append(f"{'mIoU':<24}{100 * self.miou:>8.2f}")
        lines.append(f"{'mIoU_dynamic':<24}{100 * self.miou_dynamic:>8.2f}")
        return "\n".join(lines)


def report_from_kv(kv: dict[str, str]) -> MetricsReport:
    per_class = {}
    inters = {}
    unions = {}
    for key, value in kv.items():
        if key.startswith("iou."):
            per_class[int(key[4:])] = float(value)
        elif key.startswith("intersection."):
            inters[int(key[13:])] = int(value)
        elif key.startswith("union."):
            unions[int(key[6:])] = int(value)
    return MetricsReport(per_class, float(kv["miou"]), float(kv["miou_dynamic"]),
                         inters, unions)


def occupancy_head(voxel_feats: np.ndarray, head: LinearLayer) -> np.ndarray:
    """Shared per-voxel linear map from C channels to K+1 class logits."""
    feats = np.asarray(voxel_feats)
    if feats.ndim != 4 or feats.shape[0] != head.in_dim:
        raise ValueError(
            f"voxel features {feats.shape} incompatible with head in_dim {head.in_dim}"
        )
    c = feats.shape[0]
    rows = feats.reshape(c, -1).T
    logits = linear_forward(head, rows)
    return logits.T.reshape((head.out_dim,) + feats.shape[1:])


def occupancy_head_backward(voxel_feats: np.ndarray, head: LinearLayer,
                            upstream: np.ndarray) -> np.ndarray:
    """Accumulate head gradients; return d(loss)/d(voxel features)."""
    feats = np.asarray(voxel_feats)
    c = feats.shape[0]
    rows = feats.reshape(c, -1).T
    up_rows = upstream.reshape(head.out_dim, -1).T
    d_rows = linear_backward(head, rows, up_rows)
    return d_rows.T.reshape(feats.shape)


def predict(logits: np.ndarray, class_names: tuple[str, ...],
            dynamic_class_ids: tuple[int, ...] = ()) -> OccupancyVolume:
    """Per-voxel argmax; ties break toward the smaller class id."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    labels = np.argmax(logits, axis=0).astype(np.int32)
    return OccupancyVolume(labels, class_names, len(class_names), dynamic_class_ids)


def iou_counts(pred: OccupancyVolume, gt: OccupancyVolume, classes):
    """Raw per-class intersection and union voxel counts."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(
            f"volume dims differ: {pred.labels.shape} vs {gt.labels.shape}"
        )
    inters = {}
    unions = {}
    for cid in sorted(classes):
        p = pred.labels == cid
        g = gt.labels == cid
        inters[cid] = int(np.count_nonzero(p & g))
        unions[cid] = int(np.count_nonzero(p | g))
    return inters, unions


def report_from_counts(inters: dict[int, int], unions: dict[int, int],
                       dynamic_class_ids, class_names=()) -> MetricsReport:
    per_class = {}
    for cid, union in unions.items():
        if union > 0:
            per_class[cid] = inters[cid] / union
    evaluated = sorted(per_class)
    miou = float(np.mean([per_class[c] for c in evaluated])) if evaluated else float("nan")
    dyn = [per_class[c] for c in evaluated if c in set(dynamic_class_ids)]
    miou_dynamic = float(np.mean(dyn)) if dyn else float("nan")
    return MetricsReport(per_class, miou, miou_dynamic, inters, unions,
                         tuple(class_names))


def miou(pred: OccupancyVolume, gt: OccupancyVolume,
         classes=None) -> MetricsReport:
    """Dataset-convention IoU per class and the means over evaluated classes.

    By default the K semantic classes are evaluated and the free class is
    excluded. Classes absent from both volumes drop out of the means.
    """
    if classes is None:
        classes = range(gt.num_classes)
    inters, unions = iou_counts(pred, gt, classes)
    return report_from_counts(inters, unions, gt.dynamic_class_ids, gt.class_names)


def relative_gain(baseline_miou: float, fused_miou: float) -> tuple[float, float]:
    """Absolute and percent mIoU delta of a fused model over its baseline."""
    if not baseline_miou > 0:
        raise ValueError("baseline mIoU must be positive")
    delta = fused_miou - baseline_miou
    return delta, 100.0 * delta / baseline_miou
