"""Target assignment, prediction decoding, and suppression.

Boxes live in two coordinate systems: labels are normalized (cx, cy, w, h)
in [0,1]; detections and target distances are absolute pixels.  A grid cell
is positive for the GT whose center it contains, and its regression target
is the (l, t, r, b) distance from the *cell center* to the GT edges in
stride units — so a perfect prediction decodes back to the exact box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..evalkit import iou as box_iou
from ..tensorops import ShapeError


@dataclass(frozen=True)
class Detection:
    class_id: int
    confidence: float
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 absolute pixels

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0,1], got {self.confidence}")


@dataclass
class TargetMap:
    """Per-cell supervision for one image on the S x S head grid."""

    cls: np.ndarray  # [C, S, S] one-hot at positive cells
    box: np.ndarray  # [4, S, S] ltrb in stride units, defined at positives
    pos_mask: np.ndarray  # [S, S] bool
    skipped: int  # degenerate GTs dropped

    @property
    def num_positives(self) -> int:
        return int(self.pos_mask.sum())


def _as_labels(labels) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 5)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ShapeError(f"labels must be [K,5] (class, cx, cy, w, h), got {arr.shape}")
    return arr


def assign_targets(labels, grid_size: int, stride: int, num_classes: int) -> TargetMap:
    """Normalized labels -> per-cell target map.

    The cell containing each GT center becomes positive; when two GTs land
    in one cell the smaller-area one wins.  GTs under 1 px wide or tall are
    skipped and counted.
    """
    labels = _as_labels(labels)
    s, size = grid_size, grid_size * stride
    cls = np.zeros((num_classes, s, s))
    box = np.zeros((4, s, s))
    area = np.full((s, s), np.inf)  # pixel area of the owning GT, for ties
    skipped = 0
    for row in labels:
        cid = int(row[0])
        if not 0 <= cid < num_classes:
            raise ValueError(f"class id {cid} outside [0, {num_classes})")
        cx, cy, w, h = row[1] * size, row[2] * size, row[3] * size, row[4] * size
        if w <= 1.0 or h <= 1.0:
            skipped += 1
            continue
        gx = min(max(int(cx // stride), 0), s - 1)
        gy = min(max(int(cy // stride), 0), s - 1)
        if w * h >= area[gy, gx]:
            continue
        area[gy, gx] = w * h
        ccx, ccy = (gx + 0.5) * stride, (gy + 0.5) * stride
        cls[:, gy, gx] = 0.0
        cls[cid, gy, gx] = 1.0
        box[:, gy, gx] = [
            (ccx - (cx - w / 2)) / stride,
            (ccy - (cy - h / 2)) / stride,
            ((cx + w / 2) - ccx) / stride,
            ((cy + h / 2) - ccy) / stride,
        ]
    return TargetMap(cls, box, np.isfinite(area), skipped)


def decode_predictions(raw: np.ndarray, conf_threshold: float, stride: int) -> list[Detection]:
    """Head map [4+C, S, S] -> detections with confidence >= threshold.

    Confidence is the max class sigmoid; boxes are cell center +- ltrb
    times stride, clipped to the image.  Cells are visited row-major.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] < 5:
        raise ShapeError(f"expected [4+C, S, S] raw map, got {raw.shape}")
    _, sh, sw = raw.shape
    logits = raw[4:]
    with np.errstate(over="ignore"):
        scores = 1.0 / (1.0 + np.exp(-logits))
    conf = scores.max(axis=0)
    cids = scores.argmax(axis=0)
    out = []
    for gy, gx in np.argwhere(conf >= conf_threshold):
        L, t, r, b = (float(v) * stride for v in raw[:4, gy, gx])
        ccx, ccy = (float(gx) + 0.5) * stride, (float(gy) + 0.5) * stride
        x1 = min(max(ccx - L, 0.0), float(sw * stride))
        y1 = min(max(ccy - t, 0.0), float(sh * stride))
        x2 = min(max(ccx + r, 0.0), float(sw * stride))
        y2 = min(max(ccy + b, 0.0), float(sh * stride))
        if x1 < x2 and y1 < y2:  # softplus outputs can round to 0 in float32
            out.append(Detection(int(cids[gy, gx]), float(conf[gy, gx]), (x1, y1, x2, y2)))
    return out


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-class suppression at IoU > iou_thresh.

    Candidates are ranked by descending confidence with ties broken by
    input position; kept detections come back in that rank order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    alive = [True] * len(dets)
    kept = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        kept.append(dets[i])
        for j in order[pos + 1:]:
            if alive[j] and dets[j].class_id == dets[i].class_id \
                    and box_iou(dets[i].box, dets[j].box) > iou_thresh:
                alive[j] = False
    return kept


def detections_to_array(dets: list[Detection]) -> np.ndarray:
    """Rows of (class, confidence, x1, y1, x2, y2) for the metric suite."""
    if not dets:
        return np.zeros((0, 6))
    return np.array([[d.class_id, d.confidence, *d.box] for d in dets], dtype=np.float64)


def labels_to_gt_array(labels, image_size: int) -> np.ndarray:
    """Normalized labels -> (class, x1, y1, x2, y2) absolute-pixel GT rows."""
    labels = _as_labels(labels)
    if len(labels) == 0:
        return np.zeros((0, 5))
    cx, cy = labels[:, 1] * image_size, labels[:, 2] * image_size
    w, h = labels[:, 3] * image_size, labels[:, 4] * image_size
    return np.column_stack([labels[:, 0], cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
