"""Detection metrics: greedy IoU matching, precision/recall/F1, per-class
average precision with 101-point interpolation, and the mAP50 / mAP50:95
suite over IoU thresholds 0.50..0.95 step 0.05.

Inputs are plain numpy arrays: detections as rows of
(class_id, confidence, x1, y1, x2, y2), ground truths as rows of
(class_id, x1, y1, x2, y2).  Multi-image corpora are lists of such arrays,
one per image.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
REPORT_CONF = 0.25  # operating point for the single P/R/F1 numbers
REPORT_IOU = 0.5

_DET_COLS = 6
_GT_COLS = 5


def iou(a, b) -> float:
    """Intersection-over-union of two xyxy boxes; degenerate boxes give 0."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a == 0.0 or area_b == 0.0:
        warnings.warn("iou of a zero-area box is defined as 0", stacklevel=2)
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def _as_dets(dets) -> np.ndarray:
    arr = np.asarray(dets, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, _DET_COLS)
    if arr.ndim != 2 or arr.shape[1] != _DET_COLS:
        raise ValueError(f"detections must be [K,{_DET_COLS}] rows "
                         f"(class, conf, x1, y1, x2, y2), got shape {arr.shape}")
    return arr


def _as_gts(gts) -> np.ndarray:
    arr = np.asarray(gts, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, _GT_COLS)
    if arr.ndim != 2 or arr.shape[1] != _GT_COLS:
        raise ValueError(f"ground truths must be [M,{_GT_COLS}] rows "
                         f"(class, x1, y1, x2, y2), got shape {arr.shape}")
    return arr


@dataclass
class MatchOutcome:
    """Greedy matching result for one image and one class slice."""

    det_is_tp: np.ndarray  # bool, input order
    det_matched_gt: np.ndarray  # gt row index or -1, input order
    det_iou: np.ndarray  # matched IoU or 0, input order
    gt_matched: np.ndarray  # bool per gt row
    order: np.ndarray  # detection ranking used (indices, desc confidence)

    @property
    def tp(self) -> int:
        return int(self.det_is_tp.sum())

    @property
    def fp(self) -> int:
        return int(len(self.det_is_tp) - self.det_is_tp.sum())

    @property
    def fn(self) -> int:
        return int(len(self.gt_matched) - self.gt_matched.sum())


def match_detections(dets, gts, iou_thresh: float, class_id: int | None = None) -> MatchOutcome:
    """Rank detections by confidence and greedily claim best unmatched GTs.

    Ties in confidence keep input order; ties in IoU go to the lower GT row.
    """
    d = _as_dets(dets)
    g = _as_gts(gts)
    if class_id is not None:
        d = d[d[:, 0] == class_id]
        g = g[g[:, 0] == class_id]
    order = np.argsort(-d[:, 1], kind="stable")
    is_tp = np.zeros(len(d), dtype=bool)
    matched_gt = np.full(len(d), -1, dtype=np.int64)
    det_iou = np.zeros(len(d), dtype=np.float64)
    gt_taken = np.zeros(len(g), dtype=bool)
    for di in order:
        best_iou, best_gt = 0.0, -1
        for gi in range(len(g)):
            if gt_taken[gi]:
                continue
            v = iou(d[di, 2:6], g[gi, 1:5])
            if v > best_iou:  # strict: IoU ties keep the earlier (lower) gt
                best_iou, best_gt = v, gi
        if best_gt >= 0 and best_iou >= iou_thresh:
            is_tp[di] = True
            matched_gt[di] = best_gt
            det_iou[di] = best_iou
            gt_taken[best_gt] = True
    return MatchOutcome(is_tp, matched_gt, det_iou, gt_taken, order)


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """P, R, F1 with the 0/0 -> 0 convention for each ratio."""
    if min(tp, fp, fn) < 0:
        raise ValueError(f"counts must be non-negative, got {(tp, fp, fn)}")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    # 2PR/(P+R) simplified to counts: one division, so TP=8 FP=FN=2
    # lands exactly on 0.8 instead of an ulp off.
    f1 = 2 * tp / (2 * tp + fp + fn) if p + r else 0.0
    return p, r, f1


def _ranked_tp_flags(dets_by_image, gts_by_image, iou_thresh: float):
    """Global confidence-ranked TP/FP flags plus the corpus GT count.

    Matching is per image; the global ranking orders by descending
    confidence, then image index, then within-image input order.
    """
    records = []  # (-conf, img, det_idx, is_tp)
    total_gt = 0
    for img, (d, g) in enumerate(zip(dets_by_image, gts_by_image)):
        outcome = match_detections(d, g, iou_thresh)
        total_gt += len(outcome.gt_matched)
        conf = _as_dets(d)[:, 1] if len(outcome.det_is_tp) else np.zeros(0)
        for di in range(len(outcome.det_is_tp)):
            records.append((-float(conf[di]), img, di, bool(outcome.det_is_tp[di])))
    records.sort(key=lambda r: r[:3])
    flags = np.array([r[3] for r in records], dtype=bool)
    return flags, total_gt


def _listify(per_image) -> list:
    """Normalize to a per-image list: a bare 2-D array (or list of row
    tuples) is one image; a sequence of 2-D arrays is a corpus."""
    if isinstance(per_image, np.ndarray):
        return [per_image]
    items = list(per_image)
    if items and np.ndim(items[0]) == 2:
        return items
    return [np.asarray(items, dtype=np.float64)]


def average_precision(dets_by_image, gts_by_image, iou_thresh: float) -> float | None:
    """101-point interpolated AP for one class.

    Accepts single-image arrays or per-image lists.  Returns None when the
    class has neither ground truths nor detections (absent class).
    """
    dets = _listify(dets_by_image)
    gts = _listify(gts_by_image)
    if len(dets) != len(gts):
        raise ValueError(f"image count mismatch: {len(dets)} det lists vs {len(gts)} gt lists")
    flags, total_gt = _ranked_tp_flags(dets, gts, iou_thresh)
    if total_gt == 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    cum_tp = np.cumsum(flags).astype(np.int64)
    cum_fp = np.cumsum(~flags).astype(np.int64)
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone envelope from the right, then sample the recall grid
    # {k/100}; "recall >= k/100" is evaluated as 100*tp >= k*total_gt so
    # grid membership never hinges on float rounding
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    scaled_recall = 100 * cum_tp
    ap = 0.0
    for k in range(101):
        idx = np.searchsorted(scaled_recall, k * total_gt, side="left")
        ap += envelope[idx] if idx < len(envelope) else 0.0
    return ap / 101.0


@dataclass
class EvalReport:
    class_ids: list[int]
    thresholds: tuple[float, ...]
    ap: dict[int, list[float | None]]  # per class, aligned with thresholds
    map50: float
    map50_95: float
    precision: float
    recall: float
    f1: float
    conf_threshold: float
    match_iou: float
    counts: tuple[int, int, int]  # TP, FP, FN at the operating point
    num_images: int
    total_gts: int
    per_threshold_means: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "class_ids": list(self.class_ids),
            "iou_thresholds": list(self.thresholds),
            "ap": {str(c): [None if v is None else v for v in row]
                   for c, row in self.ap.items()},
            "map50": self.map50,
            "map50_95": self.map50_95,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "conf_threshold": self.conf_threshold,
            "match_iou": self.match_iou,
            "counts": {"tp": self.counts[0], "fp": self.counts[1], "fn": self.counts[2]},
            "num_images": self.num_images,
            "total_gts": self.total_gts,
            "per_threshold_means": list(self.per_threshold_means),
        }


def map_suite(dets_by_image, gts_by_image, classes,
              conf_threshold: float = REPORT_CONF, match_iou: float = REPORT_IOU) -> EvalReport:
    """Full metric suite over a corpus.

    mAP50 averages AP@0.5 over present classes (those with any GT or any
    detection); mAP50:95 is the mean over the 10 thresholds of the
    per-threshold class means.  P/R/F1 use global TP/FP/FN counts at
    `conf_threshold` and `match_iou`.
    """
    dets = [_as_dets(d) for d in dets_by_image]
    gts = [_as_gts(g) for g in gts_by_image]
    if len(dets) != len(gts):
        raise ValueError(f"image count mismatch: {len(dets)} det lists vs {len(gts)} gt lists")
    total_gts = sum(len(g) for g in gts)
    if total_gts == 0:
        raise ValueError("metric suite needs at least one ground-truth instance")
    classes = [int(c) for c in classes]

    ap: dict[int, list[float | None]] = {}
    for c in classes:
        cd = [d[d[:, 0] == c] for d in dets]
        cg = [g[g[:, 0] == c] for g in gts]
        ap[c] = [average_precision(cd, cg, t) for t in IOU_THRESHOLDS]

    present = [c for c in classes if ap[c][0] is not None]
    per_threshold_means = []
    for k in range(len(IOU_THRESHOLDS)):
        vals = [ap[c][k] for c in present]
        per_threshold_means.append(float(np.mean(vals)) if vals else 0.0)
    map50 = per_threshold_means[0]
    map50_95 = float(np.mean(per_threshold_means)) if per_threshold_means else 0.0

    tp = fp = fn = 0
    for d, g in zip(dets, gts):
        kept = d[d[:, 1] >= conf_threshold]
        for c in classes:
            outcome = match_detections(kept, g, match_iou, class_id=c)
            tp += outcome.tp
            fp += outcome.fp
            fn += outcome.fn
    p, r, f1 = precision_recall_f1(tp, fp, fn)

    return EvalReport(
        class_ids=classes, thresholds=IOU_THRESHOLDS, ap=ap,
        map50=map50, map50_95=map50_95,
        precision=p, recall=r, f1=f1,
        conf_threshold=conf_threshold, match_iou=match_iou,
        counts=(tp, fp, fn), num_images=len(dets), total_gts=total_gts,
        per_threshold_means=per_threshold_means,
    )


# -- file formats ----------------------------------------------------------


def format_predictions(dets) -> str:
    """One line per detection: class_id confidence x1 y1 x2 y2."""
    lines = []
    for row in _as_dets(dets):
        cid = int(row[0])
        vals = " ".join(repr(float(v)) for v in row[1:])
        lines.append(f"{cid} {vals}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_predictions(text: str) -> np.ndarray:
    rows = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != _DET_COLS:
            raise ValueError(f"line {ln}: expected {_DET_COLS} fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), _DET_COLS)


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def format_report_table(report: EvalReport) -> str:
    """Aligned-column text table: one row per class plus the aggregate row."""
    header = f"{'class':>8} {'AP50':>8} {'AP50:95':>8}"
    lines = [header, "-" * len(header)]
    for c in report.class_ids:
        row = report.ap[c]
        if row[0] is None:
            lines.append(f"{c:>8} {'absent':>8} {'absent':>8}")
        else:
            mean = float(np.mean([v for v in row]))
            lines.append(f"{c:>8} {row[0]:>8.4f} {mean:>8.4f}")
    lines.append("-" * len(header))
    lines.append(f"{'all':>8} {report.map50:>8.4f} {report.map50_95:>8.4f}")
    lines.append("")
    lines.append(f"P={report.precision:.4f} R={report.recall:.4f} F1={report.f1:.4f} "
                 f"@conf>={report.conf_threshold} iou>={report.match_iou} "
                 f"(TP={report.counts[0]} FP={report.counts[1]} FN={report.counts[2]})")
    return "\n".join(lines) + "\n"
