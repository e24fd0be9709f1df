"""Detection loss: BCE over every cell/class plus IoU loss at positive cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensorops import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    channel_slice,
    div,
    minimum,
    mul,
    relu,
    scale,
    shift,
    softplus,
    sub,
    sum_all,
    take_cells,
)
from .targets import TargetMap


@dataclass(frozen=True)
class LossBreakdown:
    box_loss: float
    cls_loss: float
    total: float  # cls + 2 * box
    num_positives: int  # the max(1, P) normalizer divides every term

    def __post_init__(self):
        if not (np.isfinite(self.total) and self.box_loss >= 0.0 and self.cls_loss >= 0.0):
            raise NumericError(f"ill-formed loss breakdown: {self}")


def _pairwise_iou(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable IoU of ltrb distance pairs measured from a shared point.

    `pred` is [P,4] non-negative; `gt` rows may have a negative arm when the
    cell center sits outside a tiny GT box, hence the relu on the overlaps.
    """
    g = Tensor(np.asarray(gt, dtype=pred.dtype), check=False)
    lp, tp, rp, bp = (channel_slice(pred, i, i + 1) for i in range(4))
    lg, tg, rg, bg = (channel_slice(g, i, i + 1) for i in range(4))
    iw = relu(add(minimum(lp, lg), minimum(rp, rg)))
    ih = relu(add(minimum(tp, tg), minimum(bp, bg)))
    inter = mul(iw, ih)
    area_p = mul(add(lp, rp), add(tp, bp))
    area_g = mul(add(lg, rg), add(tg, bg))  # positive: degenerate GTs never assigned
    union = sub(add(area_p, area_g), inter)
    return div(inter, union)


def detection_loss(raw: Tensor, targets: list[TargetMap]) -> tuple[Tensor, LossBreakdown]:
    """Head output [N,4+C,S,S] + per-image targets -> (graph total, breakdown).

    cls: binary cross-entropy summed over all cells and classes;
    box: 1 - IoU summed over positive cells; both divided by max(1, P);
    total = cls + 2 * box.
    """
    n, k, sh, sw = raw.shape
    c = k - 4
    if len(targets) != n:
        raise ShapeError(f"{n} images but {len(targets)} target maps")
    for t in targets:
        if t.cls.shape != (c, sh, sw):
            raise ShapeError(f"target map {t.cls.shape} does not match raw {raw.shape}")

    cls_t = np.stack([t.cls for t in targets]).astype(raw.dtype)
    n_idx, y_idx, x_idx, gt_ltrb = [], [], [], []
    for i, t in enumerate(targets):
        ys, xs = np.nonzero(t.pos_mask)
        n_idx.extend([i] * len(ys))
        y_idx.extend(ys)
        x_idx.extend(xs)
        gt_ltrb.extend(t.box[:, y, x] for y, x in zip(ys, xs))
    p = len(n_idx)
    norm = 1.0 / max(1, p)

    try:
        z = channel_slice(raw, 4, 4 + c)
        bce = sub(sum_all(softplus(z)), sum_all(mul(z, Tensor(cls_t, check=False))))
        cls_loss = scale(bce, norm)
        if p:
            pred = take_cells(channel_slice(raw, 0, 4),
                              np.array(n_idx), np.array(y_idx), np.array(x_idx))
            # relu guards against IoU landing an ulp above 1 when pred == gt
            one_minus_iou = relu(shift(scale(_pairwise_iou(pred, np.vstack(gt_ltrb)), -1.0), 1.0))
            box_loss = scale(sum_all(one_minus_iou), norm)
        else:
            box_loss = Tensor(np.asarray(0.0, dtype=raw.dtype))
        total = add(cls_loss, scale(box_loss, 2.0))
        breakdown = LossBreakdown(box_loss.item(), cls_loss.item(), total.item(), p)
    except NumericError as e:
        raise NumericError(
            f"non-finite detection loss (batch of {n} at {sh}x{sw}, {p} positives): {e}"
        ) from e
    return total, breakdown
