"""Training loop: momentum SGD, cosine schedule, per-epoch metric trace."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .._rng import STREAM_TRAIN_ORDER, stream
from ..evalkit import EvalReport, map_suite
from ..tensorops import NumericError, Tensor, no_grad
from .config import ModelConfig
from .loss import detection_loss
from .model import DetectorModel, build_model, model_forward
from .targets import assign_targets, decode_predictions, detections_to_array, labels_to_gt_array, nms

TRACE_COLUMNS = ("epoch", "box_loss", "cls_loss", "norm_loss",
                 "precision", "recall", "mAP50", "mAP50_95")
# decode generously during evaluation; ranking handles the rest
EVAL_CONF = 0.05


class DivergenceError(RuntimeError):
    """Loss blew past 1000x its initial value; carries the trace so far."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainResult:
    model: DetectorModel
    trace: list[dict] = field(default_factory=list)
    steps: int = 0
    final_loss: float = float("nan")
    stopped_early: bool = False


def _check_dataset(dataset, config: ModelConfig):
    if not dataset:
        raise ValueError("training dataset is empty")
    size = config.input_size
    for i, (img, _) in enumerate(dataset):
        if img.shape != (3, size, size):
            raise ValueError(f"image {i} has shape {img.shape}, expected (3, {size}, {size})")


def sgd_step(params: list[Tensor], velocities: list[np.ndarray], lr: float,
             momentum: float = 0.937, clip_norm: float = 10.0) -> float:
    """One momentum-SGD update with global-norm gradient clipping.

    Returns the pre-clip global gradient norm.
    """
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(sq)
    factor = clip_norm / norm if norm > clip_norm else 1.0
    for p, v in zip(params, velocities):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad * factor
        p.data -= (lr * v).astype(p.dtype, copy=False)
    return norm


def evaluate(model: DetectorModel, dataset, batch_size: int = 4,
             decode_conf: float = EVAL_CONF) -> EvalReport:
    """mAP/PR suite over a dataset of (image, labels) pairs."""
    cfg = model.config
    dtype = next(iter(model.named_params()))[1].dtype
    dets_by_image, gts_by_image = [], []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            batch = Tensor(np.stack([img for img, _ in chunk]).astype(dtype, copy=False),
                           check=False)
            raw = model_forward(model, batch).data
            for (_, labels), one in zip(chunk, raw):
                dets = nms(decode_predictions(one, decode_conf, cfg.stride), cfg.nms_iou)
                dets_by_image.append(detections_to_array(dets))
                gts_by_image.append(labels_to_gt_array(labels, cfg.input_size))
    return map_suite(dets_by_image, gts_by_image, range(cfg.num_classes),
                     conf_threshold=cfg.conf_threshold)


def train_loop(dataset, config: ModelConfig, epochs: int, seed: int, *,
               batch_size: int = 2, lr: float = 0.01, momentum: float = 0.937,
               clip_norm: float = 10.0, val_dataset=None, eval_every: int = 1,
               target_map50: float | None = None, model: DetectorModel | None = None,
               dtype=np.float32) -> TrainResult:
    """SGD with momentum 0.937, per-step cosine decay of `lr` to zero.

    `dataset` is a sequence of (image [3,H,W] in [0,1], labels [K,5]) pairs.
    Metrics in the trace come from `val_dataset` when given, else from the
    training set.  Deterministic for a fixed seed.  Raises DivergenceError
    if the loss exceeds 1000x its initial value.
    """
    _check_dataset(dataset, config)
    if model is None:
        model = build_model(config, seed, dtype)
    named = list(model.named_params())
    params = [t for _, t in named]
    velocities = [np.zeros_like(t.data) for t in params]

    targets = [assign_targets(labels, config.grid_size, config.stride, config.num_classes)
               for _, labels in dataset]
    images = [np.asarray(img, dtype=dtype) for img, _ in dataset]
    eval_set = val_dataset if val_dataset is not None else dataset

    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total_steps = epochs * steps_per_epoch
    result = TrainResult(model)
    initial_total = None
    epoch0_mean = None

    for epoch in range(epochs):
        order = stream(seed, STREAM_TRAIN_ORDER, substream=epoch).permutation(len(dataset))
        sums = np.zeros(3)  # box, cls, total
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = Tensor(np.stack([images[i] for i in idx]), check=False)
            try:
                # overflow on an exploding step is reported by the finite
                # checks below, not as a numpy warning
                with np.errstate(over="ignore", invalid="ignore"):
                    raw = model_forward(model, batch)
                    loss, breakdown = detection_loss(raw, [targets[i] for i in idx])
            except NumericError as e:
                # an exploded step overflows activations before the loss
                # threshold can fire; same failure mode, same abort
                raise DivergenceError(
                    f"non-finite forward at step {result.steps}: {e}", result.trace) from e

            if initial_total is None:
                initial_total = max(breakdown.total, 1e-12)
            if breakdown.total > 1e3 * initial_total:
                raise DivergenceError(
                    f"loss {breakdown.total:.4g} exceeds 1000x initial "
                    f"{initial_total:.4g} at step {result.steps}", result.trace)

            for p in params:
                p.grad = None
            loss.backward()
            lr_t = 0.5 * lr * (1.0 + math.cos(math.pi * result.steps / total_steps))
            sgd_step(params, velocities, lr_t, momentum, clip_norm)
            result.steps += 1
            result.final_loss = breakdown.total
            sums += (breakdown.box_loss, breakdown.cls_loss, breakdown.total)

        means = sums / steps_per_epoch
        if epoch0_mean is None:
            epoch0_mean = max(means[2], 1e-12)
        row = {"epoch": epoch, "box_loss": means[0], "cls_loss": means[1],
               "norm_loss": means[2] / epoch0_mean,
               "precision": "", "recall": "", "mAP50": "", "mAP50_95": ""}
        if epoch % eval_every == 0 or epoch == epochs - 1:
            try:
                report = evaluate(model, eval_set, batch_size=max(batch_size, 4))
            except NumericError as e:
                raise DivergenceError(
                    f"non-finite evaluation after step {result.steps}: {e}", result.trace) from e
            row.update(precision=report.precision, recall=report.recall,
                       mAP50=report.map50, mAP50_95=report.map50_95)
            if target_map50 is not None and report.map50 >= target_map50:
                result.trace.append(row)
                result.stopped_early = True
                return result
        result.trace.append(row)
    return result


def write_trace_csv(path, trace: list[dict]) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    for row in trace:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in TRACE_COLUMNS))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
