"""End-to-end detector: model assembly, targets, loss, training, checkpoints."""

from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .loss import LossBreakdown, detection_loss
from .model import (
    DetectorModel,
    backbone_forward,
    backbone_param_count,
    build_model,
    expected_param_count,
    head_forward,
    head_param_count,
    hrfm_param_count,
    mfia_param_count,
    model_forward,
    neck_conv_param_count,
    neck_forward,
    pgfe_param_count,
    stem_forward,
    stem_param_count,
)
from .targets import (
    Detection,
    TargetMap,
    assign_targets,
    decode_predictions,
    detections_to_array,
    labels_to_gt_array,
    nms,
)
from .train import (
    EVAL_CONF,
    TRACE_COLUMNS,
    DivergenceError,
    TrainResult,
    evaluate,
    sgd_step,
    train_loop,
    write_trace_csv,
)

__all__ = [
    "ModelConfig", "DetectorModel", "build_model", "model_forward",
    "backbone_forward", "head_forward", "stem_forward", "neck_forward",
    "expected_param_count", "stem_param_count", "pgfe_param_count",
    "backbone_param_count", "mfia_param_count", "hrfm_param_count",
    "neck_conv_param_count", "head_param_count",
    "Detection", "TargetMap", "assign_targets", "decode_predictions",
    "nms", "detections_to_array", "labels_to_gt_array",
    "LossBreakdown", "detection_loss",
    "TrainResult", "DivergenceError", "train_loop", "evaluate", "sgd_step",
    "write_trace_csv", "TRACE_COLUMNS", "EVAL_CONF",
    "checkpoint_bytes", "save_checkpoint", "load_checkpoint",
]
