"""Model assembly: stem, backbone pyramid, fusion neck, anchor-free head.

Toggle handling keeps the head input shape fixed across configurations:
the enhancement front end falls back to a plain stem conv, the fusion neck
to a 1x1 conv on the finest pyramid level, and the neck attention to a
parameter-free concat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._init import conv_param_items, he_conv
from .._rng import STREAM_MODEL_INIT, stream
from ..hrfm import HrfmParams, PyramidFeatures, hrfm_forward, make_hrfm_params
from ..pgfe import PgfeParams, make_pgfe_params, pgfe_forward
from ..tensorops import (
    ConvSpec,
    ShapeError,
    Tensor,
    channel_slice,
    concat_channels,
    conv2d,
    relu,
    softplus,
)
from .config import ModelConfig


@dataclass
class DetectorModel:
    config: ModelConfig
    stem: ConvSpec | None  # plain 3 -> stem_channels conv, used when pgfe is off
    pgfe: PgfeParams | None
    backbone: list[ConvSpec]  # five 3x3 stride-2 convs: strides 4, 8, 16, 32
    hrfm: HrfmParams | None
    neck_conv: ConvSpec | None  # 1x1 p1 -> fused_channels, used when hrfm is off
    head: list[ConvSpec]  # 3x3, 3x3, then 1x1 to 4 + num_classes

    def __post_init__(self):
        cfg = self.config
        if (self.pgfe is None) == (self.stem is None):
            raise ShapeError("exactly one of stem/pgfe must be present")
        if (self.hrfm is None) == (self.neck_conv is None):
            raise ShapeError("exactly one of hrfm/neck_conv must be present")
        if len(self.backbone) != 5 or len(self.head) != 3:
            raise ShapeError("backbone needs 5 convs and head needs 3")
        if self.head[2].out_channels != 4 + cfg.num_classes:
            raise ShapeError(
                f"head output must have {4 + cfg.num_classes} channels, "
                f"got {self.head[2].out_channels}"
            )

    def named_params(self):
        """Deterministically ordered (name, tensor) pairs."""
        if self.pgfe is not None:
            yield from self.pgfe.param_items("pgfe")
        else:
            for name, t in conv_param_items(self.stem):
                yield f"stem.{name}", t
        for i, spec in enumerate(self.backbone, start=1):
            for name, t in conv_param_items(spec):
                yield f"backbone.conv{i}.{name}", t
        if self.hrfm is not None:
            yield from self.hrfm.param_items("hrfm")
        else:
            for name, t in conv_param_items(self.neck_conv):
                yield f"neck.{name}", t
        for i, spec in enumerate(self.head, start=1):
            for name, t in conv_param_items(spec):
                yield f"head.conv{i}.{name}", t

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_params())


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DetectorModel:
    """Instantiate all parameter bundles from the model-init random stream."""
    rng = stream(seed, STREAM_MODEL_INIT)
    c, w = config.stem_channels, config.backbone_widths

    stem = pgfe = None
    if config.enable_pgfe:
        pgfe = make_pgfe_params(
            rng, channels=c, stages=config.pgfe_stages, blocks=config.pgfe_blocks,
            split=c // 2, dtype=dtype,
        )
    else:
        stem = he_conv(rng, 3, c, 3, dtype=dtype)

    backbone = [
        he_conv(rng, c, w[0], 3, stride=2, dtype=dtype),
        he_conv(rng, w[0], w[0], 3, stride=2, dtype=dtype),
        he_conv(rng, w[0], w[1], 3, stride=2, dtype=dtype),
        he_conv(rng, w[1], w[2], 3, stride=2, dtype=dtype),
        he_conv(rng, w[2], w[3], 3, stride=2, dtype=dtype),
    ]

    hrfm = neck_conv = None
    if config.enable_hrfm:
        hrfm = make_hrfm_params(rng, w, config.hrfm_width, config.attention_ratio,
                                with_attention=config.enable_mfia, dtype=dtype)
    else:
        neck_conv = he_conv(rng, w[0], config.fused_channels, 1, padding=0, dtype=dtype)

    head = [
        he_conv(rng, config.fused_channels, config.head_width, 3, dtype=dtype),
        he_conv(rng, config.head_width, config.head_width, 3, dtype=dtype),
        he_conv(rng, config.head_width, 4 + config.num_classes, 1, padding=0, dtype=dtype),
    ]
    # rare-positive prior: start class logits strongly negative
    head[2].bias.data[4:] = -4.0
    return DetectorModel(config, stem, pgfe, backbone, hrfm, neck_conv, head)


def backbone_forward(model: DetectorModel, x: Tensor) -> PyramidFeatures:
    """Stem output -> four pyramid levels at strides 4/8/16/32."""
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ShapeError(f"backbone input size must be divisible by 32, got {x.shape}")
    b = model.backbone
    t = relu(conv2d(x, b[0]))
    p1 = relu(conv2d(t, b[1]))
    p2 = relu(conv2d(p1, b[2]))
    p3 = relu(conv2d(p2, b[3]))
    p4 = relu(conv2d(p3, b[4]))
    return PyramidFeatures(p1, p2, p3, p4)


def head_forward(model: DetectorModel, fused: Tensor) -> Tensor:
    """Fused map -> [N, 4+num_classes, S, S]: softplus'd ltrb then class logits."""
    h = relu(conv2d(fused, model.head[0]))
    h = relu(conv2d(h, model.head[1]))
    raw = conv2d(h, model.head[2])
    box = softplus(channel_slice(raw, 0, 4))
    cls = channel_slice(raw, 4, 4 + model.config.num_classes)
    return concat_channels([box, cls])


def stem_forward(model: DetectorModel, image: Tensor) -> Tensor:
    if model.pgfe is not None:
        return pgfe_forward(image, model.pgfe)
    return relu(conv2d(image, model.stem))


def neck_forward(model: DetectorModel, pyr: PyramidFeatures) -> Tensor:
    if model.hrfm is not None:
        return hrfm_forward(pyr, model.hrfm)
    return conv2d(pyr.p1, model.neck_conv)


def model_forward(model: DetectorModel, image: Tensor) -> Tensor:
    """RGB image [N,3,H,W] in [0,1] -> raw head map [N, 4+C, H/4, W/4]."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected [N,3,H,W] image batch, got {image.shape}")
    return head_forward(model, neck_forward(model, backbone_forward(model, stem_forward(model, image))))


# -- closed-form parameter counts ------------------------------------------
# Kept next to build_model so the two stay in sync; tests compare these
# against actual tensor sizes.


def _conv_n(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def stem_param_count(config: ModelConfig) -> int:
    return _conv_n(3, config.stem_channels, 3)


def pgfe_param_count(config: ModelConfig) -> int:
    c = config.stem_channels
    s = c // 2
    cbr = _conv_n(c, c, 3) + 2 * c  # conv + per-channel scale and shift
    inn = _conv_n(s, c - s, 3) + _conv_n(c - s, s, 3)
    return _conv_n(3, c, 3) + config.pgfe_stages * cbr + config.pgfe_blocks * inn + _conv_n(c, c, 1)


def backbone_param_count(config: ModelConfig) -> int:
    c, w = config.stem_channels, config.backbone_widths
    chain = [(c, w[0]), (w[0], w[0]), (w[0], w[1]), (w[1], w[2]), (w[2], w[3])]
    return sum(_conv_n(a, b, 3) for a, b in chain)


def mfia_param_count(config: ModelConfig) -> int:
    """One attention instance."""
    wd, r = config.hrfm_width, config.attention_ratio
    cam = _conv_n(4 * wd, wd // r, 1) + _conv_n(wd // r, wd, 1)
    return 2 * cam + _conv_n(2, 1, 7)


def hrfm_param_count(config: ModelConfig) -> int:
    proj = sum(_conv_n(wi, config.hrfm_width, 1) for wi in config.backbone_widths)
    att = 4 * mfia_param_count(config) if config.enable_mfia else 0
    return proj + att


def neck_conv_param_count(config: ModelConfig) -> int:
    return _conv_n(config.backbone_widths[0], config.fused_channels, 1)


def head_param_count(config: ModelConfig) -> int:
    return (_conv_n(config.fused_channels, config.head_width, 3)
            + _conv_n(config.head_width, config.head_width, 3)
            + _conv_n(config.head_width, 4 + config.num_classes, 1))


def expected_param_count(config: ModelConfig) -> int:
    front = pgfe_param_count(config) if config.enable_pgfe else stem_param_count(config)
    neck = hrfm_param_count(config) if config.enable_hrfm else neck_conv_param_count(config)
    return front + backbone_param_count(config) + neck + head_param_count(config)
