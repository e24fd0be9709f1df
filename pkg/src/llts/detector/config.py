"""Detector configuration and its serializable form."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from ..tensorops import ShapeError


@dataclass(frozen=True)
class ModelConfig:
    """Sizes, widths, and the three independent ablation switches.

    The enhancement stem, the fusion neck, and the neck's attention can each
    be switched off; the replacement is a plain conv (or nothing) chosen so
    every configuration feeds the head an identically shaped map.
    """

    input_size: int = 640
    num_classes: int = 3
    stem_channels: int = 64
    backbone_widths: tuple[int, int, int, int] = (32, 48, 64, 96)
    enable_pgfe: bool = True
    enable_hrfm: bool = True
    enable_mfia: bool = True
    hrfm_width: int = 128
    head_width: int = 128
    pgfe_stages: int = 3
    pgfe_blocks: int = 2
    attention_ratio: int = 4
    conf_threshold: float = 0.25
    nms_iou: float = 0.45

    def __post_init__(self):
        # tolerate lists from JSON round trips
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        if self.input_size <= 0 or self.input_size % 32:
            raise ShapeError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.num_classes < 1:
            raise ShapeError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.backbone_widths) != 4 or min(self.backbone_widths) < 1:
            raise ShapeError(f"need four positive backbone widths, got {self.backbone_widths}")
        if self.stem_channels < 2:  # coupling blocks split the channels in two
            raise ShapeError(f"stem_channels must be >= 2, got {self.stem_channels}")
        if self.hrfm_width < 1 or self.head_width < 1:
            raise ShapeError("hrfm_width and head_width must be positive")
        if self.enable_mfia and self.hrfm_width % self.attention_ratio:
            raise ShapeError(
                f"attention_ratio {self.attention_ratio} must divide hrfm_width {self.hrfm_width}"
            )
        if self.pgfe_stages < 1 or self.pgfe_blocks < 0:
            raise ShapeError("pgfe_stages must be >= 1 and pgfe_blocks >= 0")
        if not 0.0 <= self.conf_threshold <= 1.0 or not 0.0 <= self.nms_iou <= 1.0:
            raise ShapeError("conf_threshold and nms_iou must lie in [0, 1]")

    @property
    def stride(self) -> int:
        """Stride of the single-scale head grid."""
        return 4

    @property
    def grid_size(self) -> int:
        return self.input_size // self.stride

    @property
    def fused_channels(self) -> int:
        """Head input channels, identical in every toggle combination."""
        return 4 * self.hrfm_width

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
