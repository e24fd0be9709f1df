"""High-resolution fusion neck.

Each backbone pyramid level (strides 4/8/16/32) is projected to a common
channel width by a 1x1 conv, enlarged to the stride-4 grid, passed through
one attention instance per branch and concatenated: four branches of C
channels give a 4C fused map on the finest grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._init import conv_param_items, he_conv
from .mfia import MfiaParams, make_mfia_params, mfia_forward
from .tensorops import (
    ConvSpec,
    ShapeError,
    Tensor,
    bilinear_upsample,
    concat_channels,
    conv2d,
)


@dataclass
class PyramidFeatures:
    """Backbone outputs at strides 4, 8, 16, 32 (spatial sizes halve each level)."""

    p1: Tensor
    p2: Tensor
    p3: Tensor
    p4: Tensor

    def __post_init__(self):
        levels = (self.p1, self.p2, self.p3, self.p4)
        n = self.p1.shape[0]
        for a, b in zip(levels, levels[1:]):
            if b.shape[0] != n:
                raise ShapeError("pyramid levels come from different batches")
            # ceil-halving, matching stride-2 convs on odd extents
            want = ((a.shape[2] + 1) // 2, (a.shape[3] + 1) // 2)
            if (b.shape[2], b.shape[3]) != want:
                raise ShapeError(
                    f"pyramid spatial sizes must halve: {a.shape} then {b.shape}"
                )

    @property
    def levels(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.p1, self.p2, self.p3, self.p4)


@dataclass
class FeatureBranches:
    """The four aligned branches on the stride-4 grid, equal shapes."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def __post_init__(self):
        shapes = {f.shape for f in self.branches}
        if len(shapes) != 1:
            raise ShapeError(f"branch shapes differ: {sorted(shapes)}")

    @property
    def branches(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.f1, self.f2, self.f3, self.f4)


@dataclass
class HrfmParams:
    """1x1 projections per level plus one attention instance per branch.

    An empty `mfia` list disables attention: the aligned branches are
    concatenated as-is (zero extra parameters), keeping the output shape.
    """

    projections: list[ConvSpec]  # four 1x1 convs, level channels -> width
    mfia: list[MfiaParams]  # four instances (branch = 1..4), or empty

    def __post_init__(self):
        if len(self.projections) != 4 or len(self.mfia) not in (0, 4):
            raise ShapeError("hrfm needs four projections and zero or four attention instances")
        widths = {p.out_channels for p in self.projections}
        if len(widths) != 1:
            raise ShapeError(f"projection widths differ: {sorted(widths)}")
        for want, inst in enumerate(self.mfia, start=1):
            if inst.branch != want:
                raise ShapeError(f"attention instance {want} carries branch id {inst.branch}")
            if inst.channels != self.width:
                raise ShapeError("attention channel count must match projection width")

    @property
    def width(self) -> int:
        return self.projections[0].out_channels

    def param_items(self, prefix: str = "hrfm"):
        for i, proj in enumerate(self.projections, start=1):
            for name, t in conv_param_items(proj):
                yield f"{prefix}.proj{i}.{name}", t
        for i, inst in enumerate(self.mfia, start=1):
            yield from inst.param_items(f"{prefix}.mfia{i}")


def make_hrfm_params(rng: np.random.Generator, level_channels: tuple[int, int, int, int],
                     width: int = 128, ratio: int = 4, with_attention: bool = True,
                     dtype=np.float64) -> HrfmParams:
    return HrfmParams(
        projections=[he_conv(rng, c, width, 1, padding=0, dtype=dtype) for c in level_channels],
        mfia=[make_mfia_params(rng, i, width, ratio, dtype) for i in range(1, 5)]
        if with_attention else [],
    )


def project_branch(p_l: Tensor, proj: ConvSpec, target_hw: tuple[int, int]) -> Tensor:
    """1x1-project a pyramid level and enlarge it to the stride-4 grid."""
    return bilinear_upsample(conv2d(p_l, proj), *target_hw)


def align_pyramid(pyr: PyramidFeatures, p: HrfmParams) -> FeatureBranches:
    """Project all four levels onto the finest level's grid."""
    target = (pyr.p1.shape[2], pyr.p1.shape[3])
    f = [project_branch(level, proj, target)
         for level, proj in zip(pyr.levels, p.projections)]
    return FeatureBranches(*f)


def hrfm_fuse(branches: FeatureBranches, mfia_params: list[MfiaParams]) -> Tensor:
    """Concat of the four attention outputs, branch order fixed: [N,4C,H,W]."""
    if len(mfia_params) not in (0, 4):
        raise ShapeError(f"hrfm_fuse needs zero or four attention instances, got {len(mfia_params)}")
    f1, f2, f3, f4 = branches.branches
    if not mfia_params:
        return concat_channels([f1, f2, f3, f4])
    return concat_channels([mfia_forward(f1, f2, f3, f4, mp) for mp in mfia_params])


def hrfm_forward(pyr: PyramidFeatures, p: HrfmParams) -> Tensor:
    return hrfm_fuse(align_pyramid(pyr, p), p.mfia)
