"""Cross-branch attention: channel interaction (two stacked CAMs) then a
spatial gate (SAM) shared across four aligned feature branches.

All attention factors are sigmoid outputs, so the module only attenuates:
|out| <= |f_i| elementwise and signs are preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._init import conv_param_items, he_conv
from .tensorops import (
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    mul,
    pool_channel_descriptor,
    pool_spatial_descriptor,
    relu,
    reshape,
    sigmoid,
)


@dataclass
class CamParams:
    """Channel attention: 4C descriptors -> C/r bottleneck -> C weights."""

    reduce: ConvSpec  # 1x1, 4C -> C/r
    expand: ConvSpec  # 1x1, C/r -> C
    ratio: int = 4

    def __post_init__(self):
        c = self.expand.out_channels
        if c % self.ratio:
            raise ShapeError(f"reduction ratio {self.ratio} must divide channels {c}")
        if self.reduce.in_channels != 4 * c or self.reduce.out_channels != c // self.ratio:
            raise ShapeError(
                f"CAM reduce must map {4 * c}->{c // self.ratio}, "
                f"got {self.reduce.in_channels}->{self.reduce.out_channels}"
            )
        if self.expand.in_channels != c // self.ratio:
            raise ShapeError("CAM expand input must equal reduce output")
        if (self.reduce.kernel_h, self.reduce.kernel_w) != (1, 1) or \
           (self.expand.kernel_h, self.expand.kernel_w) != (1, 1):
            raise ShapeError("CAM convs must be 1x1")

    @property
    def channels(self) -> int:
        return self.expand.out_channels

    def param_items(self, prefix: str):
        for name, t in conv_param_items(self.reduce):
            yield f"{prefix}.reduce.{name}", t
        for name, t in conv_param_items(self.expand):
            yield f"{prefix}.expand.{name}", t


@dataclass
class SamParams:
    """Spatial attention: [avg;max] channel statistics -> 7x7 conv -> gate."""

    conv7: ConvSpec  # 7x7 pad 3, 2 -> 1

    def __post_init__(self):
        k = (self.conv7.kernel_h, self.conv7.kernel_w)
        if k != (7, 7):
            raise ShapeError(f"SAM conv must be 7x7, got {k}")
        if self.conv7.in_channels != 2 or self.conv7.out_channels != 1:
            raise ShapeError(
                f"SAM conv must map 2->1 channels, got "
                f"{self.conv7.in_channels}->{self.conv7.out_channels}"
            )

    def param_items(self, prefix: str):
        for name, t in conv_param_items(self.conv7):
            yield f"{prefix}.conv7.{name}", t


@dataclass
class MfiaParams:
    cam1: CamParams
    cam2: CamParams
    sam: SamParams
    branch: int  # which of the four branches this instance emits, 1-based

    def __post_init__(self):
        if not 1 <= self.branch <= 4:
            raise ShapeError(f"branch index must be in 1..4, got {self.branch}")
        if self.cam1.channels != self.cam2.channels:
            raise ShapeError("both CAMs must operate on the same channel count")

    @property
    def channels(self) -> int:
        return self.cam1.channels

    def param_items(self, prefix: str):
        yield from self.cam1.param_items(f"{prefix}.cam1")
        yield from self.cam2.param_items(f"{prefix}.cam2")
        yield from self.sam.param_items(f"{prefix}.sam")


def make_cam(rng: np.random.Generator, channels: int, ratio: int = 4, dtype=np.float64) -> CamParams:
    return CamParams(
        reduce=he_conv(rng, 4 * channels, channels // ratio, 1, padding=0, dtype=dtype),
        expand=he_conv(rng, channels // ratio, channels, 1, padding=0, dtype=dtype),
        ratio=ratio,
    )


def make_sam(rng: np.random.Generator, dtype=np.float64) -> SamParams:
    return SamParams(conv7=he_conv(rng, 2, 1, 7, padding=3, dtype=dtype))


def make_mfia_params(rng: np.random.Generator, branch: int, channels: int = 128,
                     ratio: int = 4, dtype=np.float64) -> MfiaParams:
    return MfiaParams(
        cam1=make_cam(rng, channels, ratio, dtype),
        cam2=make_cam(rng, channels, ratio, dtype),
        sam=make_sam(rng, dtype),
        branch=branch,
    )


# -- operations ------------------------------------------------------------


def _require_matched(branches: tuple[Tensor, ...], what: str) -> None:
    shapes = {b.shape for b in branches}
    if len(branches) != 4:
        raise ShapeError(f"{what} takes exactly four branches, got {len(branches)}")
    if len(shapes) != 1:
        raise ShapeError(f"{what} branch shapes differ: {sorted(shapes)}")


def cam(f1: Tensor, f2: Tensor, f3: Tensor, f4: Tensor, p: CamParams) -> Tensor:
    """Channel weights in (0,1): [N,C] from the four branches' mean descriptors."""
    _require_matched((f1, f2, f3, f4), "cam")
    n = f1.shape[0]
    d = concat_channels([
        reshape(pool_channel_descriptor(f, "avg"), (n, f.shape[1], 1, 1))
        for f in (f1, f2, f3, f4)
    ])
    z = conv2d(relu(conv2d(d, p.reduce)), p.expand)
    return reshape(sigmoid(z), (n, p.channels))


def _mfca_weights(f1, f2, f3, f4, cam1: CamParams, cam2: CamParams) -> tuple[Tensor, Tensor]:
    """The two stacked channel-weight vectors (independent of the output branch)."""
    a1 = cam(f1, f2, f3, f4, cam1)
    weighted = [mul(a1, f) for f in (f1, f2, f3, f4)]
    a2 = cam(*weighted, cam2)
    return a1, a2


def mfca(f1: Tensor, f2: Tensor, f3: Tensor, f4: Tensor, cam1: CamParams,
         cam2: CamParams, i: int) -> Tensor:
    """Doubly channel-weighted branch i; both weights multiply the ORIGINAL f_i."""
    if not 1 <= i <= 4:
        raise ShapeError(f"branch index must be in 1..4, got {i}")
    a1, a2 = _mfca_weights(f1, f2, f3, f4, cam1, cam2)
    return mul(mul(a1, a2), (f1, f2, f3, f4)[i - 1])


def sam(fc1: Tensor, fc2: Tensor, fc3: Tensor, fc4: Tensor, p: SamParams) -> Tensor:
    """Spatial gate in (0,1): [N,1,H,W] from the summed branches."""
    _require_matched((fc1, fc2, fc3, fc4), "sam")
    s = add(add(fc1, fc2), add(fc3, fc4))
    stats = concat_channels([
        pool_spatial_descriptor(s, "avg"),
        pool_spatial_descriptor(s, "max"),
    ])
    return sigmoid(conv2d(stats, p.conv7))


def mfia_forward(f1: Tensor, f2: Tensor, f3: Tensor, f4: Tensor, p: MfiaParams) -> Tensor:
    """Full interaction for this instance's branch: beta * mfca(branch)."""
    _require_matched((f1, f2, f3, f4), "mfia_forward")
    a1, a2 = _mfca_weights(f1, f2, f3, f4, p.cam1, p.cam2)
    w = mul(a1, a2)
    fcs = [mul(w, f) for f in (f1, f2, f3, f4)]
    beta = sam(*fcs, p.sam)
    return mul(beta, fcs[p.branch - 1])
