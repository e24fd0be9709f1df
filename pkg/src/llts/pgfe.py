"""Enhancement front end: lifts a 3-channel image to 64 enhanced feature channels.

Two branches run on the shared stem features.  The residual branch applies a
chain of conv-normalize-rectify blocks, then a global contrast stretch and an
unsharp-style edge boost.  The invertible branch applies affine coupling
blocks whose inverse is exact, so no information is destroyed.  The branches
are summed and mixed by a 1x1 conv.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._init import conv_param_items, he_conv
from .tensorops import (
    ConvSpec,
    ShapeError,
    Tensor,
    absolute,
    add,
    channel_slice,
    check_finite,
    clamp,
    concat_channels,
    conv2d,
    exp,
    gaussian_blur,
    mul,
    pool_channel_descriptor,
    relu,
    scale,
    sub,
)


@dataclass
class CbrParams:
    """conv -> learnable per-channel scale/shift -> relu.

    The affine stage uses no batch statistics, so single-image inference is
    deterministic and identical to batched inference.
    """

    conv: ConvSpec
    scale: Tensor  # [1,C,1,1]
    shift: Tensor  # [1,C,1,1]

    def __post_init__(self):
        c = self.conv.out_channels
        if self.conv.in_channels != c:
            raise ShapeError(f"CBR must preserve channels, got {self.conv.in_channels}->{c}")
        want = (1, c, 1, 1)
        if self.scale.shape != want or self.shift.shape != want:
            raise ShapeError(f"CBR scale/shift must be {want}, got {self.scale.shape}/{self.shift.shape}")

    def param_items(self, prefix: str):
        for name, t in conv_param_items(self.conv):
            yield f"{prefix}.conv.{name}", t
        yield f"{prefix}.scale", self.scale
        yield f"{prefix}.shift", self.shift


@dataclass
class PgeParams:
    """Residual enhancement chain plus the contrast/sharpen coefficients."""

    cbr: list[CbrParams]
    gamma: float = 2.0
    delta: float = 2.5
    blur_ksize: int = 5
    blur_sigma: float = 1.0

    def __post_init__(self):
        if len(self.cbr) < 1:
            raise ShapeError("PGE chain needs at least one CBR stage")
        if self.gamma <= 0:
            raise ValueError(f"contrast coefficient must be > 0, got {self.gamma}")
        if self.delta < 0:
            raise ValueError(f"sharpen coefficient must be >= 0, got {self.delta}")

    @property
    def stages(self) -> int:
        return len(self.cbr)

    def param_items(self, prefix: str):
        for i, blk in enumerate(self.cbr, start=1):
            yield from blk.param_items(f"{prefix}.cbr{i}")


@dataclass
class InnBlockParams:
    """One affine coupling block over a channel split at `split`."""

    split: int
    cdc_f: ConvSpec  # split -> C-split channels
    cdc_g: ConvSpec  # C-split -> split channels
    index: int = 0  # position in the owning chain, for error messages

    def __post_init__(self):
        c, rest = self.split, self.cdc_f.out_channels
        if c < 1:
            raise ShapeError(f"coupling split must be >= 1, got {c}")
        if self.cdc_f.in_channels != c or self.cdc_g.out_channels != c:
            raise ShapeError(
                f"coupling arms inconsistent with split {c}: "
                f"f {self.cdc_f.in_channels}->{self.cdc_f.out_channels}, "
                f"g {self.cdc_g.in_channels}->{self.cdc_g.out_channels}"
            )
        if self.cdc_g.in_channels != rest:
            raise ShapeError("cdc_g input channels must equal cdc_f output channels")

    @property
    def channels(self) -> int:
        return self.split + self.cdc_f.out_channels

    def param_items(self, prefix: str):
        for name, t in conv_param_items(self.cdc_f):
            yield f"{prefix}.cdc_f.{name}", t
        for name, t in conv_param_items(self.cdc_g):
            yield f"{prefix}.cdc_g.{name}", t


@dataclass
class PgfeParams:
    stem: ConvSpec  # 3 -> C, 3x3, pad 1
    pge: PgeParams
    inn_blocks: list[InnBlockParams] = field(default_factory=list)
    fuse: ConvSpec = None  # C -> C, 1x1, applied after branch addition

    def __post_init__(self):
        c = self.stem.out_channels
        for blk in self.inn_blocks:
            if blk.channels != c:
                raise ShapeError(f"coupling block spans {blk.channels} channels, stem gives {c}")
        if self.fuse is None or self.fuse.in_channels != c or self.fuse.out_channels != c:
            raise ShapeError(f"fuse conv must map {c}->{c} channels")

    @property
    def channels(self) -> int:
        return self.stem.out_channels

    def param_items(self, prefix: str = "pgfe"):
        for name, t in conv_param_items(self.stem):
            yield f"{prefix}.stem.{name}", t
        yield from self.pge.param_items(f"{prefix}.pge")
        for i, blk in enumerate(self.inn_blocks, start=1):
            yield from blk.param_items(f"{prefix}.inn{i}")
        for name, t in conv_param_items(self.fuse):
            yield f"{prefix}.fuse.{name}", t


# -- construction ----------------------------------------------------------


def make_cbr(rng: np.random.Generator, channels: int, dtype=np.float64) -> CbrParams:
    return CbrParams(
        conv=he_conv(rng, channels, channels, 3, dtype=dtype),
        scale=Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
        shift=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
    )


def make_inn_block(rng: np.random.Generator, channels: int, split: int, index: int = 0,
                   dtype=np.float64) -> InnBlockParams:
    # the exponent arm starts small so every block is near-identity at init
    return InnBlockParams(
        split=split,
        cdc_f=he_conv(rng, split, channels - split, 3, dtype=dtype),
        cdc_g=he_conv(rng, channels - split, split, 3, gain=0.1, dtype=dtype),
        index=index,
    )


def make_pgfe_params(rng: np.random.Generator, channels: int = 64, stages: int = 3,
                     blocks: int = 2, split: int = 32, gamma: float = 2.0,
                     delta: float = 2.5, blur_ksize: int = 5, blur_sigma: float = 1.0,
                     dtype=np.float64) -> PgfeParams:
    if not 1 <= split < channels:
        raise ShapeError(f"split must lie in [1, {channels - 1}], got {split}")
    return PgfeParams(
        stem=he_conv(rng, 3, channels, 3, dtype=dtype),
        pge=PgeParams(
            cbr=[make_cbr(rng, channels, dtype) for _ in range(stages)],
            gamma=gamma, delta=delta, blur_ksize=blur_ksize, blur_sigma=blur_sigma,
        ),
        inn_blocks=[make_inn_block(rng, channels, split, i, dtype) for i in range(1, blocks + 1)],
        fuse=he_conv(rng, channels, channels, 1, padding=0, dtype=dtype),
    )


# -- operations ------------------------------------------------------------


def cbr_apply(x: Tensor, p: CbrParams) -> Tensor:
    return relu(add(mul(conv2d(x, p.conv), p.scale), p.shift))


def pge_residual_chain(u1: Tensor, p: PgeParams) -> Tensor:
    """Residual chain u <- u + CBR_k(u), once per stage; returns u1 + final u."""
    u = u1
    for blk in p.cbr:
        u = add(u, cbr_apply(u, blk))
    return add(u1, u)


def contrast_enhance(x: Tensor, gamma: float) -> Tensor:
    """Stretch each channel about its spatial mean: gamma*(x - mean) + mean."""
    if gamma <= 0:
        raise ValueError(f"contrast coefficient must be > 0, got {gamma}")
    xbar = pool_channel_descriptor(x, "avg")  # [N,C], broadcasts back over H,W
    return add(scale(x, gamma), scale(xbar, 1.0 - gamma))


def edge_enhance(y: Tensor, delta: float, ksize: int = 5, sigma: float = 1.0) -> Tensor:
    """Boost by the rectified blur residual: delta*|y - blur(y)| + y (>= y everywhere)."""
    if delta < 0:
        raise ValueError(f"sharpen coefficient must be >= 0, got {delta}")
    return add(scale(absolute(sub(y, gaussian_blur(y, ksize, sigma))), delta), y)


_EXP_CLAMP = 8.0  # exponent bound; the inverse clamps identically, so bijectivity survives


def inn_forward(u: Tensor, b: InnBlockParams) -> Tensor:
    """Affine coupling: B' = B + f(A); A' = A*exp(g(B')) + g(B')."""
    if u.shape[1] != b.channels:
        raise ShapeError(f"coupling block {b.index} expects {b.channels} channels, got {u.shape}")
    a = channel_slice(u, 0, b.split)
    bb = channel_slice(u, b.split, b.channels)
    b_out = add(bb, relu(conv2d(a, b.cdc_f)))
    t = relu(conv2d(b_out, b.cdc_g))
    a_out = add(mul(a, exp(clamp(t, -_EXP_CLAMP, _EXP_CLAMP))), t)
    check_finite(a_out.data, f"inn block {b.index} forward")
    return concat_channels([a_out, b_out])


def inn_inverse(v: Tensor, b: InnBlockParams) -> Tensor:
    """Exact inverse of inn_forward with the same parameters."""
    if v.shape[1] != b.channels:
        raise ShapeError(f"coupling block {b.index} expects {b.channels} channels, got {v.shape}")
    a_out = channel_slice(v, 0, b.split)
    b_out = channel_slice(v, b.split, b.channels)
    t = relu(conv2d(b_out, b.cdc_g))
    a = mul(sub(a_out, t), exp(scale(clamp(t, -_EXP_CLAMP, _EXP_CLAMP), -1.0)))
    bb = sub(b_out, relu(conv2d(a, b.cdc_f)))
    check_finite(a.data, f"inn block {b.index} inverse")
    return concat_channels([a, bb])


def _pge_enhance(s: Tensor, p: PgeParams) -> Tensor:
    g = pge_residual_chain(s, p)
    g = contrast_enhance(g, p.gamma)
    return edge_enhance(g, p.delta, p.blur_ksize, p.blur_sigma)


def pge_branch(img: Tensor, p: PgfeParams) -> Tensor:
    """Stem + residual chain + contrast + edge boost (no coupling branch, no fuse)."""
    return _pge_enhance(relu(conv2d(img, p.stem)), p.pge)


def pgfe_forward(img: Tensor, p: PgfeParams) -> Tensor:
    """Full front end: fuse(enhanced residual branch + invertible branch).

    `img` is expected in [0,1]; spatial size is preserved and the channel
    count becomes p.channels.
    """
    s = relu(conv2d(img, p.stem))
    g = _pge_enhance(s, p.pge)
    d = s
    for blk in p.inn_blocks:
        d = inn_forward(d, blk)
    return conv2d(add(g, d), p.fuse)
