"""Convolution, resampling, blur and pooling kernels with gradients.

All kernels are direct numpy implementations (im2col + BLAS for conv) with
hand-written backward passes.  Summation order is fixed, so repeated calls
on identical inputs are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    _accumulate,
    _make,
    check_finite,
)


@dataclass
class ConvSpec:
    """A 2-D convolution layer: geometry plus its weight/bias parameters.

    `weight` is laid out [out_channels, in_channels, kernel_h, kernel_w];
    convolution is cross-correlation (no kernel flip) over a zero-padded
    input, the standard deep-learning convention.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        want_w = (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        if self.weight.shape != want_w:
            raise ShapeError(f"conv weight shape {self.weight.shape} != declared {want_w}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlate x [N,Cin,H,W] with spec's kernel; returns [N,Cout,H',W']."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, "
            f"spec expects {spec.in_channels}"
        )
    check_finite(x.data, "conv2d input")
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {s}, padding {p}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    w2 = spec.weight.data.reshape(spec.out_channels, -1)
    out = np.empty((n, spec.out_channels, oh, ow), dtype=x.dtype)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # overflow here surfaces as a clean NumericError at the next finite check
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            cols = windows[i].transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
            out[i] = (w2 @ cols).reshape(spec.out_channels, oh, ow)
        out += spec.bias.data.reshape(1, -1, 1, 1)

    weight, bias = spec.weight, spec.bias

    def backward(g):
        if bias.requires_grad or bias._parents:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad or weight._parents:
            dw = np.zeros_like(w2)
            for i in range(n):
                cols = windows[i].transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
                dw += g[i].reshape(spec.out_channels, -1) @ cols.T
            _accumulate(weight, dw.reshape(weight.data.shape))
        if x.requires_grad or x._parents:
            dxp = np.zeros_like(xp)
            for i in range(n):
                dcols = w2.T @ g[i].reshape(spec.out_channels, -1)
                dcols = dcols.reshape(c, kh, kw, oh, ow)
                for a in range(kh):
                    for b in range(kw):
                        dxp[i, :, a : a + s * oh : s, b : b + s * ow : s] += dcols[:, a, b]
            _accumulate(x, dxp[:, :, p : p + h, p : p + w] if p else dxp)

    return _make(out, (x, weight, bias), backward)


# -- bilinear upsampling ---------------------------------------------------


def _interp_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel (align-corners-off) source indices and blend weights."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _interp_last_axis(data: np.ndarray, i0, i1, frac) -> np.ndarray:
    frac = frac.astype(data.dtype)
    return data[..., i0] * (1.0 - frac) + data[..., i1] * frac


def _interp_last_axis_back(g: np.ndarray, n_in: int, i0, i1, frac) -> np.ndarray:
    frac = frac.astype(g.dtype)
    lead = g.shape[:-1]
    g2 = g.reshape(-1, g.shape[-1])
    out = np.zeros((g2.shape[0], n_in), dtype=g.dtype)
    rows = np.arange(g2.shape[0])[:, None]
    np.add.at(out, (rows, i0[None, :]), g2 * (1.0 - frac))
    np.add.at(out, (rows, i1[None, :]), g2 * frac)
    return out.reshape(lead + (n_in,))


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Enlarge [N,C,H,W] to [N,C,out_h,out_w] by half-pixel bilinear interpolation."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects 4-D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample target must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    if out_h == h and out_w == w:

        def backward_id(g):
            _accumulate(x, g)

        return _make(x.data.copy(), (x,), backward_id)

    hi0, hi1, hf = _interp_coords(h, out_h)
    wi0, wi1, wf = _interp_coords(w, out_w)
    # separable: rows first (axis 2 via transpose), then columns (axis 3)
    t = _interp_last_axis(x.data.transpose(0, 1, 3, 2), hi0, hi1, hf).transpose(0, 1, 3, 2)
    out = _interp_last_axis(t, wi0, wi1, wf)

    def backward(g):
        gt = _interp_last_axis_back(g, w, wi0, wi1, wf)
        gx = _interp_last_axis_back(gt.transpose(0, 1, 3, 2), h, hi0, hi1, hf)
        _accumulate(x, gx.transpose(0, 1, 3, 2))

    return _make(out, (x,), backward)


# -- gaussian blur ---------------------------------------------------------


def gaussian_kernel_1d(ksize: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """Normalized 1-D Gaussian taps over the centered window."""
    r = ksize // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(dtype)


def _reflect_index(n: int, r: int) -> np.ndarray:
    """Source index for each position of an r-padded axis of extent n."""
    t = np.arange(-r, n + r)
    t = np.abs(t)
    t = np.where(t >= n, 2 * (n - 1) - t, t)
    return t.astype(np.intp)


def _fold_reflect_last_axis(g: np.ndarray, n_in: int, r: int) -> np.ndarray:
    idx = _reflect_index(n_in, r)
    g2 = g.reshape(-1, g.shape[-1])
    out = np.zeros((g2.shape[0], n_in), dtype=g.dtype)
    rows = np.arange(g2.shape[0])[:, None]
    np.add.at(out, (rows, idx[None, :]), g2)
    return out.reshape(g.shape[:-1] + (n_in,))


def gaussian_blur(x: Tensor, ksize: int, sigma: float) -> Tensor:
    """Depthwise isotropic Gaussian filter with reflective border padding."""
    if x.ndim != 4:
        raise ShapeError(f"gaussian_blur expects 4-D input, got {x.shape}")
    if ksize % 2 == 0:
        raise ShapeError(f"gaussian_blur kernel size must be odd, got {ksize}")
    if sigma <= 0:
        raise ShapeError(f"gaussian_blur sigma must be > 0, got {sigma}")
    if ksize == 1:

        def backward_id(g):
            _accumulate(x, g)

        return _make(x.data.copy(), (x,), backward_id)

    n, c, h, w = x.shape
    r = ksize // 2
    if h <= r or w <= r:
        raise ShapeError(f"gaussian_blur: spatial size {h}x{w} too small for ksize {ksize}")
    k = gaussian_kernel_1d(ksize, sigma, x.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
    # horizontal taps leave the vertical padding intact, then vertical taps
    t = np.zeros((n, c, h + 2 * r, w), dtype=x.dtype)
    for j in range(ksize):
        t += k[j] * xp[:, :, :, j : j + w]
    out = np.zeros((n, c, h, w), dtype=x.dtype)
    for i in range(ksize):
        out += k[i] * t[:, :, i : i + h, :]

    def backward(g):
        dt = np.zeros((n, c, h + 2 * r, w), dtype=g.dtype)
        for i in range(ksize):
            dt[:, :, i : i + h, :] += k[i] * g
        dxp = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=g.dtype)
        for j in range(ksize):
            dxp[:, :, :, j : j + w] += k[j] * dt
        gw = _fold_reflect_last_axis(dxp, w, r)
        gh = _fold_reflect_last_axis(gw.transpose(0, 1, 3, 2), h, r)
        _accumulate(x, gh.transpose(0, 1, 3, 2))

    return _make(out, (x,), backward)


# -- pooling descriptors ---------------------------------------------------


def pool_channel_descriptor(x: Tensor, mode: str) -> Tensor:
    """Global spatial statistic per channel: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"pool_channel_descriptor expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if mode == "avg":
        out = flat.mean(axis=2)

        def backward(g):
            _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    elif mode == "max":
        arg = flat.argmax(axis=2)  # first maximum wins on ties
        out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

        def backward(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, arg[:, :, None], g[:, :, None], axis=2)
            _accumulate(x, gx.reshape(x.shape))

    else:
        raise ValueError(f"pool mode must be 'avg' or 'max', got {mode!r}")
    return _make(out.copy(), (x,), backward)


def pool_spatial_descriptor(x: Tensor, mode: str) -> Tensor:
    """Per-pixel statistic across channels: [N,C,H,W] -> [N,1,H,W]."""
    if x.ndim != 4:
        raise ShapeError(f"pool_spatial_descriptor expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if mode == "avg":
        out = x.data.mean(axis=1, keepdims=True)

        def backward(g):
            _accumulate(x, np.broadcast_to(g / c, x.shape))

    elif mode == "max":
        arg = x.data.argmax(axis=1)  # [N,H,W], first maximum wins on ties
        out = np.take_along_axis(x.data, arg[:, None], axis=1)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, arg[:, None], g, axis=1)
            _accumulate(x, gx)

    else:
        raise ValueError(f"pool mode must be 'avg' or 'max', got {mode!r}")
    return _make(out.copy(), (x,), backward)
