"""Parameter-bundle constructors shared by the model modules."""

from __future__ import annotations

import numpy as np

from .tensorops import ConvSpec, Tensor


def he_conv(rng: np.random.Generator, cin: int, cout: int, k: int, stride: int = 1,
            padding: int | None = None, gain: float = 1.0, dtype=np.float64) -> ConvSpec:
    """Conv with He-normal weights (scaled by `gain`) and zero bias."""
    if padding is None:
        padding = k // 2
    std = gain * np.sqrt(2.0 / (cin * k * k))
    w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
    return ConvSpec(cin, cout, k, k, stride, padding,
                    Tensor(w, requires_grad=True),
                    Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))


def zero_conv(cin: int, cout: int, k: int, stride: int = 1, padding: int | None = None,
              dtype=np.float64) -> ConvSpec:
    if padding is None:
        padding = k // 2
    return ConvSpec(cin, cout, k, k, stride, padding,
                    Tensor(np.zeros((cout, cin, k, k), dtype=dtype), requires_grad=True),
                    Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))


def conv_param_items(spec: ConvSpec):
    yield "weight", spec.weight
    yield "bias", spec.bias
