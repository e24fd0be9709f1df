"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor


def _numeric_partial(f: Callable[[Tensor], Tensor], base: np.ndarray, flat_index: int,
                     eps: float) -> float:
    probe = base.copy().ravel()
    probe[flat_index] += eps
    hi = f(Tensor(probe.reshape(base.shape))).item()
    probe[flat_index] -= 2 * eps
    lo = f(Tensor(probe.reshape(base.shape))).item()
    return (hi - lo) / (2 * eps)


def _analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    leaf = Tensor(x.data.copy(), requires_grad=True)
    y = f(leaf)
    if y.shape != ():
        raise ShapeError(f"grad_check needs a scalar-valued function, got output shape {y.shape}")
    y.backward()
    return leaf.grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Exhaustive: perturbs every coordinate of x.  Cost is 2*size evaluations
    of f, so keep x small; see grad_check_sampled for large tensors.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")
    analytic = _analytic_grad(f, x)
    flat = analytic.ravel()
    worst = 0.0
    for i in range(x.size):
        num = _numeric_partial(f, x.data, i, eps)
        err = abs(flat[i] - num) / max(1.0, abs(flat[i]))
        if err > worst:
            worst = err
    return worst


def grad_check_param(forward: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
                     max_coords: int | None = None, seed: int = 0) -> float:
    """Check the gradient w.r.t. a parameter captured inside `forward`.

    `forward` rebuilds the scalar loss from current parameter values on every
    call; this routine perturbs `param.data` in place for the finite
    differences and restores it.  With max_coords set, only a seeded sample
    of coordinates is probed.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")
    param.grad = None
    y = forward()
    if y.shape != ():
        raise ShapeError(f"grad_check needs a scalar-valued function, got output shape {y.shape}")
    y.backward()
    analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
    flat = analytic.ravel()
    if max_coords is None or param.size <= max_coords:
        coords = np.arange(param.size)
    else:
        coords = np.random.default_rng(seed).choice(param.size, size=max_coords, replace=False)
        coords.sort()
    worst = 0.0
    view = param.data.ravel()
    for i in coords:
        orig = view[i]
        view[i] = orig + eps
        hi = forward().item()
        view[i] = orig - eps
        lo = forward().item()
        view[i] = orig
        num = (hi - lo) / (2 * eps)
        err = abs(flat[i] - num) / max(1.0, abs(flat[i]))
        if err > worst:
            worst = err
    return worst


def grad_check_sampled(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                       max_coords: int = 64, seed: int = 0) -> float:
    """grad_check restricted to a seeded random subset of coordinates.

    Same error measure, but finite differences are taken only at
    min(max_coords, size) coordinates, making large parameter tensors
    checkable in bounded time.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")
    analytic = _analytic_grad(f, x)
    flat = analytic.ravel()
    if x.size <= max_coords:
        coords = np.arange(x.size)
    else:
        coords = np.random.default_rng(seed).choice(x.size, size=max_coords, replace=False)
        coords.sort()
    worst = 0.0
    for i in coords:
        num = _numeric_partial(f, x.data, int(i), eps)
        err = abs(flat[i] - num) / max(1.0, abs(flat[i]))
        if err > worst:
            worst = err
    return worst
