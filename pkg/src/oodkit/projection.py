"""Shrink feature maps below a fixed element budget by repeated pooling.

A feature map is laid out channels-first: axis 0 is the channel axis and
is never pooled. Each round halves every spatial axis with a window-2,
stride-2 average; the pooled extent is floor(n/2) for n >= 2, so a
trailing odd element is not covered by any window, and extent-1 axes
pass through. Rounds repeat until the total element count is strictly
below the budget, then the result is flattened in row-major order.
Accumulation is float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ProjectedFeature:
    """Flattened feature vector plus how it was produced."""

    vector: np.ndarray
    source_shape: tuple[int, ...]
    pool_steps: int


def _pool_axis(x: np.ndarray, axis: int, kernel: int, stride: int) -> np.ndarray:
    n = x.shape[axis]
    if n == 1:
        return x
    n_out = max(n // stride, 1)
    pieces = []
    for j in range(n_out):
        lo = j * stride
        hi = min(lo + kernel, n)
        window = np.take(x, range(lo, hi), axis=axis)
        pieces.append(window.mean(axis=axis, keepdims=True))
    return np.concatenate(pieces, axis=axis)


def avg_pool(x: np.ndarray,
             kernel: tuple[int, ...] | int = 2,
             stride: tuple[int, ...] | int = 2) -> np.ndarray:
    """Average-pool the spatial axes (all axes but the first).

    Per axis of extent n: output extent is max(floor(n / stride), 1),
    extent-1 axes pass through untouched. Window j covers
    [j*stride, j*stride + kernel) clipped to the axis, and a clipped
    window averages only its in-bounds elements.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValidationError("feature map needs a channel axis plus spatial axes")
    n_spatial = x.ndim - 1
    kernels = (kernel,) * n_spatial if isinstance(kernel, int) else tuple(kernel)
    strides = (stride,) * n_spatial if isinstance(stride, int) else tuple(stride)
    if len(kernels) != n_spatial or len(strides) != n_spatial:
        raise ValidationError(
            f"kernel/stride must cover the {n_spatial} spatial axes"
        )
    if any(k < 1 for k in kernels) or any(s < 1 for s in strides):
        raise ValidationError("kernel and stride extents must be positive")
    out = x
    for axis in range(1, x.ndim):
        out = _pool_axis(out, axis, kernels[axis - 1], strides[axis - 1])
    return out


def project(feature_map: np.ndarray, budget: int = 10_000) -> ProjectedFeature:
    """Pool with window = stride = 2 until size < budget, then flatten.

    Zero rounds when the input is already under budget. Raises
    ValidationError if every spatial axis collapses to 1 while the
    element count still meets the budget, since no further shrink is
    possible.
    """
    if budget < 1:
        raise ValidationError(f"budget must be positive, got {budget}")
    x = np.asarray(feature_map, dtype=np.float64)
    if x.ndim < 2:
        raise ValidationError("feature map needs a channel axis plus spatial axes")
    if x.size == 0:
        raise ValidationError("feature map is empty")
    source_shape = tuple(x.shape)
    steps = 0
    while x.size >= budget:
        if all(e == 1 for e in x.shape[1:]):
            raise ValidationError(
                f"cannot pool below budget {budget}: spatial axes exhausted at "
                f"shape {tuple(x.shape)} ({x.size} elements)"
            )
        x = avg_pool(x)
        steps += 1
    return ProjectedFeature(vector=np.ascontiguousarray(x).reshape(-1),
                            source_shape=source_shape,
                            pool_steps=steps)
