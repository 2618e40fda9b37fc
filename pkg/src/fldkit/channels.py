"""Multi-order channel recalibration.

Two gating blocks rescale the channels of an (H, W, D) feature map: one
driven by a first-order descriptor (global average pooling), the other by
a second-order descriptor (row means of the pooled covariance square
root), and their outputs are summed.  Each gate squeezes the descriptor
through a D -> D/4 -> D bottleneck with a ReLU between and a sigmoid on
top, so every channel weight stays strictly inside (0, 1) and multiple
channels can be emphasized at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul
from .covariance import centered_covariance, newton_schulz_sqrt
from .errors import ConfigurationError, DimensionError

REDUCTION = 4


@dataclass
class GatingParams:
    """Bottleneck weights of one gating block (no bias terms)."""

    reduce: Tensor   # (D/4, D)
    expand: Tensor   # (D, D/4)
    order: str       # "first" | "second"

    @property
    def channels(self) -> int:
        return self.expand.data.shape[0]


def make_gating_params(channels: int, order: str, rng: np.random.Generator) -> GatingParams:
    if channels % REDUCTION != 0:
        raise ConfigurationError(f"channel count {channels} is not divisible by {REDUCTION}")
    reduced = channels // REDUCTION
    bound_r = 1.0 / np.sqrt(channels)
    bound_e = 1.0 / np.sqrt(reduced)
    return GatingParams(
        reduce=Tensor(rng.uniform(-bound_r, bound_r, size=(reduced, channels)), requires_grad=True),
        expand=Tensor(rng.uniform(-bound_e, bound_e, size=(channels, reduced)), requires_grad=True),
        order=order,
    )


def first_order_descriptor(x: Tensor) -> Tensor:
    """Per-channel spatial mean of an (H, W, D) map, as a (D, 1) column."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"expected an (H, W, D) map, got shape {x.data.shape}")
    d = x.data.shape[2]
    return x.mean(axis=(0, 1)).reshape(d, 1)


def second_order_descriptor(y_hat: Tensor) -> Tensor:
    """Row means of a (D, D) channel-correlation matrix, as a (D, 1) column."""
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    d = y_hat.data.shape[0]
    if y_hat.data.ndim != 2 or y_hat.data.shape[1] != d:
        raise DimensionError(f"expected a square matrix, got shape {y_hat.data.shape}")
    return y_hat.mean(axis=1).reshape(d, 1)


def gate(descriptor: Tensor, params: GatingParams) -> Tensor:
    """sigmoid(expand @ relu(reduce @ descriptor)): per-channel weights in (0, 1)."""
    descriptor = descriptor if isinstance(descriptor, Tensor) else Tensor(descriptor)
    if descriptor.data.ndim == 1:
        descriptor = descriptor.reshape(descriptor.data.shape[0], 1)
    if descriptor.data.shape != (params.channels, 1):
        raise DimensionError(
            f"descriptor of length {descriptor.data.shape[0]} does not match {params.channels} channels")
    return matmul(params.expand, matmul(params.reduce, descriptor).relu()).sigmoid()


def recalibrate(x: Tensor, scaling: Tensor) -> Tensor:
    """Multiply channel d of an (H, W, D) map by scaling[d]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    scaling = scaling if isinstance(scaling, Tensor) else Tensor(scaling)
    d = x.data.shape[2]
    if scaling.data.size != d:
        raise DimensionError(f"scaling of length {scaling.data.size} does not match {d} channels")
    return x * scaling.reshape(1, 1, d)


def fuse_multi_order(x_first: Tensor, x_second: Tensor) -> Tensor:
    if x_first.data.shape != x_second.data.shape:
        raise DimensionError(
            f"fuse requires identical shapes, got {x_first.data.shape} and {x_second.data.shape}")
    return x_first + x_second


def channel_recalibration(
    x: Tensor,
    first: GatingParams,
    second: GatingParams,
    sqrt_iterations: int = 5,
) -> Tensor:
    """Full module: descriptors -> gates -> per-channel rescale -> sum.

    The second-order branch pools the covariance of the flattened (N, D)
    features and takes its matrix square root before describing channels.
    """
    h, w, d = x.data.shape
    s_first = gate(first_order_descriptor(x), first)
    sigma = centered_covariance(x.reshape(h * w, d))
    root, _ = newton_schulz_sqrt(sigma, iterations=sqrt_iterations)
    s_second = gate(second_order_descriptor(root), second)
    return fuse_multi_order(recalibrate(x, s_first), recalibrate(x, s_second))
