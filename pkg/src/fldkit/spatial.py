"""Multi-order spatial correlations over hourglass feature maps.

A correlation module wraps one hourglass unit: P is the unit's input and
Q its output, both viewed as (N, D) matrices of N = W*H spatial features.
The pairwise map softmax(PP^T + PQ^T + QQ^T) acts as cross-layer
attention on Q, gated by a scalar weight that starts at exactly zero so
the module is initially an identity on Q.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, matmul, softmax_rows
from .errors import ConfigurationError, DimensionError

# a 64x64 feature map already produces a 4096^2 correlation matrix (134 MB);
# anything bigger than full scale is almost certainly a misconfiguration
MAX_POSITIONS = 4096


@dataclass
class SpatialCorrelation:
    """State of one correlation module: learnable gate plus wrapped geometry."""

    positions: int
    channels: int
    weight: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.positions > MAX_POSITIONS:
            raise ConfigurationError(
                f"{self.positions} spatial positions would need a "
                f"{self.positions}x{self.positions} correlation matrix; raise "
                f"spatial.MAX_POSITIONS explicitly if this is intended")
        if self.weight is None:
            self.weight = Tensor(np.zeros(()), requires_grad=True)

    def apply(self, unit_input: Tensor, unit_output: Tensor) -> Tensor:
        return multi_order_fuse(
            second_order_correlations(unit_input, unit_output), unit_output, self)


def second_order_correlations(unit_input: Tensor, unit_output: Tensor) -> Tensor:
    """Row-softmax over the summed intra- and inter-layer feature Gram
    matrices of the hourglass unit's (N, D) input and output."""
    a = unit_input if isinstance(unit_input, Tensor) else Tensor(unit_input)
    b = unit_output if isinstance(unit_output, Tensor) else Tensor(unit_output)
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"input and output must share a shape, got {a.data.shape} and {b.data.shape}")
    if a.data.ndim != 2:
        raise DimensionError(f"expected (N, D) feature matrices, got shape {a.data.shape}")
    bt = b.T
    pairwise = matmul(a, a.T) + matmul(a, bt) + matmul(b, bt)
    return softmax_rows(pairwise)


def multi_order_fuse(correlations: Tensor, unit_output: Tensor,
                     state: SpatialCorrelation) -> Tensor:
    """Gated residual fusion: weight * (correlations @ output) + output."""
    n = unit_output.data.shape[0]
    if correlations.data.shape != (n, n):
        raise DimensionError(
            f"correlation map {correlations.data.shape} does not match {n} feature rows")
    return state.weight * matmul(correlations, unit_output) + unit_output
