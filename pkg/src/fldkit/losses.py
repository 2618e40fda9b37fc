"""Probabilistic heatmap losses and the windowed landmark search.

Heatmaps are treated as probability distributions over the frame; the
training objective sums a Jensen-Shannon divergence per boundary map, a
Jensen-Shannon divergence per landmark map, and a Gaussian-similarity
consistency penalty between the decoded landmark and the searched
optimal landmark:

    sum_t JS(bd*_t || bd_t)
      + sum_l [ eta |decoded_l - searched_l|^2 / (2 sigma3^2)
                + JS(lm*_l || lm_l) ]

The search scores every pixel of a window centered on the decoded
landmark with

    exp(|decoded - candidate|^2 / (-2 sigma3^2))
      + lm_prob(candidate) * bd_prob(candidate)

and keeps the argmax.  Raw full-map probabilities are O(1/n^2) and would let
the distance term always win, so by default both probability maps are
rescaled by their window maximum before the product (both terms then
have unit scale); the raw behaviour stays available per configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import LOG_FLOOR, Tensor, _accumulate
from .errors import ContractError, DimensionError
from .heatmaps import Heatmap, LandmarkSet

LN2 = float(np.log(2.0))


@dataclass
class SearchConfig:
    """Search window extent and the objective's scale parameters."""

    window: int = 7
    sigma3: float = 4.0
    eta: float = 10.0
    window_renormalize: bool = True

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ContractError(f"window must be odd and >= 1, got {self.window}")
        if self.sigma3 <= 0:
            raise ContractError(f"sigma3 must be positive, got {self.sigma3}")
        if self.eta < 0:
            raise ContractError(f"eta must be nonnegative, got {self.eta}")


@dataclass
class HeatmapDistribution:
    """Nonnegative per-pixel probabilities summing to one."""

    probabilities: Tensor
    source_kind: str
    degenerate: bool = False


def normalize_to_distribution(heatmap: Heatmap) -> HeatmapDistribution:
    """Floor the map at 1e-12 and divide by its total.

    An all-zero (or all-negative) map has no information to normalize;
    it yields the uniform distribution with a degeneracy flag.
    """
    values = heatmap.values
    if float(values.data.max()) <= LOG_FLOOR:
        n = values.data.size
        return HeatmapDistribution(
            probabilities=Tensor(np.full(values.data.shape, 1.0 / n)),
            source_kind=heatmap.kind,
            degenerate=True,
        )
    floored = values.clamp_min(LOG_FLOOR)
    return HeatmapDistribution(
        probabilities=floored / floored.sum(),
        source_kind=heatmap.kind,
    )


def kl_divergence(p: HeatmapDistribution, q: HeatmapDistribution) -> Tensor:
    """sum p * ln(p/q) in nats, with both log arguments floored at 1e-12."""
    pt, qt = p.probabilities, q.probabilities
    if pt.data.shape != qt.data.shape:
        raise DimensionError(f"distribution shapes differ: {pt.data.shape} vs {qt.data.shape}")
    return (pt * (pt.log() - qt.log())).sum()


def js_divergence(p: HeatmapDistribution, q: HeatmapDistribution) -> Tensor:
    """Symmetric, bounded by ln 2, zero exactly when p equals q."""
    pt, qt = p.probabilities, q.probabilities
    if pt.data.shape != qt.data.shape:
        raise DimensionError(f"distribution shapes differ: {pt.data.shape} vs {qt.data.shape}")
    mid = HeatmapDistribution((pt + qt) * 0.5, p.source_kind)
    return kl_divergence(p, mid) * 0.5 + kl_divergence(q, mid) * 0.5


def heatmap_set_loss(pred: list[Heatmap], gt: list[Heatmap]) -> Tensor:
    """Sum of JS divergences over aligned prediction/ground-truth pairs."""
    if len(pred) != len(gt):
        raise ContractError(f"prediction/ground-truth length mismatch: {len(pred)} vs {len(gt)}")
    total = Tensor(0.0)
    for p_map, g_map in zip(pred, gt):
        total = total + js_divergence(normalize_to_distribution(p_map), normalize_to_distribution(g_map))
    return total


def soft_argmax(heatmap: Heatmap, window: int | None = None) -> tuple[Tensor, Tensor]:
    """Probability-weighted coordinate expectation (x, y); differentiable,
    unlike the plain argmax decoder used at inference.

    With ``window`` set, the expectation runs over a window centered on
    the maximal pixel: a differentiable refinement of the argmax decode.
    The global form is the centroid of the whole map, which on
    multi-modal maps sits between modes and couples the gradient to
    every pixel of the frame.
    """
    values = heatmap.values
    offset_x = offset_y = 0
    if window is not None:
        if window < 1 or window % 2 == 0:
            raise ContractError(f"window must be odd and >= 1, got {window}")
        h, w = values.data.shape
        flat = int(np.nanargmax(values.data))
        cy, cx = np.unravel_index(flat, values.data.shape)
        half = window // 2
        x_lo, x_hi = max(0, cx - half), min(w - 1, cx + half)
        y_lo, y_hi = max(0, cy - half), min(h - 1, cy + half)
        values = _slice2d(values, y_lo, y_hi + 1, x_lo, x_hi + 1)
        offset_x, offset_y = x_lo, y_lo
    floored = values.clamp_min(LOG_FLOOR)
    dist = floored / floored.sum()
    h, w = dist.data.shape
    xs = Tensor(np.tile(np.arange(w, dtype=np.float64) + offset_x, (h, 1)))
    ys = Tensor(np.tile(np.arange(h, dtype=np.float64).reshape(-1, 1) + offset_y, (1, w)))
    return (dist * xs).sum(), (dist * ys).sum()


def _slice2d(tensor: Tensor, y_lo: int, y_hi: int, x_lo: int, x_hi: int) -> Tensor:
    """Differentiable rectangular slice of a rank-2 tensor."""
    full_shape = tensor.data.shape

    def bwd(g, acc):
        grad = np.zeros(full_shape)
        grad[y_lo:y_hi, x_lo:x_hi] = g
        _accumulate(acc, tensor, grad)

    return Tensor._result(tensor.data[y_lo:y_hi, x_lo:x_hi].copy(), (tensor,), bwd, "slice2d")


def consistency_term(decoded, searched: LandmarkSet, config: SearchConfig) -> Tensor:
    """eta * sum over landmarks of |decoded - searched|^2 / (2 sigma3^2).

    ``decoded`` is either a LandmarkSet (evaluation) or a list of
    (x, y) scalar-Tensor pairs from ``soft_argmax`` (training, so the
    penalty carries gradient into the heatmaps); ``searched`` is always
    treated as a constant.
    """
    if isinstance(decoded, LandmarkSet):
        if decoded.scheme != searched.scheme:
            raise ContractError(f"scheme mismatch: {decoded.scheme} vs {searched.scheme}")
        pairs = [(Tensor(p[0]), Tensor(p[1])) for p in decoded.points]
    else:
        pairs = list(decoded)
    if len(pairs) != len(searched):
        raise ContractError(f"landmark count mismatch: {len(pairs)} vs {len(searched)}")
    total = Tensor(0.0)
    for (x_t, y_t), target in zip(pairs, searched.points):
        dx = x_t - float(target[0])
        dy = y_t - float(target[1])
        total = total + dx * dx + dy * dy
    return total * (config.eta / (2.0 * config.sigma3 ** 2))


def search_scores(
    h_fused: Heatmap,
    decoded: tuple[int, int],
    landmark_probs: HeatmapDistribution,
    boundary_probs: HeatmapDistribution,
    config: SearchConfig,
) -> list[tuple[float, int, int]]:
    """Score (value, x, y) for every window pixel around ``decoded``."""
    height, width = h_fused.values.data.shape
    for probs in (landmark_probs, boundary_probs):
        if probs.probabilities.data.shape != (height, width):
            raise DimensionError("probability maps must match the fused heatmap extent")
    gx, gy = int(round(decoded[0])), int(round(decoded[1]))
    if not (0 <= gx < width and 0 <= gy < height):
        raise ContractError(f"decoded landmark ({gx}, {gy}) lies outside the {width}x{height} frame")
    half = config.window // 2
    x_lo, x_hi = max(0, gx - half), min(width - 1, gx + half)
    y_lo, y_hi = max(0, gy - half), min(height - 1, gy + half)
    ph = landmark_probs.probabilities.data[y_lo:y_hi + 1, x_lo:x_hi + 1]
    pb = boundary_probs.probabilities.data[y_lo:y_hi + 1, x_lo:x_hi + 1]
    if config.window_renormalize:
        ph = ph / ph.max() if ph.max() > 0 else ph
        pb = pb / pb.max() if pb.max() > 0 else pb
    inv = -1.0 / (2.0 * config.sigma3 ** 2)
    out = []
    for y in range(y_lo, y_hi + 1):
        for x in range(x_lo, x_hi + 1):
            d2 = (x - gx) ** 2 + (y - gy) ** 2
            score = float(np.exp(d2 * inv) + ph[y - y_lo, x - x_lo] * pb[y - y_lo, x - x_lo])
            out.append((score, x, y))
    return out


def search_optimal(
    h_fused: Heatmap,
    decoded: tuple[int, int],
    landmark_probs: HeatmapDistribution,
    boundary_probs: HeatmapDistribution,
    config: SearchConfig,
) -> tuple[int, int]:
    """Argmax of the search score over the window centered on ``decoded``
    (clipped at frame edges); ties break toward the smallest distance to
    ``decoded``, then row-major order."""
    gx, gy = int(round(decoded[0])), int(round(decoded[1]))
    best = None
    for score, x, y in search_scores(h_fused, decoded, landmark_probs, boundary_probs, config):
        d2 = (x - gx) ** 2 + (y - gy) ** 2
        if best is None or score > best[0] or (score == best[0] and d2 < best[1]):
            best = (score, d2, x, y)
    return best[2], best[3]


def search_decode(
    landmark_map: Heatmap,
    boundary_map: Heatmap,
    scheme,
    landmark_index: int,
    boundary_index: int,
    config: SearchConfig,
) -> tuple[int, int]:
    """Boundary-adaptive decoding: argmax of the fused map refined by the
    windowed search (versus plain argmax of the landmark map alone)."""
    from .heatmaps import decode_argmax, fuse_boundary_adaptive

    fused = fuse_boundary_adaptive(landmark_map, boundary_map, scheme, landmark_index, boundary_index)
    decoded = decode_argmax(fused)
    return search_optimal(
        fused, decoded,
        normalize_to_distribution(landmark_map),
        normalize_to_distribution(boundary_map),
        config)


def total_loss(
    pred_landmark: list[Heatmap],
    pred_boundary: list[Heatmap],
    gt_landmark: list[Heatmap],
    gt_boundary: list[Heatmap],
    decoded,
    searched: LandmarkSet,
    config: SearchConfig,
) -> Tensor:
    """Boundary JS sum + landmark JS sum + consistency penalty."""
    if len(pred_landmark) != len(gt_landmark):
        raise ContractError(
            f"landmark list mismatch: {len(pred_landmark)} vs {len(gt_landmark)}")
    if len(pred_boundary) != len(gt_boundary):
        raise ContractError(
            f"boundary list mismatch: {len(pred_boundary)} vs {len(gt_boundary)}")
    loss = heatmap_set_loss(pred_boundary, gt_boundary)
    loss = loss + heatmap_set_loss(pred_landmark, gt_landmark)
    return loss + consistency_term(decoded, searched, config)
