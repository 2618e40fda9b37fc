"""Evaluation metrics: normalized mean error under three normalizations,
failure rate at a strict threshold, and cumulative error distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .heatmaps import BoundaryScheme, LandmarkSet

FAILURE_THRESHOLD = 0.10

NORMALIZATIONS = ("inter_pupil", "inter_ocular", "face_size")


def _ring_centroid(points: np.ndarray, indices: list[int]) -> np.ndarray:
    return points[indices].mean(axis=0)


def normalization_length(
    gt: LandmarkSet,
    normalization: str,
    scheme: BoundaryScheme | None = None,
    bbox=None,
) -> float:
    """Reference length dividing the raw pixel error.

    inter_pupil: distance between the eye-ring centroids; inter_ocular:
    distance between the outer eye corners; face_size: geometric mean of
    the ground-truth bbox extent.
    """
    if normalization == "face_size":
        if bbox is None:
            raise ContractError("face_size normalization needs the ground-truth bbox")
        _, _, w, h = bbox
        length = float(np.sqrt(w * h))
    elif normalization in ("inter_pupil", "inter_ocular"):
        if scheme is None or not scheme.normalization:
            raise ContractError(f"{normalization} normalization needs scheme index tables")
        tables = scheme.normalization
        if normalization == "inter_pupil":
            left = _ring_centroid(gt.points, tables["pupil_left"])
            right = _ring_centroid(gt.points, tables["pupil_right"])
        else:
            left = gt.points[tables["corner_left"][0]]
            right = gt.points[tables["corner_right"][0]]
        length = float(np.linalg.norm(left - right))
    else:
        raise ContractError(f"unknown normalization '{normalization}'")
    if length <= 0:
        raise ContractError(f"{normalization} reference length is zero")
    return length


def nme(
    pred: LandmarkSet,
    gt: LandmarkSet,
    normalization: str,
    scheme: BoundaryScheme | None = None,
    bbox=None,
) -> float:
    """Mean landmark Euclidean error over the normalization length."""
    if pred.scheme != gt.scheme:
        raise ContractError(f"scheme mismatch: {pred.scheme} vs {gt.scheme}")
    if len(pred) != len(gt):
        raise ContractError(f"landmark count mismatch: {len(pred)} vs {len(gt)}")
    errors = np.linalg.norm(pred.points - gt.points, axis=1)
    return float(errors.mean() / normalization_length(gt, normalization, scheme, bbox))


def failure_rate(per_image_nme, threshold: float = FAILURE_THRESHOLD) -> float:
    """Fraction of images with error strictly above the threshold."""
    values = np.asarray(list(per_image_nme), dtype=np.float64)
    if values.size == 0:
        raise ContractError("failure rate of an empty list is undefined")
    return float((values > threshold).sum() / values.size)


def ced_curve(per_image_nme, max_threshold: float, steps: int):
    """Evenly spaced (threshold, fraction <= threshold) pairs."""
    values = np.asarray(list(per_image_nme), dtype=np.float64)
    if values.size == 0:
        raise ContractError("CED of an empty list is undefined")
    if steps < 2:
        raise ContractError(f"CED needs at least 2 steps, got {steps}")
    thresholds = np.linspace(0.0, max_threshold, steps)
    return [(float(t), float((values <= t).sum() / values.size)) for t in thresholds]


@dataclass
class EvalReport:
    per_image_nme: list[float]
    mean_nme: float
    failure_rate: float
    ced_points: list[tuple[float, float]]
    normalization: str = ""
    record_ids: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, per_image_nme, normalization: str = "",
              record_ids=None, ced_steps: int = 50) -> "EvalReport":
        values = [float(v) for v in per_image_nme]
        if not values:
            raise ContractError("cannot build a report from zero records")
        # the curve must close at fraction 1, so it extends to the worst error
        top = max(max(values), FAILURE_THRESHOLD)
        return cls(
            per_image_nme=values,
            mean_nme=float(np.mean(values)),
            failure_rate=failure_rate(values),
            ced_points=ced_curve(values, top, ced_steps),
            normalization=normalization,
            record_ids=list(record_ids or []),
        )

    def to_text(self) -> str:
        lines = [
            f"normalization: {self.normalization}",
            f"records: {len(self.per_image_nme)}",
            f"mean_nme: {self.mean_nme:.17g}",
            f"failure_rate: {self.failure_rate:.17g}",
            "ced:",
        ]
        lines += [f"  {t:.17g}\t{f:.17g}" for t, f in self.ced_points]
        if self.record_ids:
            lines.append("per_record:")
            lines += [f"  {rid}\t{v:.17g}" for rid, v in zip(self.record_ids, self.per_image_nme)]
        return "\n".join(lines) + "\n"

    def ced_table(self) -> str:
        return "".join(f"{t:.17g}\t{f:.17g}\n" for t, f in self.ced_points)
