"""Annotation ingestion and geometric preprocessing.

Covers the pts landmark interchange format (1-indexed coordinates on
disk, 0-indexed in memory), tab-separated dataset manifests, bounding
box crop-and-resize with an invertible affine landmark transform, and
rotation/scale augmentation drawn from truncated Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .heatmaps import LandmarkSet


@dataclass
class AnnotationRecord:
    image_path: str
    pts_path: str
    landmarks: LandmarkSet
    bbox: tuple[float, float, float, float]      # (x, y, w, h) pixels
    split: str

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ContractError(f"bbox must have positive extent, got w={w}, h={h}")

    @property
    def record_id(self) -> str:
        return Path(self.pts_path or self.image_path).stem


def parse_pts(text: str, scheme: str | None = None) -> LandmarkSet:
    """Parse a pts annotation file body.

    Coordinates on disk are 1-indexed; parsing subtracts 1.  The scheme
    defaults to the synthetic family matching the point count.
    """
    n_points = None
    points: list[tuple[float, float]] = []
    in_block = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("version"):
            continue
        if line.startswith("n_points"):
            try:
                n_points = int(line.split(":")[1])
            except (IndexError, ValueError) as exc:
                raise ParseError(f"line {lineno}: bad n_points line {raw!r}") from exc
        elif line == "{":
            in_block = True
        elif line == "}":
            in_block = False
        elif in_block:
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"line {lineno}: expected 'x y', got {raw!r}")
            try:
                points.append((float(parts[0]) - 1.0, float(parts[1]) - 1.0))
            except ValueError as exc:
                raise ParseError(f"line {lineno}: malformed number in {raw!r}") from exc
    if n_points is None:
        raise ParseError("missing n_points header")
    if len(points) != n_points:
        raise ParseError(f"n_points says {n_points} but file has {len(points)} coordinate lines")
    if scheme is None:
        scheme = {68: "W68", 29: "C29", 19: "A19", 98: "F98"}.get(n_points, f"syn{n_points}")
    return LandmarkSet(points=np.asarray(points), scheme=scheme)


def write_pts(landmarks: LandmarkSet) -> str:
    lines = ["version: 1", f"n_points: {len(landmarks)}", "{"]
    for x, y in landmarks.points:
        lines.append(f"{x + 1.0:.10f} {y + 1.0:.10f}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, base_dir: str | Path = ".") -> list[AnnotationRecord]:
    """One record per line: image<TAB>pts<TAB>x,y,w,h<TAB>split."""
    base = Path(base_dir)
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"manifest line {lineno}: expected 4 tab-separated fields")
        image_path, pts_path, bbox_text, split = parts
        try:
            x, y, w, h = (float(v) for v in bbox_text.split(","))
        except ValueError as exc:
            raise ParseError(f"manifest line {lineno}: bad bbox {bbox_text!r}") from exc
        pts_file = base / pts_path
        if not pts_file.exists():
            raise FileNotFoundError(f"manifest line {lineno}: missing pts file {pts_file}")
        records.append(AnnotationRecord(
            image_path=str(base / image_path),
            pts_path=str(pts_file),
            landmarks=parse_pts(pts_file.read_text()),
            bbox=(x, y, w, h),
            split=split,
        ))
    return records


@dataclass
class AffineMap:
    """y = scale * R(angle) @ (p - center) + offset, applied to (x, y) points."""

    center: np.ndarray
    offset: np.ndarray
    angle: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c * self.scale_x, -s * self.scale_x],
                         [s * self.scale_y, c * self.scale_y]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.matrix().T + self.offset

    def invert(self, points: np.ndarray) -> np.ndarray:
        back = (np.asarray(points, dtype=np.float64) - self.offset) @ np.linalg.inv(self.matrix()).T
        return back + self.center


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample image at float coordinates, edge-clamped."""
    h, w = image.shape[:2]
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    fx = np.clip(xs, 0, w - 1) - x0
    fy = np.clip(ys, 0, h - 1) - y0
    if image.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_and_resize(image: np.ndarray, bbox, target: int = 256) -> tuple[np.ndarray, AffineMap]:
    """Bilinear resample of the bbox region to target x target.

    Returns the resampled image and the affine map taking original-image
    landmarks into crop coordinates (its inverse undoes the crop).
    """
    bx, by, bw, bh = (float(v) for v in bbox)
    h, w = image.shape[:2]
    if bx + bw <= 0 or by + bh <= 0 or bx >= w or by >= h:
        raise ContractError(f"bbox {bbox} does not overlap the {w}x{h} image")
    sx, sy = target / bw, target / bh
    # pixel-center convention: the same affine maps landmarks and samples
    transform = AffineMap(
        center=np.array([bx - 0.5, by - 0.5]), offset=np.array([-0.5, -0.5]),
        scale_x=sx, scale_y=sy)
    xs, ys = np.meshgrid(np.arange(target, dtype=np.float64), np.arange(target, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    source = transform.invert(grid)
    sampled = bilinear_sample(np.asarray(image, dtype=np.float64),
                              source[:, 0].reshape(target, target),
                              source[:, 1].reshape(target, target))
    return sampled, transform


def draw_truncated_gaussian(rng: np.random.Generator, sd: float, low: float, high: float) -> float:
    """Gaussian draw rejected until it falls inside (low, high)."""
    for _ in range(1000):
        value = float(rng.normal(0.0, sd))
        if low < value < high:
            return value
    return 0.0


@dataclass
class Sample:
    image: np.ndarray
    landmarks: LandmarkSet
    bbox: tuple[float, float, float, float]


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random rotation in (-60, 60) degrees and bbox scale in (0.8, 1.2),
    both Gaussian-truncated, about the bbox center; landmarks follow."""
    angle = np.deg2rad(draw_truncated_gaussian(rng, 30.0, -60.0, 60.0))
    scale = 1.0 + draw_truncated_gaussian(rng, 0.1, -0.2, 0.2)
    bx, by, bw, bh = sample.bbox
    center = np.array([bx + bw / 2.0, by + bh / 2.0])
    transform = AffineMap(center=center, offset=center, angle=angle,
                          scale_x=scale, scale_y=scale)
    h, w = sample.image.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    source = transform.invert(grid)
    warped = bilinear_sample(np.asarray(sample.image, dtype=np.float64),
                             source[:, 0].reshape(h, w), source[:, 1].reshape(h, w))
    return Sample(
        image=warped,
        landmarks=LandmarkSet(points=transform.apply(sample.landmarks.points),
                              scheme=sample.landmarks.scheme),
        bbox=sample.bbox,
    )
