"""Procedural face-like training data.

Each sample draws an ellipse contour, two eye arcs, a nose, and two
mouth arcs with seeded random geometry, then places landmarks directly
on those curves.  The landmark layout for a given count L is fixed (it
does not vary with the seed), so every sample of a size shares one
thirteen-boundary scheme mirroring the full-scheme skeleton; slots the
landmark budget cannot fill keep empty chains and encode as far-field
constant boundary maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Sample
from .errors import ContractError
from .heatmaps import BoundaryScheme, LandmarkSet

# boundary slots in scheme order: (name, share of the landmark budget,
# priority for the first thirteen landmarks)
_SLOTS = [
    ("contour", 0.22, 0),
    ("brow_left", 0.07, 5),
    ("brow_right", 0.07, 6),
    ("nose_bridge", 0.06, 7),
    ("nose_bottom", 0.07, 3),
    ("eye_left_up", 0.07, 1),
    ("eye_left_down", 0.05, 8),
    ("eye_right_up", 0.07, 2),
    ("eye_right_down", 0.05, 9),
    ("lip_upper_up", 0.08, 4),
    ("lip_upper_down", 0.05, 10),
    ("lip_lower_up", 0.05, 11),
    ("lip_lower_down", 0.09, 12),
]

MIN_LANDMARKS, MAX_LANDMARKS = 5, 68


def slot_counts(total: int) -> list[int]:
    """Fixed allocation of ``total`` landmarks over the thirteen slots."""
    if not MIN_LANDMARKS <= total <= MAX_LANDMARKS:
        raise ContractError(f"landmark count must be in [{MIN_LANDMARKS}, {MAX_LANDMARKS}], got {total}")
    counts = [0] * len(_SLOTS)
    by_priority = sorted(range(len(_SLOTS)), key=lambda i: _SLOTS[i][2])
    for i in by_priority[: min(total, len(_SLOTS))]:
        counts[i] = 1
    remaining = total - sum(counts)
    if remaining > 0:
        weights = np.array([w for _, w, _ in _SLOTS])
        exact = weights / weights.sum() * remaining
        extra = np.floor(exact).astype(int)
        shortfall = remaining - extra.sum()
        for i in np.argsort(-(exact - extra), kind="stable")[:shortfall]:
            extra[i] += 1
        counts = [c + int(e) for c, e in zip(counts, extra)]
    return counts


def synthetic_scheme(total: int) -> BoundaryScheme:
    """Thirteen-boundary scheme for a synthetic face of ``total`` landmarks."""
    counts = slot_counts(total)
    chains, start = [], 0
    for count in counts:
        chains.append(list(range(start, start + count)))
        start += count
    return BoundaryScheme(name=f"syn{total}", point_count=total, chains=chains)


@dataclass
class _Face:
    center: np.ndarray
    ax: float          # ellipse semi-axes, pixels
    ay: float
    angle: float

    def place(self, local: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center


def _slot_curves(face: _Face) -> dict:
    """Parametric curves (t in [0, 1] -> local (x, y)) for each slot."""
    ax, ay = face.ax, face.ay

    def ellipse(phi_from, phi_to, rx, ry, cx=0.0, cy=0.0):
        def curve(t):
            phi = phi_from + (phi_to - phi_from) * t
            return np.array([cx + rx * np.cos(phi), cy + ry * np.sin(phi)])
        return curve

    def segment(a, b):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)

        def curve(t):
            return a + (b - a) * t
        return curve

    eye_y, eye_dx = -0.25 * ay, 0.42 * ax
    eye_rx, eye_ry = 0.16 * ax, 0.11 * ay
    mouth_y, mouth_rx, mouth_ry = 0.55 * ay, 0.30 * ax, 0.09 * ay
    return {
        "contour": ellipse(0.1 * np.pi, 0.9 * np.pi, ax, ay),
        "brow_left": ellipse(1.15 * np.pi, 1.45 * np.pi, 0.8 * ax, 0.8 * ay),
        "brow_right": ellipse(1.55 * np.pi, 1.85 * np.pi, 0.8 * ax, 0.8 * ay),
        "nose_bridge": segment((0, -0.15 * ay), (0, 0.28 * ay)),
        "nose_bottom": segment((-0.12 * ax, 0.32 * ay), (0.12 * ax, 0.32 * ay)),
        "eye_left_up": ellipse(np.pi, 2 * np.pi, eye_rx, eye_ry, -eye_dx, eye_y),
        "eye_left_down": ellipse(0, np.pi, eye_rx, eye_ry, -eye_dx, eye_y),
        "eye_right_up": ellipse(np.pi, 2 * np.pi, eye_rx, eye_ry, eye_dx, eye_y),
        "eye_right_down": ellipse(0, np.pi, eye_rx, eye_ry, eye_dx, eye_y),
        "lip_upper_up": ellipse(np.pi, 2 * np.pi, mouth_rx, mouth_ry, 0, mouth_y),
        "lip_upper_down": segment((-mouth_rx, mouth_y), (mouth_rx, mouth_y)),
        "lip_lower_up": segment((-mouth_rx, mouth_y + 0.02 * ay), (mouth_rx, mouth_y + 0.02 * ay)),
        "lip_lower_down": ellipse(0, np.pi, mouth_rx, mouth_ry, 0, mouth_y),
    }

_STROKES = {
    "contour": 1.0, "brow_left": 1.0, "brow_right": 1.0,
    "nose_bridge": 0.8, "nose_bottom": 0.8,
    "eye_left_up": 0.9, "eye_left_down": 0.9,
    "eye_right_up": 0.9, "eye_right_down": 0.9,
    "lip_upper_up": 0.95, "lip_upper_down": 0.95,
    "lip_lower_up": 0.95, "lip_lower_down": 0.95,
}

_FILL = 0.25


def _draw_curve(image: np.ndarray, face: _Face, curve, value: float, samples: int = 400) -> None:
    size = image.shape[0]
    t = np.linspace(0.0, 1.0, samples)
    local = np.stack([curve(v) for v in t])
    pts = np.rint(face.place(local)).astype(np.int64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < size) & (pts[:, 1] >= 0) & (pts[:, 1] < size)
    pts = pts[keep]
    image[pts[:, 1], pts[:, 0], :] = value


def synthesize_sample(rng_seed: int, landmarks: int = 5, size: int = 64):
    """Deterministic face image plus its landmark annotations.

    Returns (image, LandmarkSet); the image is (size, size, 3) float64 in
    [0, 1] and every landmark sits on a drawn (foreground) pixel.
    """
    rng = np.random.default_rng(rng_seed)
    face = _Face(
        center=np.array([size * rng.uniform(0.38, 0.62), size * rng.uniform(0.40, 0.60)]),
        ax=size * rng.uniform(0.20, 0.33),
        ay=size * rng.uniform(0.24, 0.38),
        angle=rng.uniform(-0.22, 0.22),
    )
    image = np.zeros((size, size, 3))
    xs, ys = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    c, s = np.cos(-face.angle), np.sin(-face.angle)
    lx = (xs - face.center[0]) * c - (ys - face.center[1]) * s
    ly = (xs - face.center[0]) * s + (ys - face.center[1]) * c
    inside = (lx / face.ax) ** 2 + (ly / face.ay) ** 2 <= 1.0
    image[inside] = _FILL

    curves = _slot_curves(face)
    for name, _, _ in _SLOTS:
        _draw_curve(image, face, curves[name], _STROKES[name])

    counts = slot_counts(landmarks)
    points = []
    for (name, _, _), count in zip(_SLOTS, counts):
        curve = curves[name]
        for i in range(count):
            t = 0.5 if count == 1 else i / (count - 1)
            points.append(face.place(curve(t)[None, :])[0])
    annotations = LandmarkSet(points=np.asarray(points), scheme=f"syn{landmarks}")
    # landmarks must sit on drawn strokes: restamp their own pixels
    pix = np.rint(annotations.points).astype(np.int64)
    keep = (pix[:, 0] >= 0) & (pix[:, 0] < size) & (pix[:, 1] >= 0) & (pix[:, 1] < size)
    image[pix[keep, 1], pix[keep, 0], :] = np.maximum(image[pix[keep, 1], pix[keep, 0], :], 0.75)
    return image, annotations


def synthesize_record(rng_seed: int, landmarks: int = 5, size: int = 64) -> Sample:
    """Sample with a bbox (the face ellipse extent) for metric normalization."""
    image, annotations = synthesize_sample(rng_seed, landmarks, size)
    rng = np.random.default_rng(rng_seed)
    center = np.array([size * rng.uniform(0.38, 0.62), size * rng.uniform(0.40, 0.60)])
    ax = size * rng.uniform(0.20, 0.33)
    ay = size * rng.uniform(0.24, 0.38)
    return Sample(
        image=image,
        landmarks=annotations,
        bbox=(float(center[0] - ax), float(center[1] - ay), float(2 * ax), float(2 * ay)),
    )
