"""Heatmap codec: ground-truth landmark and boundary heatmap encoding,
boundary-adaptive fusion, and argmax decoding.

Landmark heatmaps are sampled Gaussians peaking at the landmark.
Boundary heatmaps come from an exact Euclidean distance transform of the
rasterized, densely interpolated landmark chain; the encoding is the
piecewise form

    exp(-dist / (2 sigma^2))   if dist < 2 sigma
    xi                         otherwise

with the exponent linear in the distance.  A squared-distance variant is
available behind a flag for comparison, since the linear form tails off
much more slowly than a true Gaussian.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DimensionError, ParseError

SCHEME_POINTS = {"W68": 68, "C29": 29, "A19": 19, "F98": 98}
BOUNDARY_COUNT = 13


@dataclass
class LandmarkSet:
    """Ordered 2-D landmark coordinates plus their annotation scheme.

    Synthetic schemes are named ``syn<L>``; coordinates may lie outside
    the frame for occluded or cropped annotations.
    """

    points: np.ndarray          # (L, 2) float64, (x, y)
    scheme: str

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ContractError(f"landmarks must be (L, 2), got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ContractError("landmark coordinates must be finite")
        expected = SCHEME_POINTS.get(self.scheme)
        if self.scheme.startswith("syn"):
            expected = int(self.scheme[3:])
        if expected is not None and len(self.points) != expected:
            raise ContractError(
                f"scheme {self.scheme} expects {expected} landmarks, got {len(self.points)}")

    def __len__(self) -> int:
        return len(self.points)

    def out_of_frame(self, width: int, height: int) -> np.ndarray:
        """Boolean flags for landmarks outside [0, width) x [0, height)."""
        x, y = self.points[:, 0], self.points[:, 1]
        return (x < 0) | (x >= width) | (y < 0) | (y >= height)


@dataclass
class Heatmap:
    """Single-channel confidence map; values index as [y, x]."""

    values: Tensor
    kind: str                   # landmark | boundary | fused

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.data.ndim != 2:
            raise ContractError(f"heatmap must be 2-D, got shape {self.values.data.shape}")
        if self.kind not in ("landmark", "boundary", "fused"):
            raise ContractError(f"unknown heatmap kind '{self.kind}'")

    @property
    def height(self) -> int:
        return self.values.data.shape[0]

    @property
    def width(self) -> int:
        return self.values.data.shape[1]


@dataclass
class BoundaryScheme:
    """Thirteen ordered landmark chains plus a total landmark -> boundary map."""

    name: str
    point_count: int
    chains: list[list[int]]
    landmark_to_boundary: dict[int, int] = field(default_factory=dict)
    normalization: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.chains) != BOUNDARY_COUNT:
            raise ContractError(f"expected {BOUNDARY_COUNT} boundaries, got {len(self.chains)}")
        for t, chain in enumerate(self.chains):
            for idx in chain:
                if not 0 <= idx < self.point_count:
                    raise ContractError(f"boundary {t} references landmark {idx} out of range")
                self.landmark_to_boundary.setdefault(idx, t)
        missing = [i for i in range(self.point_count) if i not in self.landmark_to_boundary]
        if missing:
            raise ContractError(f"landmarks without a boundary assignment: {missing}")

    @property
    def boundary_count(self) -> int:
        return BOUNDARY_COUNT


def parse_boundary_scheme(text: str, name: str) -> BoundaryScheme:
    """Parse the plain-text scheme grammar.

    Lines are ``<boundary>: i,j,k [wrap]`` for chains (wrap closes the
    chain onto its first index), ``map <landmark>: <boundary>`` for
    landmarks that sit on no chain, ``points: <count>``, and named
    normalization entries such as ``pupil_left: 36,37``.
    """
    chains: dict[int, list[int]] = {}
    explicit: dict[int, int] = {}
    normalization: dict[str, list[int]] = {}
    point_count = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError(f"{name}:{lineno}: expected 'key: values', got {raw!r}")
        key, _, rest = line.partition(":")
        key, rest = key.strip(), rest.strip()
        try:
            if key == "points":
                point_count = int(rest)
            elif key.startswith("map "):
                explicit[int(key[4:])] = int(rest)
            elif key.isdigit():
                wrap = rest.endswith("wrap")
                items = rest[:-4] if wrap else rest
                chain = [int(tok) for tok in items.replace(",", " ").split()]
                if wrap:
                    chain.append(chain[0])
                chains[int(key)] = chain
            else:
                normalization[key] = [int(tok) for tok in rest.replace(",", " ").split()]
        except ValueError as exc:
            raise ParseError(f"{name}:{lineno}: {exc}") from exc
    if point_count is None:
        raise ParseError(f"{name}: missing 'points:' line")
    if sorted(chains) != list(range(BOUNDARY_COUNT)):
        raise ParseError(f"{name}: boundary indices must be exactly 0..{BOUNDARY_COUNT - 1}")
    scheme = BoundaryScheme(
        name=name,
        point_count=point_count,
        chains=[chains[t] for t in range(BOUNDARY_COUNT)],
        landmark_to_boundary=dict(explicit),
        normalization=normalization,
    )
    return scheme


def load_boundary_scheme(scheme: str) -> BoundaryScheme:
    """Load one of the shipped schemes by name, or any scheme file by path."""
    key = scheme.lower()
    if key in ("w68", "c29", "a19", "f98"):
        text = importlib.resources.files("fldkit.schemes").joinpath(f"{key}.txt").read_text()
        return parse_boundary_scheme(text, key.upper())
    path = Path(scheme)
    if not path.exists():
        raise ParseError(f"unknown scheme '{scheme}' and no such file")
    return parse_boundary_scheme(path.read_text(), path.stem.upper())


# -- encoding --------------------------------------------------------------------


def encode_landmark_heatmap(landmark, sigma1, size) -> Heatmap:
    """Gaussian confidence map peaking at the landmark.

    ``sigma1`` may be a Tensor, in which case the map is differentiable
    with respect to it.  Out-of-frame landmarks yield truncated tails.
    """
    width, height = size
    u, v = float(landmark[0]), float(landmark[1])
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    dist2 = (xs[None, :] - u) ** 2 + (ys[:, None] - v) ** 2
    if isinstance(sigma1, Tensor):
        if sigma1.data.size != 1 or float(sigma1.data.reshape(())) <= 0:
            raise ContractError("sigma must be a positive scalar")
        values = (Tensor(-dist2) / (sigma1 * sigma1 * 2.0)).exp()
        return Heatmap(values=values, kind="landmark")
    if sigma1 <= 0:
        raise ContractError(f"sigma must be positive, got {sigma1}")
    return Heatmap(values=Tensor(np.exp(-dist2 / (2.0 * sigma1 ** 2))), kind="landmark")


def interpolate_boundary(chain: np.ndarray, spacing: float = 0.5) -> np.ndarray:
    """Densify a landmark chain into a polyline whose consecutive samples
    are strictly less than one pixel apart; endpoints are preserved."""
    chain = np.asarray(chain, dtype=np.float64)
    if chain.ndim != 2 or chain.shape[1] != 2 or len(chain) < 2:
        raise ContractError(f"a boundary chain needs at least 2 points, got shape {chain.shape}")
    samples = [chain[0]]
    for a, b in zip(chain[:-1], chain[1:]):
        seg = np.linalg.norm(b - a)
        steps = max(1, int(np.ceil(seg / spacing)))
        for i in range(1, steps):
            samples.append(a + (b - a) * (i / steps))
        samples.append(b)
    return np.asarray(samples)


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas: exact 1-D squared-distance transform."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    z[0], z[1] = -np.inf, np.inf
    k = 0
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def rasterize(points: np.ndarray, size) -> np.ndarray:
    """Nearest-integer rasterization of sample points into a binary mask;
    points outside the frame are dropped."""
    width, height = size
    mask = np.zeros((height, width), dtype=bool)
    if len(points):
        ij = np.rint(np.asarray(points, dtype=np.float64)).astype(np.int64)
        keep = (ij[:, 0] >= 0) & (ij[:, 0] < width) & (ij[:, 1] >= 0) & (ij[:, 1] < height)
        ij = ij[keep]
        mask[ij[:, 1], ij[:, 0]] = True
    return mask


def distance_transform(boundary_points: np.ndarray, size) -> np.ndarray:
    """Exact per-pixel Euclidean distance to the nearest rasterized
    boundary pixel (zero on the boundary itself)."""
    mask = rasterize(boundary_points, size)
    if not mask.any():
        raise ContractError("no boundary point falls inside the frame")
    height, width = mask.shape
    inf = float(width * width + height * height + 1)
    sq = np.where(mask, 0.0, inf)
    for i in range(height):
        sq[i, :] = _edt_1d(sq[i, :])
    for j in range(width):
        sq[:, j] = _edt_1d(sq[:, j])
    return np.sqrt(sq)


def encode_boundary_heatmap(dist: np.ndarray, sigma2: float, xi: float,
                            squared: bool = False) -> Heatmap:
    """Piecewise boundary confidence from a distance map.

    The near branch applies strictly below dist = 2*sigma2; everything at
    or beyond it gets the small constant xi.  ``squared`` switches the
    exponent to dist^2 (the conventional Gaussian profile).
    """
    if sigma2 <= 0:
        raise ContractError(f"sigma must be positive, got {sigma2}")
    floor_gap = np.exp(-1.0 / sigma2)
    if not 0 <= xi < floor_gap:
        raise ContractError(
            f"xi must lie in [0, exp(-1/sigma2)) = [0, {floor_gap:.6f}), got {xi}")
    dist = np.asarray(dist, dtype=np.float64)
    exponent = dist ** 2 if squared else dist
    values = np.where(dist < 2.0 * sigma2, np.exp(-exponent / (2.0 * sigma2 ** 2)), xi)
    return Heatmap(values=Tensor(values), kind="boundary")


def encode_boundary_from_chain(landmarks: LandmarkSet, scheme: BoundaryScheme,
                               boundary_index: int, size, sigma2: float, xi: float,
                               squared: bool = False) -> Heatmap:
    """Ground-truth boundary heatmap for one chain; a chain with a single
    landmark is rasterized directly, an empty chain encodes the far-field
    constant everywhere."""
    chain = scheme.chains[boundary_index]
    if not chain:
        width, height = size
        return Heatmap(values=Tensor(np.full((height, width), xi)), kind="boundary")
    pts = landmarks.points[chain]
    dense = pts if len(pts) == 1 else interpolate_boundary(pts)
    return encode_boundary_heatmap(distance_transform(dense, size), sigma2, xi, squared)


def encode_ground_truth(landmarks: LandmarkSet, scheme: BoundaryScheme, size,
                        sigma1: float = 3.0, sigma2: float = 3.0, xi: float = 0.01,
                        ) -> tuple[list[Heatmap], list[Heatmap]]:
    """All L landmark maps and T boundary maps for one annotated sample."""
    landmark_maps = [encode_landmark_heatmap(p, sigma1, size) for p in landmarks.points]
    boundary_maps = [
        encode_boundary_from_chain(landmarks, scheme, t, size, sigma2, xi)
        for t in range(scheme.boundary_count)
    ]
    return landmark_maps, boundary_maps


# -- fusion and decoding ------------------------------------------------------------


def clamp01(values: np.ndarray) -> np.ndarray:
    return np.clip(values, 0.0, 1.0)


def fuse_boundary_adaptive(landmark_map: Heatmap, boundary_map: Heatmap,
                           scheme: BoundaryScheme, landmark_index: int,
                           boundary_index: int) -> Heatmap:
    """Pointwise product of a landmark map with its boundary map, both
    clamped to [0, 1] first (network outputs are unbounded)."""
    expected = scheme.landmark_to_boundary[landmark_index]
    if boundary_index != expected:
        raise ContractError(
            f"landmark {landmark_index} belongs to boundary {expected}, got {boundary_index}")
    if landmark_map.values.data.shape != boundary_map.values.data.shape:
        raise DimensionError(
            f"heatmap shapes differ: {landmark_map.values.data.shape} "
            f"vs {boundary_map.values.data.shape}")
    fused = clamp01(landmark_map.values.data) * clamp01(boundary_map.values.data)
    return Heatmap(values=Tensor(fused), kind="fused")


def decode_argmax(heatmap: Heatmap) -> tuple[int, int]:
    """Pixel coordinates (x, y) of the maximal value; ties resolve to the
    first occurrence in row-major scan order."""
    values = heatmap.values.data
    if np.isnan(values).all():
        raise ContractError("cannot decode an all-NaN heatmap")
    flat = np.nanargmax(values)
    y, x = np.unravel_index(flat, values.shape)
    return int(x), int(y)
