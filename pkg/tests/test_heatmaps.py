"""Heatmap codec tests: encoders against per-pixel formula oracles, the
distance transform against a brute-force nearest-point scan."""

import numpy as np
import pytest

from fldkit.autodiff import Tensor, finite_diff_check
from fldkit.errors import ContractError, ParseError
from fldkit.heatmaps import (
    BOUNDARY_COUNT,
    BoundaryScheme,
    Heatmap,
    LandmarkSet,
    decode_argmax,
    distance_transform,
    encode_boundary_heatmap,
    encode_ground_truth,
    encode_landmark_heatmap,
    fuse_boundary_adaptive,
    interpolate_boundary,
    load_boundary_scheme,
    parse_boundary_scheme,
    rasterize,
)


def brute_force_distance(mask):
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = np.sqrt(((xs - x) ** 2 + (ys - y) ** 2).min())
    return out


class TestEncodeLandmark:
    def test_peak_is_one_at_integral_landmark(self):
        hm = encode_landmark_heatmap((10, 7), 3.0, (32, 32))
        assert hm.values.data[7, 10] == 1.0

    def test_value_at_one_sigma(self):
        hm = encode_landmark_heatmap((10, 10), 3.0, (32, 32))
        np.testing.assert_allclose(hm.values.data[10, 13], np.exp(-0.5), atol=1e-12)

    def test_full_map_matches_formula_oracle(self):
        sigma = 3.0
        hm = encode_landmark_heatmap((10, 10), sigma, (32, 32))
        oracle = np.zeros((32, 32))
        for y in range(32):
            for x in range(32):
                oracle[y, x] = np.exp(-((x - 10) ** 2 + (y - 10) ** 2) / (2 * sigma ** 2))
        np.testing.assert_allclose(hm.values.data, oracle, atol=1e-12)

    def test_out_of_frame_landmark_truncates(self):
        hm = encode_landmark_heatmap((-5, -5), 3.0, (16, 16))
        assert hm.values.data.max() < 1.0
        assert np.isfinite(hm.values.data).all()

    def test_values_in_unit_interval(self):
        hm = encode_landmark_heatmap((3.7, 9.2), 3.0, (32, 32))
        assert hm.values.data.min() >= 0.0 and hm.values.data.max() <= 1.0

    def test_argmax_at_nearest_integer_pixel(self):
        hm = encode_landmark_heatmap((10.3, 6.8), 3.0, (32, 32))
        assert decode_argmax(hm) == (10, 7)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ContractError):
            encode_landmark_heatmap((5, 5), 0.0, (16, 16))

    def test_differentiable_in_sigma(self):
        def f(s):
            return encode_landmark_heatmap((5, 5), s.reshape(()), (16, 16)).values.sum()

        assert finite_diff_check(f, np.array([3.0])) < 1e-5


class TestInterpolateBoundary:
    def test_collinear_chain_contains_integer_samples(self):
        samples = interpolate_boundary(np.array([[0.0, 0.0], [4.0, 0.0]]))
        got = {tuple(p) for p in samples}
        for k in range(5):
            assert (float(k), 0.0) in got

    def test_single_point_rejected(self):
        with pytest.raises(ContractError):
            interpolate_boundary(np.array([[1.0, 1.0]]))

    def test_consecutive_samples_below_one_pixel(self):
        rng = np.random.default_rng(80)
        chain = rng.uniform(0, 30, size=(5, 2))
        samples = interpolate_boundary(chain)
        gaps = np.linalg.norm(np.diff(samples, axis=0), axis=1)
        assert gaps.max() < 1.0

    def test_endpoints_preserved(self):
        rng = np.random.default_rng(81)
        chain = rng.uniform(0, 30, size=(4, 2))
        samples = interpolate_boundary(chain)
        np.testing.assert_array_equal(samples[0], chain[0])
        np.testing.assert_array_equal(samples[-1], chain[-1])

    def test_samples_lie_on_segments(self):
        rng = np.random.default_rng(82)
        chain = rng.uniform(0, 30, size=(5, 2))
        samples = interpolate_boundary(chain)
        for p in samples:
            dmin = np.inf
            for a, b in zip(chain[:-1], chain[1:]):
                ab = b - a
                t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1)
                dmin = min(dmin, np.linalg.norm(p - (a + t * ab)))
            assert dmin < 1e-9


class TestDistanceTransform:
    def test_zero_on_boundary(self):
        pts = np.array([[3.0, 4.0], [10.0, 12.0]])
        dist = distance_transform(pts, (16, 16))
        assert dist[4, 3] == 0.0 and dist[12, 10] == 0.0

    def test_three_four_five_triangle(self):
        dist = distance_transform(np.array([[0.0, 0.0]]), (8, 8))
        assert dist[4, 3] == 5.0

    def test_matches_brute_force_on_random_boundaries(self):
        rng = np.random.default_rng(83)
        for _ in range(5):
            chain = rng.uniform(2, 30, size=(4, 2))
            dense = interpolate_boundary(chain)
            dist = distance_transform(dense, (32, 32))
            oracle = brute_force_distance(rasterize(dense, (32, 32)))
            np.testing.assert_allclose(dist, oracle, atol=1e-9)

    def test_empty_boundary_rejected(self):
        with pytest.raises(ContractError):
            distance_transform(np.array([[100.0, 100.0]]), (16, 16))

    def test_one_lipschitz_between_neighbours(self):
        rng = np.random.default_rng(84)
        dense = interpolate_boundary(rng.uniform(0, 30, size=(5, 2)))
        dist = distance_transform(dense, (32, 32))
        assert np.abs(np.diff(dist, axis=0)).max() <= 1.0 + 1e-9
        assert np.abs(np.diff(dist, axis=1)).max() <= 1.0 + 1e-9


class TestEncodeBoundary:
    def test_zero_distance_maps_to_one(self):
        hm = encode_boundary_heatmap(np.zeros((4, 4)), 3.0, 0.01)
        np.testing.assert_array_equal(hm.values.data, np.ones((4, 4)))

    def test_branch_boundary_is_strict(self):
        sigma = 3.0
        dist = np.array([[2 * sigma]])
        hm = encode_boundary_heatmap(dist, sigma, 0.01)
        assert hm.values.data[0, 0] == 0.01

    def test_near_branch_closed_form(self):
        hm = encode_boundary_heatmap(np.array([[3.0]]), 3.0, 0.01)
        np.testing.assert_allclose(hm.values.data[0, 0], np.exp(-1.0 / 6.0), atol=1e-12)

    def test_near_branch_strictly_decreasing_and_above_xi(self):
        sigma, xi = 3.0, 0.01
        dist = np.linspace(0, 2 * sigma - 1e-9, 50).reshape(1, -1)
        vals = encode_boundary_heatmap(dist, sigma, xi).values.data[0]
        assert np.all(np.diff(vals) < 0)
        assert vals.min() > xi

    def test_squared_variant(self):
        hm = encode_boundary_heatmap(np.array([[3.0]]), 3.0, 0.01, squared=True)
        np.testing.assert_allclose(hm.values.data[0, 0], np.exp(-0.5), atol=1e-12)

    def test_xi_range_enforced(self):
        with pytest.raises(ContractError):
            encode_boundary_heatmap(np.zeros((2, 2)), 3.0, 0.9)


class TestFuseAndDecode:
    def scheme(self):
        return load_boundary_scheme("w68")

    def test_all_ones_boundary_is_identity(self):
        hm = encode_landmark_heatmap((5, 5), 3.0, (16, 16))
        ones = Heatmap(values=Tensor(np.ones((16, 16))), kind="boundary")
        fused = fuse_boundary_adaptive(hm, ones, self.scheme(), 0, 0)
        np.testing.assert_array_equal(fused.values.data, hm.values.data)

    def test_zero_absorbs(self):
        hm = encode_landmark_heatmap((5, 5), 3.0, (16, 16))
        zeros = Heatmap(values=Tensor(np.zeros((16, 16))), kind="boundary")
        fused = fuse_boundary_adaptive(hm, zeros, self.scheme(), 0, 0)
        np.testing.assert_array_equal(fused.values.data, np.zeros((16, 16)))

    def test_wrong_boundary_index_rejected(self):
        hm = encode_landmark_heatmap((5, 5), 3.0, (16, 16))
        with pytest.raises(ContractError):
            fuse_boundary_adaptive(hm, hm, self.scheme(), 0, 5)

    def test_fused_bounded_by_min_and_nonnegative(self):
        rng = np.random.default_rng(85)
        a = Heatmap(values=Tensor(rng.uniform(-0.5, 1.5, (8, 8))), kind="landmark")
        b = Heatmap(values=Tensor(rng.uniform(-0.5, 1.5, (8, 8))), kind="boundary")
        fused = fuse_boundary_adaptive(a, b, self.scheme(), 1, 0).values.data
        ca, cb = np.clip(a.values.data, 0, 1), np.clip(b.values.data, 0, 1)
        assert np.all(fused <= np.minimum(ca, cb) + 1e-15)
        assert np.all(fused >= 0)

    def test_fused_argmax_matches_landmark_argmax_on_ground_truth(self):
        # a landmark on its boundary keeps its peak after fusion
        scheme = self.scheme()
        landmarks = LandmarkSet(points=_spread_landmarks(68, 32), scheme="W68")
        lm, bm = encode_ground_truth(landmarks, scheme, (32, 32))
        for idx in (0, 8, 36, 48):
            t = scheme.landmark_to_boundary[idx]
            fused = fuse_boundary_adaptive(lm[idx], bm[t], scheme, idx, t)
            scan = np.unravel_index(np.argmax(fused.values.data), (32, 32))
            assert decode_argmax(fused) == (scan[1], scan[0]) == decode_argmax(lm[idx])

    def test_decode_ties_break_row_major(self):
        assert decode_argmax(Heatmap(values=Tensor(np.ones((4, 4))), kind="landmark")) == (0, 0)

    def test_decode_all_nan_rejected(self):
        # NaN cannot enter through Tensor construction, so forge the field
        hm = Heatmap(values=Tensor(np.zeros((4, 4))), kind="landmark")
        hm.values.data = np.full((4, 4), np.nan)
        with pytest.raises(ContractError):
            decode_argmax(hm)

    def test_roundtrip_exact_for_interior_integral_landmarks(self):
        for u in range(1, 31, 7):
            for v in range(1, 31, 5):
                hm = encode_landmark_heatmap((u, v), 3.0, (32, 32))
                assert decode_argmax(hm) == (u, v)

    def test_decode_matches_full_scan_oracle(self):
        rng = np.random.default_rng(86)
        for _ in range(20):
            values = rng.uniform(0, 1, (12, 9))
            best, best_xy = -np.inf, None
            for y in range(12):
                for x in range(9):
                    if values[y, x] > best:
                        best, best_xy = values[y, x], (x, y)
            assert decode_argmax(Heatmap(values=Tensor(values), kind="landmark")) == best_xy


class TestSchemes:
    @pytest.mark.parametrize("name,points", [("w68", 68), ("c29", 29), ("a19", 19), ("f98", 98)])
    def test_shipped_schemes_are_total_with_13_boundaries(self, name, points):
        scheme = load_boundary_scheme(name)
        assert scheme.boundary_count == BOUNDARY_COUNT == 13
        assert scheme.point_count == points
        assert sorted(scheme.landmark_to_boundary) == list(range(points))
        assert all(0 <= t < 13 for t in scheme.landmark_to_boundary.values())

    def test_w68_chains_cover_output_head(self):
        scheme = load_boundary_scheme("w68")
        assert scheme.point_count + scheme.boundary_count == 81

    def test_wrap_token_closes_chain(self):
        text = "points: 4\n" + "\n".join(f"{t}: 0,1" for t in range(12)) + "\n12: 0,1,2,3 wrap\n"
        scheme = parse_boundary_scheme(text, "test")
        assert scheme.chains[12] == [0, 1, 2, 3, 0]

    def test_missing_boundary_rejected(self):
        with pytest.raises(ParseError):
            parse_boundary_scheme("points: 4\n0: 0,1,2,3\n", "test")

    def test_uncovered_landmark_rejected(self):
        text = "points: 5\n" + "\n".join(f"{t}: 0,1,2,3" for t in range(13))
        with pytest.raises(ContractError):
            parse_boundary_scheme(text, "test")


def _spread_landmarks(count, size):
    """Deterministic landmark spread across a frame, none on the border."""
    rng = np.random.default_rng(99)
    return rng.uniform(2, size - 3, size=(count, 2)).round()


class TestLandmarkSet:
    def test_scheme_count_enforced(self):
        with pytest.raises(ContractError):
            LandmarkSet(points=np.zeros((10, 2)), scheme="W68")

    def test_synthetic_scheme_counts(self):
        ls = LandmarkSet(points=np.zeros((5, 2)), scheme="syn5")
        assert len(ls) == 5

    def test_out_of_frame_flags(self):
        ls = LandmarkSet(points=np.array([[-1.0, 5.0], [3.0, 3.0], [70.0, 2.0]]), scheme="syn3")
        np.testing.assert_array_equal(ls.out_of_frame(64, 64), [True, False, True])
