import numpy as np
import pytest

from poetloc import correlation as C
from poetloc.encoders import FeatureMap
from poetloc.gradcheck import check_gradients
from poetloc.tensor import Tensor, make_rng


def fmap(arr):
    return FeatureMap(Tensor(np.asarray(arr, dtype=np.float64)))


def brute_force_volume(a, b, d):
    """Straight transcription of the definition: loop everything."""
    h, w, n = a.shape
    offsets = C.displacement_offsets(d)
    out = np.zeros((h, w, len(offsets)))
    for y in range(h):
        for x in range(w):
            for ci, (dy, dx) in enumerate(offsets):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    out[y, x, ci] = np.dot(a[y, x], b[yy, xx]) / n
    return out


class TestMaxDisplacement:
    def test_values(self):
        assert C.max_displacement_pixels(0) == 0
        assert C.max_displacement_pixels(1) == 64
        assert C.max_displacement_pixels(4) == 256

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            C.max_displacement_pixels(-1)


class TestOffsets:
    def test_channel_count_is_odd_window_squared(self):
        for d in range(4):
            assert len(C.displacement_offsets(d)) == (2 * d + 1) ** 2

    def test_row_major_order(self):
        assert C.displacement_offsets(1) == [
            (-1, -1), (-1, 0), (-1, 1),
            (0, -1), (0, 0), (0, 1),
            (1, -1), (1, 0), (1, 1),
        ]


class TestComputeCostVolume:
    def test_unit_features_give_unit_costs_in_bounds(self):
        ones = np.ones((2, 3, 8))
        cv = C.compute_cost_volume(fmap(ones), fmap(ones), 1)
        expected = brute_force_volume(ones, ones, 1)
        assert np.array_equal(cv.values.data, expected)
        # spot-check the padding semantics: the corner cell has no up-left
        # neighbor but a full center hit
        assert cv.values.data[0, 0, 0] == 0.0
        assert cv.values.data[0, 0, 4] == 1.0

    def test_orthogonal_features_give_zero(self):
        rng = make_rng(1)
        a = np.zeros((2, 3, 8))
        b = np.zeros((2, 3, 8))
        a[:, :, :4] = rng.normal(size=(2, 3, 4))
        b[:, :, 4:] = rng.normal(size=(2, 3, 4))
        cv = C.compute_cost_volume(fmap(a), fmap(b), 1)
        assert np.array_equal(cv.values.data, np.zeros((2, 3, 9)))

    def test_matches_brute_force(self):
        rng = make_rng(2)
        a = rng.normal(size=(2, 3, 8))
        b = rng.normal(size=(2, 3, 8))
        cv = C.compute_cost_volume(fmap(a), fmap(b), 1)
        assert np.allclose(cv.values.data, brute_force_volume(a, b, 1), atol=1e-12)

    def test_matches_brute_force_radius_two(self):
        rng = make_rng(3)
        a = rng.normal(size=(4, 5, 6))
        b = rng.normal(size=(4, 5, 6))
        cv = C.compute_cost_volume(fmap(a), fmap(b), 2)
        assert np.allclose(cv.values.data, brute_force_volume(a, b, 2), atol=1e-12)

    def test_radius_zero_is_a_plain_dot(self):
        rng = make_rng(4)
        a = rng.normal(size=(3, 3, 5))
        b = rng.normal(size=(3, 3, 5))
        cv = C.compute_cost_volume(fmap(a), fmap(b), 0)
        assert cv.channels == 1
        assert np.allclose(cv.values.data[:, :, 0], (a * b).sum(axis=2) / 5, atol=1e-12)

    def test_radius_larger_than_grid_pads_with_zeros(self):
        rng = make_rng(5)
        a = rng.normal(size=(2, 3, 4))
        cv = C.compute_cost_volume(fmap(a), fmap(a), 4)
        assert cv.channels == 81
        assert np.allclose(cv.values.data, brute_force_volume(a, a, 4), atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            C.compute_cost_volume(fmap(np.ones((2, 3, 8))), fmap(np.ones((2, 3, 7))), 1)

    def test_swap_transposes_displacements(self):
        rng = make_rng(6)
        a = rng.normal(size=(4, 5, 6))
        b = rng.normal(size=(4, 5, 6))
        fwd = C.compute_cost_volume(fmap(a), fmap(b), 2).values.data
        rev = C.compute_cost_volume(fmap(b), fmap(a), 2).values.data
        offsets = C.displacement_offsets(2)
        for ci, (dy, dx) in enumerate(offsets):
            cj = offsets.index((-dy, -dx))
            for y in range(4):
                for x in range(5):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < 4 and 0 <= xx < 5:
                        assert abs(fwd[y, x, ci] - rev[yy, xx, cj]) < 1e-12

    def test_bilinear_in_first_argument(self):
        rng = make_rng(7)
        a = rng.normal(size=(2, 3, 8))
        b = rng.normal(size=(2, 3, 8))
        base = C.compute_cost_volume(fmap(a), fmap(b), 1).values.data
        scaled = C.compute_cost_volume(fmap(2.5 * a), fmap(b), 1).values.data
        assert np.allclose(scaled, 2.5 * base, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = make_rng(8)
        a = rng.normal(size=(2, 2, 3))
        b = rng.normal(size=(2, 2, 3))
        weights = rng.normal(size=(2, 2, 9))

        def build(at, bt):
            cv = C.compute_cost_volume(FeatureMap(at), FeatureMap(bt), 1)
            return (cv.values * Tensor(weights)).sum()

        check_gradients(build, [a, b])

    def test_float32_volume_stays_float32(self):
        a = Tensor(np.ones((2, 3, 4), dtype=np.float32))
        cv = C.compute_cost_volume(FeatureMap(a), FeatureMap(a), 1)
        assert cv.values.dtype == np.float32
