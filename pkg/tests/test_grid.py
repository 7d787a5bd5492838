"""Lattice geometry, interpolation, normalization, and similarity maps.

The bilinear oracle here is intentionally naive: it sums hat-function
contributions over every cell of the grid, sharing no code with the
footprint-based implementation under test.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from densecorr.errors import InvalidInputError
from densecorr.grid import (
    FeatureGrid,
    PixelRegion,
    SimilarityMap,
    bilinear_footprint,
    bilinear_weights,
    cell_center,
    cell_centers,
    cell_to_px,
    descriptor_at,
    normalize_descriptors,
    px_to_cell,
    sample_field,
    similarity_map,
)

from conftest import random_grid


def bilinear_oracle(data, stride, p):
    """O(H*W) hat-function evaluation with border clamp."""
    h, w, d = data.shape
    cx = min(max(p[0] / stride - 0.5, 0.0), w - 1.0)
    cy = min(max(p[1] / stride - 0.5, 0.0), h - 1.0)
    out = np.zeros(d)
    for i in range(h):
        wy = max(0.0, 1.0 - abs(cy - i))
        if wy == 0.0:
            continue
        for j in range(w):
            wx = max(0.0, 1.0 - abs(cx - j))
            if wx:
                out += wy * wx * data[i, j].astype(np.float64)
    return out


class TestFeatureGrid:
    def test_casts_and_freezes(self):
        g = FeatureGrid(np.ones((2, 3, 4)), stride_px=2)
        assert g.data.dtype == np.float32
        assert (g.height_cells, g.width_cells, g.dim) == (2, 3, 4)
        assert g.stride_px == 2.0
        with pytest.raises(ValueError):
            g.data[0, 0, 0] = 5.0

    def test_image_extent(self):
        g = FeatureGrid(np.ones((4, 6, 1)), stride_px=3.5)
        assert g.image_extent_px == (14.0, 21.0)

    @pytest.mark.parametrize(
        "shape", [(1, 3, 2), (3, 1, 2), (3, 3, 0), (3, 3), (2, 2, 2, 2)]
    )
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises(InvalidInputError):
            FeatureGrid(np.ones(shape), stride_px=8)

    def test_rejects_nonfinite_and_bad_stride(self):
        bad = np.ones((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            FeatureGrid(bad, stride_px=8)
        with pytest.raises(InvalidInputError):
            FeatureGrid(np.ones((2, 2, 2)), stride_px=0.0)
        with pytest.raises(InvalidInputError):
            FeatureGrid(np.ones((2, 2, 2)), stride_px=-3)


class TestCellPixelConvert:
    def test_center_formula(self):
        # cell (0,0) at stride 14 sits at pixel (7, 7)
        assert_array_equal(cell_center((0, 0), 14.0), [7.0, 7.0])
        assert_array_equal(cell_center((2, 1), 10.0), [15.0, 25.0])

    def test_round_trip_identity_all_cells(self):
        g = FeatureGrid(np.zeros((5, 7, 1)), stride_px=6.5)
        for i in range(5):
            for j in range(7):
                assert px_to_cell(g, cell_to_px(g, (i, j))) == (i, j)

    def test_tie_goes_to_lower_index(self):
        g = FeatureGrid(np.zeros((4, 4, 1)), stride_px=8.0)
        # pixel x=8 is equidistant from centers at 4 and 12
        assert px_to_cell(g, (8.0, 8.0)) == (0, 0)
        assert px_to_cell(g, (16.0, 24.0)) == (2, 1)

    def test_nearest_cell_exhaustive(self):
        # oracle: argmin over explicit center distances, lower index on ties
        g = FeatureGrid(np.zeros((3, 4, 1)), stride_px=5.0)
        cx, cy = cell_centers(3, 4, 5.0)
        for x in np.linspace(-3.0, 25.0, 57):
            for y in np.linspace(-3.0, 18.0, 43):
                d = (cx - x) ** 2 + (cy - y) ** 2
                expect = np.unravel_index(np.argmin(d), d.shape)
                assert px_to_cell(g, (x, y)) == expect

    def test_out_of_lattice_index_rejected(self):
        g = FeatureGrid(np.zeros((3, 3, 1)), stride_px=8.0)
        with pytest.raises(InvalidInputError):
            cell_to_px(g, (3, 0))
        with pytest.raises(InvalidInputError):
            cell_to_px(g, (0, -1))

    def test_clamps_outside_image(self):
        g = FeatureGrid(np.zeros((3, 3, 1)), stride_px=8.0)
        assert px_to_cell(g, (-100.0, -5.0)) == (0, 0)
        assert px_to_cell(g, (1e4, 1e4)) == (2, 2)


class TestBilinearFootprint:
    def test_weights_sum_to_one(self, rng):
        pts = rng.uniform(-10, 90, size=(200, 2))
        cells, w = bilinear_footprint(pts, 7.0, 6, 8)
        assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert cells.shape == (200, 4, 2)
        assert cells[..., 0].min() >= 0 and cells[..., 0].max() <= 5
        assert cells[..., 1].min() >= 0 and cells[..., 1].max() <= 7

    def test_single_point_form(self):
        cells, w = bilinear_weights((10.0, 5.0), 8.0, 4, 4)
        assert len(cells) == 4 and w.shape == (4,)
        assert_allclose(w.sum(), 1.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidInputError):
            bilinear_footprint([(np.inf, 0.0)], 8.0, 4, 4)


class TestDescriptorAt:
    def test_cell_center_identity(self, rng):
        g = random_grid(rng, h=3, w=4, dim=5, stride=9.0)
        for i, j in [(0, 0), (2, 3), (1, 2)]:
            got = descriptor_at(g, cell_to_px(g, (i, j)))
            assert_allclose(got, g.data[i, j], atol=1e-7)

    def test_horizontal_midpoint_is_mean(self, rng):
        g = random_grid(rng, h=3, w=4, dim=5, stride=8.0)
        mid = (cell_to_px(g, (1, 1)) + cell_to_px(g, (1, 2))) / 2
        expect = (g.data[1, 1].astype(np.float64) + g.data[1, 2]) / 2
        assert_allclose(descriptor_at(g, mid), expect, atol=1e-7)

    def test_matches_bruteforce_3x3(self, rng):
        g = random_grid(rng, h=3, w=3, dim=4, stride=10.0)
        p = np.array([13.7, 21.2])
        assert_allclose(
            descriptor_at(g, p), bilinear_oracle(g.data, 10.0, p), atol=1e-6
        )

    def test_matches_bruteforce_1000_queries(self, rng):
        # random grids, queries spilling past the border to exercise clamping
        worst = 0.0
        for _ in range(10):
            h, w, d = rng.integers(2, 7), rng.integers(2, 7), rng.integers(1, 6)
            g = random_grid(rng, h=h, w=w, dim=d, stride=float(rng.uniform(2, 15)))
            for _ in range(100):
                p = rng.uniform(-1.5 * g.stride_px, (w + 1.5) * g.stride_px, 2)
                got = descriptor_at(g, p)
                ref = bilinear_oracle(g.data, g.stride_px, p)
                worst = max(worst, float(np.abs(got - ref).max()))
        assert worst <= 1e-5

    def test_border_clamp_is_constant_extrapolation(self, rng):
        g = random_grid(rng, h=3, w=3, dim=2, stride=8.0)
        inside = descriptor_at(g, (4.0, 4.0))  # center of cell (0,0)
        assert_allclose(descriptor_at(g, (0.5, 1.0)), inside, atol=1e-7)
        assert_allclose(descriptor_at(g, (-20.0, -20.0)), inside, atol=1e-7)

    def test_sample_field_batches_match_single(self, rng):
        g = random_grid(rng, h=4, w=4, dim=3, stride=6.0)
        pts = rng.uniform(0, 24, size=(17, 2))
        batch = sample_field(g.data, g.stride_px, pts)
        for k, p in enumerate(pts):
            assert_allclose(batch[k], descriptor_at(g, p), atol=1e-12)


class TestNormalizeDescriptors:
    def test_three_four_five(self):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[:, :] = [3.0, 4.0]
        out = normalize_descriptors(FeatureGrid(data, stride_px=8))
        assert_allclose(out.data, np.full((2, 2, 2), [0.6, 0.8]), atol=1e-6)
        assert out.normalized and out.degenerate_cells == ()

    def test_unit_norms(self, rng):
        out = normalize_descriptors(random_grid(rng, h=5, w=5, dim=7))
        norms = np.linalg.norm(out.data.astype(np.float64), axis=2)
        assert_allclose(norms, 1.0, atol=1e-5)

    def test_idempotent(self, rng):
        once = normalize_descriptors(random_grid(rng))
        twice = normalize_descriptors(once)
        assert_allclose(twice.data, once.data, atol=1e-6)

    def test_zero_descriptor_flagged(self):
        data = np.ones((3, 3, 2), dtype=np.float32)
        data[1, 2] = 0.0
        out = normalize_descriptors(FeatureGrid(data, stride_px=4))
        assert out.degenerate_cells == ((1, 2),)
        assert_array_equal(out.data[1, 2], [0.0, 0.0])
        norms = np.linalg.norm(out.data, axis=2)
        assert_allclose(np.delete(norms.ravel(), 5), 1.0, atol=1e-5)


class TestSimilarityMap:
    def test_one_hot_orthogonal(self):
        data = np.zeros((2, 2, 4), dtype=np.float32)
        data[0, 0] = [1, 0, 0, 0]
        data[0, 1] = [0, 1, 0, 0]
        data[1, 0] = [0, 0, 1, 0]
        data[1, 1] = [0, 0, 0, 1]
        sim = similarity_map([0.0, 1.0, 0.0, 0.0], FeatureGrid(data, stride_px=8))
        assert_array_equal(sim.scores, [[0.0, 1.0], [0.0, 0.0]])

    def test_zero_descriptor_zero_map(self, rng):
        g = random_grid(rng, dim=6)
        sim = similarity_map(np.zeros(6), g)
        assert_array_equal(sim.scores, np.zeros((4, 5)))

    def test_matches_bruteforce_loop(self, rng):
        g = random_grid(rng, h=4, w=4, dim=8)
        q = rng.normal(size=8)
        sim = similarity_map(q, g)
        for i in range(4):
            for j in range(4):
                ref = sum(float(q[d]) * float(g.data[i, j, d]) for d in range(8))
                assert abs(sim.scores[i, j] - ref) <= 1e-6

    def test_scaling_linearity(self, rng):
        g = random_grid(rng, dim=5)
        q = rng.normal(size=5)
        s1 = similarity_map(q, g).scores
        s3 = similarity_map(3.0 * q, g).scores
        assert_allclose(s3, 3.0 * s1, rtol=1e-12)

    def test_normalized_scores_bounded(self, rng):
        a = normalize_descriptors(random_grid(rng, h=6, w=6, dim=9))
        for idx in [(0, 0), (3, 4), (5, 5)]:
            s = similarity_map(a.data[idx].astype(np.float64), a).scores
            assert s.max() <= 1 + 1e-5 and s.min() >= -1 - 1e-5

    def test_dim_mismatch_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            similarity_map(np.ones(4), random_grid(rng, dim=3))

    def test_scores_frozen_and_float64(self, rng):
        sim = similarity_map(np.ones(3), random_grid(rng, dim=3))
        assert sim.scores.dtype == np.float64
        with pytest.raises(ValueError):
            sim.scores[0, 0] = 1.0
        with pytest.raises(InvalidInputError):
            SimilarityMap(scores=np.array([[np.nan]] * 2), stride_px=8.0)


class TestPixelRegion:
    def test_full_covers_everything(self, grid_4x5):
        assert PixelRegion().cell_mask(grid_4x5).all()

    def test_bbox_edges_inclusive(self):
        g = FeatureGrid(np.zeros((3, 3, 1)), stride_px=8.0)
        # centers at 4, 12, 20 on both axes; bbox edges hit them exactly
        r = PixelRegion(kind="bbox", bbox=(4.0, 4.0, 12.0, 20.0))
        expect = np.array(
            [[1, 1, 0], [1, 1, 0], [1, 1, 0]], dtype=bool
        )
        assert_array_equal(r.cell_mask(g), expect)

    def test_mask_kind_checks_shape(self, grid_4x5):
        r = PixelRegion(kind="mask", mask=np.ones((4, 5), dtype=bool))
        assert r.cell_mask(grid_4x5).all()
        bad = PixelRegion(kind="mask", mask=np.ones((3, 3), dtype=bool))
        with pytest.raises(InvalidInputError):
            bad.cell_mask(grid_4x5)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="bbox", bbox=(0, 0, 0, 5)),
            dict(kind="bbox", bbox=(2, 2, 1, 5)),
            dict(kind="bbox", bbox=None),
            dict(kind="bbox", bbox=(0, 0, np.nan, 5)),
            dict(kind="mask", mask=None),
            dict(kind="mask", mask=np.ones((2, 2, 2))),
            dict(kind="blob"),
        ],
    )
    def test_invalid_regions_rejected(self, kwargs):
        with pytest.raises(InvalidInputError):
            PixelRegion(**kwargs)
