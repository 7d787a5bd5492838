"""Triangulation properties: empty circumcircles, hull coverage, and the
deterministic point-location rules everything downstream depends on."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from densecorr.errors import InvalidInputError
from densecorr.triangulate import (
    AREA_TOL,
    MERGE_TOL,
    Triangulation,
    delaunay,
    locate_cells,
    signed_area,
    signed_area_batch,
)

from oracles import (
    barycentric,
    circumcircle_violations,
    hull_area,
    interiors_disjoint,
    triangle_area,
)


class TestSignedArea:
    def test_ccw_positive_cw_negative(self):
        assert signed_area((0, 0), (1, 0), (0, 1)) == 0.5
        assert signed_area((0, 0), (0, 1), (1, 0)) == -0.5

    def test_collinear_zero(self):
        assert signed_area((0, 0), (1, 1), (2, 2)) == 0.0

    def test_batch_matches_scalar(self, rng):
        tris = rng.uniform(-5, 5, size=(40, 3, 2))
        batch = signed_area_batch(tris)
        for k in range(40):
            assert batch[k] == signed_area(*tris[k])


class TestDelaunay:
    def test_three_points_one_triangle(self):
        t = delaunay([(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)])
        assert t.n_triangles == 1 and not t.collinear
        assert_array_equal(t.triangles, [[0, 1, 2]])

    def test_unit_square_two_triangles(self):
        t = delaunay([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
        assert t.n_triangles == 2
        assert circumcircle_violations(t.vertices, t.triangles) == 0
        total = sum(
            triangle_area(*t.vertices[tri]) for tri in t.triangles
        )
        assert_allclose(total, 1.0, atol=1e-12)

    def test_collinear_flagged_empty(self):
        t = delaunay([(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)])
        assert t.collinear and t.n_triangles == 0

    def test_fewer_than_three_distinct(self):
        t = delaunay([(0.0, 0.0), (5.0, 5.0), (5.0, 5.0 + 0.5 * MERGE_TOL)])
        assert t.collinear
        assert len(t.vertices) == 2

    def test_duplicate_merge_keeps_first_occurrence(self):
        pts = [(0.0, 0.0), (10.0, 0.0), (10.0 + 1e-7, 1e-7), (0.0, 10.0)]
        t = delaunay(pts)
        assert len(t.vertices) == 3
        assert_array_equal(t.source_index, [0, 1, 1, 2])
        assert_allclose(t.vertices[1], (10.0, 0.0))  # not the later duplicate

    @pytest.mark.parametrize("seed", range(10))
    def test_random_sets_circumcircle_and_coverage(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        pts = rng.uniform(0, 100, size=(rng.integers(4, 60), 2))
        t = delaunay(pts)
        assert circumcircle_violations(t.vertices, t.triangles) == 0
        total = sum(triangle_area(*t.vertices[tri]) for tri in t.triangles)
        assert_allclose(total, hull_area(pts), rtol=0, atol=1e-6)
        assert interiors_disjoint(t.vertices, t.triangles, rng)

    def test_canonical_ordering(self, rng):
        pts = rng.uniform(0, 50, size=(30, 2))
        t = delaunay(pts)
        assert (np.diff(t.triangles, axis=1) > 0).all()  # sorted triples
        order = np.lexsort((t.triangles[:, 2], t.triangles[:, 1], t.triangles[:, 0]))
        assert_array_equal(order, np.arange(t.n_triangles))

    def test_permutation_gives_same_geometry(self, rng):
        pts = rng.uniform(0, 100, size=(25, 2))
        t1 = delaunay(pts)
        perm = rng.permutation(25)
        t2 = delaunay(pts[perm])

        def coord_set(t):
            return {
                tuple(sorted(map(tuple, t.vertices[tri]))) for tri in t.triangles
            }

        assert coord_set(t1) == coord_set(t2)

    def test_rerun_bit_identical(self, rng):
        pts = rng.uniform(0, 100, size=(40, 2))
        t1, t2 = delaunay(pts), delaunay(pts)
        assert_array_equal(t1.vertices, t2.vertices)
        assert_array_equal(t1.triangles, t2.triangles)

    def test_no_slivers(self, rng):
        pts = rng.uniform(0, 100, size=(50, 2))
        t = delaunay(pts)
        for tri in t.triangles:
            assert abs(signed_area(*t.vertices[tri])) >= AREA_TOL

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidInputError):
            delaunay([(np.nan, 0.0), (1.0, 0.0), (0.0, 1.0)])
        with pytest.raises(InvalidInputError):
            delaunay(np.zeros((3, 3)))


class TestLocateCells:
    def tri(self):
        return delaunay([(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)])

    def test_interior_points_match_barycentric_oracle(self, rng):
        pts = rng.uniform(0, 100, size=(40, 2))
        t = delaunay(pts)
        queries = rng.uniform(-10, 110, size=(300, 2))
        got = locate_cells(t, queries)
        for q, o in zip(queries, got):
            containing = [
                k
                for k, tri in enumerate(t.triangles)
                if (barycentric(*t.vertices[tri], q) >= -1e-9).all()
            ]
            expect = min(containing) if containing else -1
            assert o == expect

    def test_outside_hull_is_minus_one(self):
        t = self.tri()
        assert_array_equal(
            locate_cells(t, [(-1.0, 5.0), (5.0, 11.0), (50.0, 50.0)]), [-1, -1, -1]
        )

    def test_shared_edge_takes_lowest_index(self):
        t = self.tri()
        # the square splits along one diagonal; all edge points -> triangle 0
        diag_pts = [(x, x) for x in (2.5, 5.0, 7.5)] + [(x, 10.0 - x) for x in (2.5, 5.0, 7.5)]
        owner = locate_cells(t, np.array(diag_pts, dtype=np.float64))
        on_shared = [
            o
            for p, o in zip(diag_pts, owner)
            if sum(
                (barycentric(*t.vertices[tri], p) >= -1e-9).all()
                for tri in t.triangles
            )
            > 1
        ]
        # one diagonal is shared; (5, 5) sits on it regardless of which
        assert len(on_shared) in (3, 4)
        assert all(o == 0 for o in on_shared)

    def test_vertices_belong_to_lowest_triangle(self):
        t = self.tri()
        owner = locate_cells(t, t.vertices)
        for v, o in zip(t.vertices, owner):
            containing = [
                k
                for k, tri in enumerate(t.triangles)
                if (barycentric(*t.vertices[tri], v) >= -1e-9).all()
            ]
            assert o == min(containing)

    def test_empty_triangulation(self):
        t = delaunay([(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])
        assert_array_equal(locate_cells(t, [(0.0, 0.0)]), [-1])

    def test_chunked_matches_unchunked(self, rng):
        # force several chunks through the same API by using many queries
        pts = rng.uniform(0, 30, size=(12, 2))
        t = delaunay(pts)
        q = rng.uniform(0, 30, size=(5000, 2))
        whole = locate_cells(t, q)
        parts = np.concatenate([locate_cells(t, q[i::7]) for i in range(7)])
        ref = np.concatenate([whole[i::7] for i in range(7)])
        assert_array_equal(parts, ref)
