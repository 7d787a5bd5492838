"""Flow clustering, BIC merging, and anchored filtering.

The BIC oracle below recomputes the mixture criterion from raw member
displacements (not from the package's sufficient statistics), so the greedy
merge loop is checked against an independent likelihood evaluation.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from densecorr.clustering import (
    VARIANCE_FLOOR,
    anchor_filter,
    bic_merge,
    cluster_regions,
    kmeans_flow,
)
from densecorr.errors import InvalidInputError
from densecorr.matching import CorrespondenceSet
from densecorr.warp import DisplacementField


def field_from_blobs(rng, blob_means, per_blob=30, jitter=1.0, hw=(10, 12)):
    """Displacement field whose valid cells form labeled displacement blobs."""
    h, w = hw
    n = len(blob_means) * per_blob
    assert n <= h * w
    vectors = np.zeros((h, w, 2))
    valid = np.zeros((h, w), dtype=bool)
    cells = rng.permutation(h * w)[:n]
    truth = np.empty(n, dtype=np.int64)
    for idx, lin in enumerate(cells):
        b = idx % len(blob_means)
        truth[idx] = b
        i, j = divmod(lin, w)
        valid[i, j] = True
        vectors[i, j] = blob_means[b] + rng.uniform(-jitter, jitter, 2)
    return DisplacementField(vectors, valid, 8.0)


def bic_oracle(assignment, field):
    """Independent BIC: recompute from raw displacements per cluster."""
    ids = np.unique(assignment[assignment >= 0])
    x = field.vectors
    n_total = int((assignment >= 0).sum())
    loglik = 0.0
    for c in ids:
        pts = x[assignment == c]
        mu = pts.mean(axis=0)
        sse = float(((pts - mu) ** 2).sum())
        var = max(sse / (2.0 * len(pts)), VARIANCE_FLOOR)
        loglik += len(pts) * (
            np.log(len(pts) / n_total) - np.log(2.0 * np.pi * var)
        ) - sse / (2.0 * var)
    p = 4 * len(ids) - 1
    return -2.0 * loglik + p * np.log(n_total)


def merge_pair_oracle(assignment, field, a, b):
    merged = np.array(assignment)
    merged[merged == b] = a
    merged[merged > b] -= 1
    return bic_oracle(merged, field)


class TestKmeansFlow:
    def test_identical_displacements_single_cluster(self, rng):
        f = field_from_blobs(rng, [(5.0, -3.0)], per_blob=40, jitter=0.0)
        c = kmeans_flow(f, k_init=6, seed=0)
        assert c.n_clusters == 1
        assert_allclose(c.means[0], (5.0, -3.0), atol=1e-9)
        assert "empty-clusters-dropped" in c.flags

    def test_two_blobs_recovered(self, rng):
        f = field_from_blobs(rng, [(0.0, 0.0), (100.0, 100.0)], per_blob=40)
        c = kmeans_flow(f, k_init=2, seed=0)
        assert c.n_clusters == 2
        got = c.means[np.argsort(c.means[:, 0])]
        assert np.abs(got[0] - (0.0, 0.0)).max() <= 0.5
        assert np.abs(got[1] - (100.0, 100.0)).max() <= 0.5

    def test_deterministic_rerun(self, rng):
        f = field_from_blobs(rng, [(0.0, 0.0), (30.0, -10.0), (5.0, 40.0)])
        a = kmeans_flow(f, k_init=7, seed=3)
        b = kmeans_flow(f, k_init=7, seed=3)
        assert_array_equal(a.assignment, b.assignment)
        assert_array_equal(a.means, b.means)
        assert_array_equal(a.variances, b.variances)

    def test_stats_are_member_statistics(self, rng):
        f = field_from_blobs(rng, [(0.0, 0.0), (20.0, 20.0)], per_blob=25)
        c = kmeans_flow(f, k_init=4, seed=1)
        assert c.counts.sum() == f.n_valid
        for m in range(c.n_clusters):
            pts = f.vectors[c.assignment == m]
            assert len(pts) == c.counts[m]
            assert np.abs(c.means[m] - pts.mean(axis=0)).max() <= 1e-6
            sse = ((pts - pts.mean(axis=0)) ** 2).sum()
            assert abs(c.variances[m] - sse / (2 * len(pts))) <= 1e-9

    def test_assignment_is_nearest_center(self, rng):
        f = field_from_blobs(rng, [(0.0, 0.0), (50.0, 0.0)], per_blob=30)
        c = kmeans_flow(f, k_init=5, seed=2)
        x = f.vectors[f.valid]
        labels = c.assignment[f.valid]
        d2 = ((x[:, None, :] - c.means[None, :, :]) ** 2).sum(axis=2)
        assert_array_equal(labels, np.argmin(d2, axis=1))

    def test_k_clamped_when_few_cells(self, rng):
        f = field_from_blobs(rng, [(1.0, 2.0)], per_blob=4, hw=(3, 3))
        c = kmeans_flow(f, k_init=15, seed=0)
        assert "k-clamped" in c.flags
        assert c.n_clusters <= 4

    def test_no_valid_cells_rejected(self):
        f = DisplacementField(np.zeros((3, 3, 2)), np.zeros((3, 3), bool), 8.0)
        with pytest.raises(InvalidInputError):
            kmeans_flow(f, k_init=2, seed=0)
        with pytest.raises(InvalidInputError):
            kmeans_flow(
                DisplacementField(np.zeros((3, 3, 2)), np.ones((3, 3), bool), 8.0),
                k_init=0,
                seed=0,
            )


class TestBicMerge:
    def test_split_blob_remerged(self, rng):
        # one Gaussian-ish blob over-split by k-means must merge back to 1
        f = field_from_blobs(rng, [(10.0, 10.0)], per_blob=80, jitter=2.0)
        c = kmeans_flow(f, k_init=4, seed=0)
        m = bic_merge(c)
        assert m.n_clusters == 1
        assert "bic-merged" in m.flags
        assert_allclose(m.means[0], f.vectors[f.valid].mean(axis=0), atol=1e-9)

    def test_separated_blobs_not_merged(self, rng):
        f = field_from_blobs(
            rng, [(0.0, 0.0), (80.0, 0.0), (0.0, 80.0)], per_blob=30, jitter=1.0
        )
        c = kmeans_flow(f, k_init=3, seed=0)
        m = bic_merge(c)
        assert m.n_clusters == 3
        assert_array_equal(m.assignment, c.assignment)

    def test_oversplit_three_blobs_merge_to_three(self, rng):
        f = field_from_blobs(
            rng, [(0.0, 0.0), (90.0, 0.0), (0.0, 90.0)], per_blob=35, jitter=1.5
        )
        c = kmeans_flow(f, k_init=9, seed=5)
        m = bic_merge(c)
        assert m.n_clusters == 3
        key = np.round(m.means / 10.0)
        got = m.means[np.lexsort((key[:, 1], key[:, 0]))]
        assert_allclose(got, [(0, 0), (0, 90), (90, 0)], atol=1.0)

    def test_never_increases_clusters_and_idempotent(self, rng):
        for seed in range(5):
            f = field_from_blobs(
                rng, [(0.0, 0.0), (12.0, 5.0), (40.0, 40.0)], per_blob=25, jitter=3.0
            )
            c = kmeans_flow(f, k_init=8, seed=seed)
            m1 = bic_merge(c)
            assert m1.n_clusters <= c.n_clusters
            m2 = bic_merge(m1)
            assert m2.n_clusters == m1.n_clusters
            assert_array_equal(m2.assignment, m1.assignment)
            assert_allclose(m2.means, m1.means, atol=0)

    def test_merge_decisions_match_raw_bic_oracle(self, rng):
        # every greedy step must (a) strictly lower the oracle BIC and
        # (b) stop only when no pairwise merge lowers it further
        f = field_from_blobs(
            rng, [(0.0, 0.0), (6.0, 0.0), (60.0, 60.0)], per_blob=30, jitter=2.0
        )
        c = kmeans_flow(f, k_init=6, seed=1)
        m = bic_merge(c)
        assert bic_oracle(m.assignment, f) <= bic_oracle(c.assignment, f) + 1e-9
        k = m.n_clusters
        stopped = bic_oracle(m.assignment, f)
        for a in range(k):
            for b in range(a + 1, k):
                assert merge_pair_oracle(m.assignment, f, a, b) >= stopped - 1e-9

    def test_merged_stats_match_member_recomputation(self, rng):
        f = field_from_blobs(rng, [(0.0, 0.0), (7.0, 2.0)], per_blob=40, jitter=2.5)
        m = bic_merge(kmeans_flow(f, k_init=5, seed=2))
        for n in range(m.n_clusters):
            pts = f.vectors[m.assignment == n]
            assert len(pts) == m.counts[n]
            assert np.abs(m.means[n] - pts.mean(axis=0)).max() <= 1e-9
            sse = ((pts - pts.mean(axis=0)) ** 2).sum()
            assert abs(m.variances[n] - sse / (2 * len(pts))) <= 1e-9


class TestClusterRegions:
    def test_targets_are_sources_plus_displacement(self, rng):
        f = field_from_blobs(rng, [(4.0, -2.0), (30.0, 10.0)], per_blob=30)
        c = bic_merge(kmeans_flow(f, k_init=4, seed=0))
        r = cluster_regions(c, f)
        assert len(r.src_points) == c.n_clusters
        for n in range(c.n_clusters):
            assert len(r.src_points[n]) == c.counts[n]
            ij = r.cell_indices[n]
            d = f.vectors[ij[:, 0], ij[:, 1]]
            assert_allclose(r.tgt_points[n], r.src_points[n] + d, atol=0)

    def test_lattice_mismatch_rejected(self, rng):
        f = field_from_blobs(rng, [(0.0, 0.0)], per_blob=20)
        c = kmeans_flow(f, k_init=2, seed=0)
        other = DisplacementField(np.zeros((4, 4, 2)), np.ones((4, 4), bool), 8.0)
        with pytest.raises(InvalidInputError):
            cluster_regions(c, other)


def two_region_setup(rng):
    """Two coherent-motion clusters with known geometry for anchor tests."""
    h, w = 8, 16
    vectors = np.zeros((h, w, 2))
    valid = np.ones((h, w), dtype=bool)
    vectors[:, :8] = (10.0, 0.0)  # left block moves right
    vectors[:, 8:] = (-40.0, 5.0)  # right block moves left
    vectors += rng.uniform(-0.2, 0.2, size=vectors.shape)
    f = DisplacementField(vectors, valid, 8.0)
    c = bic_merge(kmeans_flow(f, k_init=2, seed=0))
    assert c.n_clusters == 2
    r = cluster_regions(c, f)
    return f, c, r


class TestAnchorFilter:
    def test_only_anchored_cluster_survives(self, rng):
        f, c, r = two_region_setup(rng)
        left = c.assignment[0, 0]
        src = r.src_points[left][5]
        tgt = r.tgt_points[left][5]
        ann = CorrespondenceSet.from_pairs([src], [tgt], "annotated")
        pseudo, anchored = anchor_filter(r, ann, r_anchor_px=12.0)
        assert anchored[left] and not anchored[1 - left]
        assert len(pseudo) == c.counts[left]
        assert set(pseudo.provenance) == {"pseudo"}

    def test_both_sides_must_match(self, rng):
        f, c, r = two_region_setup(rng)
        left = c.assignment[0, 0]
        src = r.src_points[left][3]
        # target far from every warped point of either cluster
        ann = CorrespondenceSet.from_pairs([src], [(999.0, 999.0)], "annotated")
        _, anchored = anchor_filter(r, ann, r_anchor_px=12.0)
        assert not anchored.any()

    def test_pair_may_touch_different_members(self, rng):
        # the source hit and the target hit need not come from the same cell
        f, c, r = two_region_setup(rng)
        left = c.assignment[0, 0]
        src_a = r.src_points[left][0]
        tgt_b = r.tgt_points[left][len(r.tgt_points[left]) - 1]
        ann = CorrespondenceSet.from_pairs([src_a], [tgt_b], "annotated")
        _, anchored = anchor_filter(r, ann, r_anchor_px=6.0)
        assert anchored[left]

    def test_output_subset_of_prefilter_cells(self, rng):
        f, c, r = two_region_setup(rng)
        all_pairs = {
            (tuple(s), tuple(t))
            for n in range(c.n_clusters)
            for s, t in zip(r.src_points[n], r.tgt_points[n])
        }
        ann = CorrespondenceSet.from_pairs(
            [r.src_points[0][0]], [r.tgt_points[0][0]], "annotated"
        )
        pseudo, _ = anchor_filter(r, ann, r_anchor_px=10.0)
        got = {(tuple(s), tuple(t)) for s, t in zip(pseudo.src, pseudo.tgt)}
        assert got <= all_pairs

    def test_monotone_in_annotations(self, rng):
        f, c, r = two_region_setup(rng)
        pairs = [
            (r.src_points[0][0], r.tgt_points[0][0]),
            (r.src_points[1][0], r.tgt_points[1][0]),
        ]
        full = CorrespondenceSet.from_pairs(
            [p[0] for p in pairs], [p[1] for p in pairs], "annotated"
        )
        sub = full.subset([0])
        p_full, a_full = anchor_filter(r, full, r_anchor_px=10.0)
        p_sub, a_sub = anchor_filter(r, sub, r_anchor_px=10.0)
        assert a_sub.sum() <= a_full.sum()
        full_set = {(tuple(s), tuple(t)) for s, t in zip(p_full.src, p_full.tgt)}
        sub_set = {(tuple(s), tuple(t)) for s, t in zip(p_sub.src, p_sub.tgt)}
        assert sub_set <= full_set

    def test_empty_annotation_empty_output(self, rng):
        f, c, r = two_region_setup(rng)
        pseudo, anchored = anchor_filter(
            r, CorrespondenceSet.empty(), r_anchor_px=10.0
        )
        assert len(pseudo) == 0 and not anchored.any()

    def test_radius_must_be_positive(self, rng):
        f, c, r = two_region_setup(rng)
        with pytest.raises(InvalidInputError):
            anchor_filter(r, CorrespondenceSet.empty(), r_anchor_px=0.0)
