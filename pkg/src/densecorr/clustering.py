"""Clustering of displacement fields and GT-anchored filtering.

Valid-cell displacements are grouped by seeded k-means++ (own Lloyd loop: the
stopping rule is absolute center movement < 1e-6 px and empty clusters are
dropped, not relocated), then greedily merged while the BIC of an isotropic
2-D Gaussian mixture strictly decreases. Clusters that contain an annotated
pair on both sides survive the anchor filter; everything else is discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .grid import cell_centers
from .matching import CorrespondenceSet
from .validation import check_positive
from .warp import DisplacementField

__all__ = [
    "FlowClustering",
    "ClusterRegions",
    "kmeans_flow",
    "bic_merge",
    "cluster_regions",
    "anchor_filter",
]

MOVEMENT_TOL = 1e-6
MAX_LLOYD_ITERS = 100
VARIANCE_FLOOR = 1e-4  # px^2, keeps single-member clusters finite in the BIC


@dataclass(frozen=True)
class FlowClustering:
    """Hard assignment of valid cells to displacement clusters.

    assignment[i, j] is the cluster id of cell (i, j), or -1 for cells that
    are invalid in the underlying field. Per-cluster stats are sufficient for
    the BIC: arithmetic mean displacement, isotropic per-dimension variance
    (SSE / (2 * count), floor NOT applied here), and member count.
    """

    assignment: np.ndarray  # (H, W) int32, -1 outside valid cells
    means: np.ndarray  # (k, 2) float64
    variances: np.ndarray  # (k,) float64
    counts: np.ndarray  # (k,) int64
    flags: tuple = ()

    def __post_init__(self):
        if len(self.means) != len(self.variances) or len(self.means) != len(self.counts):
            raise InvalidInputError("per-cluster stat arrays must align")
        if np.any(self.counts <= 0):
            raise InvalidInputError("clusters must be non-empty")

    @property
    def n_clusters(self) -> int:
        return len(self.means)


@dataclass(frozen=True)
class ClusterRegions:
    """Per-cluster source/target point sets, pixel coordinates.

    src_points[n] are the member cell centers of cluster n; tgt_points[n] are
    those centers displaced by the field (tgt = src + D exactly).
    """

    src_points: tuple  # tuple of (M_n, 2) arrays
    tgt_points: tuple
    cell_indices: tuple  # tuple of (M_n, 2) int arrays, (i, j) per member


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, 2), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for m in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[m] = x[0]
            continue
        centers[m] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[m]) ** 2).sum(axis=1))
    return centers


def kmeans_flow(field: DisplacementField, k_init: int = 15, seed: int = 0) -> FlowClustering:
    """Cluster the valid-cell displacements of `field`.

    Deterministic given (field, k_init, seed): k-means++ init from a PCG64
    generator, Lloyd iterations until max center movement < 1e-6 px or 100
    iterations, nearest-center ties to the lowest cluster index, empty
    clusters dropped at the end. k_init is clamped to the number of valid
    cells (flagged "k-clamped").
    """
    if k_init < 1:
        raise InvalidInputError(f"k_init must be >= 1, got {k_init}")
    valid = field.valid
    if not valid.any():
        raise InvalidInputError("field has no valid cells to cluster")
    x = field.vectors[valid]  # row-major order of valid cells
    n = len(x)
    flags: list[str] = []
    k = k_init
    if k > n:
        k = n
        flags.append("k-clamped")

    rng = np.random.Generator(np.random.PCG64(seed))
    centers = _kmeanspp_init(x, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(MAX_LLOYD_ITERS):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)  # first minimum = lowest cluster index
        moved = 0.0
        new_centers = centers.copy()
        for m in range(k):
            members = labels == m
            if members.any():
                mu = x[members].mean(axis=0)
                moved = max(moved, float(np.hypot(*(mu - centers[m]))))
                new_centers[m] = mu
        centers = new_centers
        if moved < MOVEMENT_TOL:
            break

    # final stats from the assignment under the converged centers
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    keep = [m for m in range(k) if (labels == m).any()]
    if len(keep) < k:
        flags.append("empty-clusters-dropped")
    remap = {m: i for i, m in enumerate(keep)}
    means = np.empty((len(keep), 2), dtype=np.float64)
    variances = np.empty(len(keep), dtype=np.float64)
    counts = np.empty(len(keep), dtype=np.int64)
    final = np.empty(n, dtype=np.int32)
    for m, i in remap.items():
        members = labels == m
        pts = x[members]
        means[i] = pts.mean(axis=0)
        variances[i] = ((pts - means[i]) ** 2).sum() / (2.0 * len(pts))
        counts[i] = len(pts)
        final[members] = i

    assignment = np.full(valid.shape, -1, dtype=np.int32)
    assignment[valid] = final
    return FlowClustering(
        assignment=assignment,
        means=means,
        variances=variances,
        counts=counts,
        flags=tuple(flags),
    )


def _cluster_loglik_terms(variances, counts, n_total) -> np.ndarray:
    """Per-cluster classification log-likelihood terms.

    count * [log weight - log(2*pi*var)] - SSE / (2*var), with the variance
    floor applied in the likelihood only (the -SSE/(2 var) term equals -count
    at the MLE variance; the floor breaks that identity, so SSE is explicit).
    """
    sse = 2.0 * counts * variances
    var = np.maximum(variances, VARIANCE_FLOOR)
    return counts * (
        np.log(counts / n_total) - np.log(2.0 * np.pi * var)
    ) - sse / (2.0 * var)


def _mixture_bic(means, variances, counts) -> float:
    """BIC of a hard-assigned isotropic 2-D Gaussian mixture: -2 lnL + p ln n
    with p = 4k - 1 free parameters (k means, k variances, k - 1 weights)."""
    n = counts.sum()
    k = len(counts)
    loglik = float(np.sum(_cluster_loglik_terms(variances, counts, n)))
    p = 4 * k - 1
    return -2.0 * loglik + p * np.log(n)


def _merged_stats(means, variances, counts, i: int, j: int):
    """Pooled mean/variance/count after merging cluster j into i."""
    ni, nj = counts[i], counts[j]
    n = ni + nj
    mu = (ni * means[i] + nj * means[j]) / n
    sse = (
        2.0 * ni * variances[i]
        + 2.0 * nj * variances[j]
        + ni * ((means[i] - mu) ** 2).sum()
        + nj * ((means[j] - mu) ** 2).sum()
    )
    return mu, sse / (2.0 * n), n


def bic_merge(clustering: FlowClustering) -> FlowClustering:
    """Greedily merge cluster pairs while the mixture BIC strictly decreases.

    Each round evaluates every pair (i < j) via pooled sufficient statistics
    and merges the pair with the lowest resulting BIC (lexicographic first on
    ties). Idempotent once no merge improves.
    """
    assignment = np.array(clustering.assignment)
    means = np.array(clustering.means)
    variances = np.array(clustering.variances)
    counts = np.array(clustering.counts)
    flags = list(clustering.flags)
    current = _mixture_bic(means, variances, counts)
    merged_any = False
    n_total = counts.sum()

    while len(counts) > 1:
        k = len(counts)
        # pooled stats for every (i, j) pair at once
        ni = counts[:, None].astype(np.float64)
        nj = counts[None, :].astype(np.float64)
        n_ij = ni + nj
        mu_ij = (
            ni[:, :, None] * means[:, None, :] + nj[:, :, None] * means[None, :, :]
        ) / n_ij[:, :, None]
        di = ((means[:, None, :] - mu_ij) ** 2).sum(axis=2)
        dj = ((means[None, :, :] - mu_ij) ** 2).sum(axis=2)
        sse_ij = (
            2.0 * ni * variances[:, None] + 2.0 * nj * variances[None, :]
            + ni * di + nj * dj
        )
        var_ij = sse_ij / (2.0 * n_ij)
        # candidate BIC = current terms - i - j + merged, with k - 1 clusters
        terms = _cluster_loglik_terms(variances, counts, n_total)
        base = terms.sum()
        fvar = np.maximum(var_ij, VARIANCE_FLOOR)
        term_ij = n_ij * (
            np.log(n_ij / n_total) - np.log(2.0 * np.pi * fvar)
        ) - sse_ij / (2.0 * fvar)
        loglik = base - terms[:, None] - terms[None, :] + term_ij
        bic = -2.0 * loglik + (4 * (k - 1) - 1) * np.log(n_total)
        bic[np.tril_indices(k)] = np.inf  # keep i < j only
        flat = np.argmin(bic)  # row-major first minimum = lexicographic tie
        i, j = int(flat // k), int(flat % k)
        if not bic[i, j] < current:
            break
        means[i] = mu_ij[i, j]
        variances[i] = var_ij[i, j]
        counts[i] = counts[i] + counts[j]
        means = np.delete(means, j, axis=0)
        variances = np.delete(variances, j)
        counts = np.delete(counts, j)
        assignment[assignment == j] = i
        assignment[assignment > j] -= 1
        current = float(bic[i, j])
        merged_any = True

    if merged_any:
        flags.append("bic-merged")
    return FlowClustering(
        assignment=assignment,
        means=means,
        variances=variances,
        counts=counts,
        flags=tuple(dict.fromkeys(flags)),
    )


def cluster_regions(clustering: FlowClustering, field: DisplacementField) -> ClusterRegions:
    """Member cell centers and their warped targets, per cluster."""
    if clustering.assignment.shape != field.valid.shape:
        raise InvalidInputError("clustering and field lattice dims differ")
    wx, wy = field.warped_centers()
    h, w = field.valid.shape
    cx, cy = cell_centers(h, w, field.stride_px)
    src_points, tgt_points, cell_indices = [], [], []
    for n in range(clustering.n_clusters):
        members = clustering.assignment == n
        ij = np.argwhere(members)
        src_points.append(np.stack([cx[members], cy[members]], axis=1))
        tgt_points.append(np.stack([wx[members], wy[members]], axis=1))
        cell_indices.append(ij)
    return ClusterRegions(
        src_points=tuple(src_points),
        tgt_points=tuple(tgt_points),
        cell_indices=tuple(cell_indices),
    )


def anchor_filter(
    regions: ClusterRegions,
    annotated: CorrespondenceSet,
    r_anchor_px: float,
) -> tuple[CorrespondenceSet, np.ndarray]:
    """Keep clusters anchored by an annotated pair; emit their cells as pairs.

    A cluster is anchored iff some single annotated pair (ps, pt) has ps
    within r_anchor_px of one of the cluster's source cell centers AND pt
    within r_anchor_px of one of its warped targets. Returns the pseudo-label
    set (provenance "pseudo", clusters in id order, cells in row-major order)
    and the boolean anchored mask over clusters. Empty annotation or no
    anchored cluster yields an empty set, never an error.
    """
    check_positive(r_anchor_px, "r_anchor_px")
    k = len(regions.src_points)
    anchored = np.zeros(k, dtype=bool)
    r2 = r_anchor_px ** 2
    for n in range(k):
        src_pts = regions.src_points[n]
        tgt_pts = regions.tgt_points[n]
        if len(src_pts) == 0 or len(annotated) == 0:
            continue
        ds = ((annotated.src[:, None, :] - src_pts[None, :, :]) ** 2).sum(axis=2)
        dt = ((annotated.tgt[:, None, :] - tgt_pts[None, :, :]) ** 2).sum(axis=2)
        anchored[n] = bool(
            np.any((ds.min(axis=1) <= r2) & (dt.min(axis=1) <= r2))
        )
    if not anchored.any():
        return CorrespondenceSet.empty(), anchored
    src = np.concatenate([regions.src_points[n] for n in range(k) if anchored[n]])
    tgt = np.concatenate([regions.tgt_points[n] for n in range(k) if anchored[n]])
    return CorrespondenceSet.from_pairs(src, tgt, "pseudo"), anchored
