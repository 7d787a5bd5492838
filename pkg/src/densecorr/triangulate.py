"""Delaunay triangulation of seed points, with deterministic ordering.

Construction is delegated to scipy (Qhull); everything layered on top is
deterministic by design: duplicate merging keeps the first occurrence,
triangles are canonicalized to sorted vertex triples and sorted
lexicographically, slivers below the area threshold are dropped, and point
location walks triangles in canonical order so that boundary points land in
the lowest-index triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay as _SciDelaunay
from scipy.spatial import QhullError

from .errors import InvalidInputError
from .validation import as_points

__all__ = [
    "Triangulation",
    "delaunay",
    "signed_area",
    "signed_area_batch",
    "locate_cells",
]

# points closer than this are considered the same vertex
MERGE_TOL = 1e-6
# triangles with |signed area| below this are degenerate slivers
AREA_TOL = 1e-8
# slack on barycentric coordinates when testing containment
BARY_TOL = 1e-9


@dataclass(frozen=True)
class Triangulation:
    """vertices: (N, 2) float64 merged points; triangles: (M, 3) int32 vertex
    index triples, each sorted ascending, rows sorted lexicographically.
    `collinear` marks inputs whose hull had no area (empty triangulation)."""

    vertices: np.ndarray
    triangles: np.ndarray
    collinear: bool = False
    # maps each original input point to its merged vertex index
    source_index: np.ndarray | None = None

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)


def signed_area(a, b, c) -> float:
    """Twice-signed-area / 2 of triangle (a, b, c); positive if CCW."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    return 0.5 * float(
        (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
    )


def signed_area_batch(tris: np.ndarray) -> np.ndarray:
    """signed_area over a (T, 3, 2) stack of triangles, same arithmetic."""
    tris = np.asarray(tris, dtype=np.float64)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    return 0.5 * (
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )


def _merge_duplicates(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-occurrence merge of points within MERGE_TOL (Chebyshev)."""
    n = len(pts)
    if n:
        diff = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=2)
        close = diff <= MERGE_TOL
        np.fill_diagonal(close, False)
        if not close.any():  # common case: all points distinct
            return pts.astype(np.float64).reshape(-1, 2), np.arange(n)
    kept: list[np.ndarray] = []
    kept_idx: list[int] = []
    mapping = np.empty(n, dtype=np.int64)
    for i, p in enumerate(pts):
        # compare against kept representatives only (first occurrence wins)
        hits = [k for k, j in enumerate(kept_idx) if close[i, j]]
        if hits:
            mapping[i] = hits[0]
        else:
            kept.append(p)
            kept_idx.append(i)
            mapping[i] = len(kept) - 1
    return np.array(kept, dtype=np.float64).reshape(-1, 2), mapping


def delaunay(points) -> Triangulation:
    """Delaunay-triangulate 2-D points.

    Duplicates within 1e-6 px are merged to the first occurrence. Fewer than
    3 distinct points, or a collinear set, yields an empty triangulation with
    `collinear=True` rather than an error. Sliver triangles with
    |signed area| < 1e-8 are dropped.
    """
    pts = as_points(points, "points")
    vertices, mapping = _merge_duplicates(pts)
    empty = np.zeros((0, 3), dtype=np.int32)
    if len(vertices) < 3:
        return Triangulation(vertices, empty, collinear=True, source_index=mapping)
    try:
        tri = _SciDelaunay(vertices)
    except QhullError:
        return Triangulation(vertices, empty, collinear=True, source_index=mapping)
    simplices = np.sort(tri.simplices.astype(np.int32), axis=1)
    areas = np.array(
        [abs(signed_area(vertices[a], vertices[b], vertices[c]))
         for a, b, c in simplices]
    )
    simplices = simplices[areas >= AREA_TOL]
    if len(simplices) == 0:
        return Triangulation(vertices, empty, collinear=True, source_index=mapping)
    order = np.lexsort((simplices[:, 2], simplices[:, 1], simplices[:, 0]))
    simplices = np.ascontiguousarray(simplices[order])
    simplices.setflags(write=False)
    vertices.setflags(write=False)
    return Triangulation(vertices, simplices, collinear=False, source_index=mapping)


def locate_cells(tri: Triangulation, points: np.ndarray) -> np.ndarray:
    """Containing-triangle index for each query point, -1 if outside all.

    Walks triangles in canonical order and assigns each still-unassigned
    point whose barycentric coordinates are all >= -BARY_TOL, so points on
    shared edges deterministically take the lowest-index triangle.
    """
    points = as_points(points, "points")
    owner = np.full(len(points), -1, dtype=np.int64)
    if tri.n_triangles == 0 or len(points) == 0:
        return owner
    a = tri.vertices[tri.triangles[:, 0]]  # (T, 2)
    b = tri.vertices[tri.triangles[:, 1]]
    c = tri.vertices[tri.triangles[:, 2]]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (
        c[:, 0] - a[:, 0]
    ) * (b[:, 1] - a[:, 1])
    # sliver filtering in delaunay() guarantees |det| >= 2 * AREA_TOL
    t = tri.n_triangles
    step = max(1, (1 << 21) // t)  # bound the (T, chunk) working set
    for lo in range(0, len(points), step):
        chunk = points[lo:lo + step]
        dx = chunk[None, :, 0] - a[:, 0, None]  # (T, chunk)
        dy = chunk[None, :, 1] - a[:, 1, None]
        l1 = (
            (c[:, 1] - a[:, 1])[:, None] * dx - (c[:, 0] - a[:, 0])[:, None] * dy
        ) / det[:, None]
        l2 = (
            -(b[:, 1] - a[:, 1])[:, None] * dx + (b[:, 0] - a[:, 0])[:, None] * dy
        ) / det[:, None]
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -BARY_TOL) & (l1 >= -BARY_TOL) & (l2 >= -BARY_TOL)
        hit = inside.any(axis=0)
        # first containing triangle in canonical order, so shared-edge points
        # deterministically take the lowest index
        owner[lo:lo + step][hit] = inside.argmax(axis=0)[hit]
    return owner
