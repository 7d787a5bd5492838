"""Piecewise-affine densification of sparse correspondences.

Seed pairs are triangulated on the source side; each triangle carries the
unique affine map sending its source vertices to their matched targets, and
every source cell center inside the hull is warped by its containing
triangle's affine. The result is a per-cell displacement field with validity
flags (cells outside the hull, in degenerate triangles, or warped outside the
target image are invalid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, SingularTriangleError
from .matching import CorrespondenceSet
from .triangulate import (
    AREA_TOL,
    delaunay,
    locate_cells,
    signed_area,
    signed_area_batch,
)
from .grid import cell_centers
from .validation import check_positive

__all__ = ["DisplacementField", "affine_from_triangle", "densify"]


@dataclass(frozen=True)
class DisplacementField:
    """Per-cell displacement D(u) on a source lattice.

    vectors[i, j] is the (dx, dy) taking cell center u to its warped target
    u + D(u); entries are only meaningful where valid[i, j]. `flags` records
    degenerate conditions hit while densifying (the field stays usable).
    """

    vectors: np.ndarray  # (H, W, 2) float64, zeros where invalid
    valid: np.ndarray  # (H, W) bool
    stride_px: float
    flags: tuple = ()

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if vec.ndim != 3 or vec.shape[2] != 2 or vec.shape[:2] != valid.shape:
            raise InvalidInputError(
                f"bad field shapes: vectors {vec.shape}, valid {valid.shape}"
            )
        if not np.all(np.isfinite(vec[valid])):
            raise InvalidInputError("valid cells must have finite displacement")
        vec = vec.copy()
        vec[~valid] = 0.0
        vec.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "valid", valid)
        check_positive(self.stride_px, "stride_px")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def warped_centers(self):
        """(cx + dx, cy + dy) meshgrids of warped cell centers, each (H, W)."""
        h, w = self.valid.shape
        cx, cy = cell_centers(h, w, self.stride_px)
        return cx + self.vectors[:, :, 0], cy + self.vectors[:, :, 1]


def affine_from_triangle(src_tri, tgt_tri) -> np.ndarray:
    """The unique 2x3 affine A with A @ [x, y, 1] = target for all 3 vertices.

    Raises SingularTriangleError when the source triangle's |signed area| is
    below the degeneracy threshold. One step of iterative refinement keeps
    the vertex residual at the 1e-9 px contract even for thin triangles.
    """
    src = np.asarray(src_tri, dtype=np.float64)
    tgt = np.asarray(tgt_tri, dtype=np.float64)
    if src.shape != (3, 2) or tgt.shape != (3, 2):
        raise InvalidInputError("triangles must be (3, 2) point arrays")
    area = signed_area(src[0], src[1], src[2])
    if abs(area) < AREA_TOL:
        raise SingularTriangleError(
            f"source triangle area {area:.3e} below threshold {AREA_TOL:.0e}"
        )
    m = np.column_stack([src, np.ones(3)])
    a = np.linalg.solve(m, tgt)  # (3, 2): columns are x- and y- coefficient triples
    a -= np.linalg.solve(m, m @ a - tgt)
    return a.T  # (2, 3) acting on [x, y, 1]


def densify(
    seed: CorrespondenceSet,
    grid_hw: tuple[int, int],
    stride_px: float,
    target_image_hw: tuple[float, float],
) -> DisplacementField:
    """Densify seed pairs into a displacement field on the source lattice.

    Source points are Delaunay-triangulated (duplicates within 1e-6 merged,
    first pair wins); collinear or too-small seed sets yield an all-invalid
    field flagged "collinear-seeds". Boundary cells take the lowest-index
    triangle; warped targets falling outside [0, W]x[0, H] of the target
    image invalidate their cell.
    """
    h, w = int(grid_hw[0]), int(grid_hw[1])
    if h < 1 or w < 1:
        raise InvalidInputError(f"grid dims must be positive, got {grid_hw}")
    check_positive(stride_px, "stride_px")
    th, tw = float(target_image_hw[0]), float(target_image_hw[1])

    vectors = np.zeros((h, w, 2), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    flags: list[str] = []

    tri = delaunay(seed.src)
    if tri.collinear or tri.n_triangles == 0:
        return DisplacementField(
            vectors, valid, stride_px, flags=("collinear-seeds",)
        )
    # first seed pair wins for each merged vertex (first occurrence order)
    n_vert = len(tri.vertices)
    targets = np.zeros((n_vert, 2), dtype=np.float64)
    seen = np.zeros(n_vert, dtype=bool)
    for orig, merged in enumerate(tri.source_index):
        if not seen[merged]:
            targets[merged] = seed.tgt[orig]
            seen[merged] = True

    cx, cy = cell_centers(h, w, stride_px)
    pts = np.stack([cx.ravel(), cy.ravel()], axis=1)
    owner = locate_cells(tri, pts)

    occupied = np.unique(owner)
    occupied = occupied[occupied >= 0]
    fx = vectors[:, :, 0].ravel()
    fy = vectors[:, :, 1].ravel()
    ok = valid.ravel()
    if len(occupied):
        src_tris = tri.vertices[tri.triangles[occupied]]  # (T, 3, 2)
        tgt_tris = targets[tri.triangles[occupied]]
        areas = signed_area_batch(src_tris)
        good = np.abs(areas) >= AREA_TOL
        if not good.all():
            flags.append("singular-triangle")
        affines = np.zeros((len(occupied), 2, 3), dtype=np.float64)
        if good.any():
            # one solve for all triangles, plus one refinement step (matches
            # affine_from_triangle applied per triangle)
            m = np.concatenate(
                [src_tris[good], np.ones((good.sum(), 3, 1))], axis=2
            )
            rhs = tgt_tris[good]
            a = np.linalg.solve(m, rhs)  # (T, 3, 2)
            a -= np.linalg.solve(m, m @ a - rhs)
            affines[good] = np.transpose(a, (0, 2, 1))

        # gather each cell's affine and warp all owned cells at once
        pos = np.full(tri.n_triangles, -1, dtype=np.int64)
        pos[occupied] = np.arange(len(occupied))
        owned = owner >= 0
        sel = pos[owner[owned]]
        a_cells = affines[sel]  # (n, 2, 3)
        usable = good[sel]
        xs, ys = pts[owned, 0], pts[owned, 1]
        wx = a_cells[:, 0, 0] * xs + a_cells[:, 0, 1] * ys + a_cells[:, 0, 2]
        wy = a_cells[:, 1, 0] * xs + a_cells[:, 1, 1] * ys + a_cells[:, 1, 2]
        in_img = (
            usable & (wx >= 0.0) & (wx <= tw) & (wy >= 0.0) & (wy <= th)
        )
        fx[owned] = np.where(in_img, wx - xs, 0.0)
        fy[owned] = np.where(in_img, wy - ys, 0.0)
        ok[owned] = in_img
    if not ok.any():
        flags.append("no-valid-cells")

    return DisplacementField(
        vectors=np.stack([fx, fy], axis=1).reshape(h, w, 2),
        valid=ok.reshape(h, w),
        stride_px=stride_px,
        flags=tuple(dict.fromkeys(flags)),
    )
