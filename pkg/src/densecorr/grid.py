"""Feature grids on a regular cell lattice, and similarity maps over them.

A feature grid is an (H, W, D) block of patch descriptors laid out on a
lattice with a fixed pixel stride. Cell (i, j) is centered at pixel
((j + 0.5) * stride, (i + 0.5) * stride); all pixel<->cell conversions in the
package go through this convention. Descriptors are stored float32; every
score/accumulation path upcasts to float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .validation import as_point, check_cell_index, check_positive

__all__ = [
    "FeatureGrid",
    "PixelRegion",
    "SimilarityMap",
    "cell_center",
    "cell_centers",
    "px_to_cell",
    "cell_to_px",
    "bilinear_footprint",
    "bilinear_weights",
    "sample_field",
    "descriptor_at",
    "normalize_descriptors",
    "similarity_map",
]


@dataclass(frozen=True)
class FeatureGrid:
    """Immutable (H, W, D) float32 descriptor grid with a pixel stride.

    Parameters
    ----------
    data : ndarray, shape (H, W, D)
        Patch descriptors; cast to float32 and frozen.
    stride_px : float
        Pixel distance between adjacent cell centers (e.g. 14.0 for raw
        patch features, 3.5 after 4x upsampling).
    normalized : bool
        Marker set by `normalize_descriptors`; serialized as a header flag.
    degenerate_cells : tuple of (i, j)
        Cells whose descriptor was exactly zero at normalization time.
    """

    data: np.ndarray
    stride_px: float
    normalized: bool = False
    degenerate_cells: tuple = field(default_factory=tuple)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise InvalidInputError(f"feature data must be (H, W, D), got {arr.shape}")
        h, w, d = arr.shape
        if h < 2 or w < 2:
            raise InvalidInputError(f"grid dims must be >= 2x2, got {h}x{w}")
        if d < 1:
            raise InvalidInputError("descriptor dim must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("feature data contains non-finite values")
        check_positive(self.stride_px, "stride_px")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "stride_px", float(self.stride_px))

    @property
    def height_cells(self) -> int:
        return self.data.shape[0]

    @property
    def width_cells(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def image_extent_px(self) -> tuple[float, float]:
        """(height_px, width_px) implied by dims x stride."""
        return (self.height_cells * self.stride_px, self.width_cells * self.stride_px)


@dataclass(frozen=True)
class PixelRegion:
    """Restriction of a grid to a subset of cells.

    kind is one of:
      - "full": the whole lattice;
      - "bbox": cells whose centers fall inside [min_x, max_x] x [min_y, max_y]
        (edges inclusive), bbox in pixel units;
      - "mask": explicit cell-resolution boolean mask.
    """

    kind: str = "full"
    bbox: tuple | None = None  # (min_x, min_y, max_x, max_y)
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("full", "bbox", "mask"):
            raise InvalidInputError(f"unknown region kind {self.kind!r}")
        if self.kind == "bbox":
            if self.bbox is None or len(self.bbox) != 4:
                raise InvalidInputError("bbox region needs (min_x, min_y, max_x, max_y)")
            x0, y0, x1, y1 = map(float, self.bbox)
            if not all(np.isfinite(v) for v in (x0, y0, x1, y1)):
                raise InvalidInputError("bbox must be finite")
            if not (x1 > x0 and y1 > y0):
                raise InvalidInputError(f"bbox must have positive extent, got {self.bbox}")
            object.__setattr__(self, "bbox", (x0, y0, x1, y1))
        if self.kind == "mask":
            if self.mask is None:
                raise InvalidInputError("mask region needs a mask array")
            m = np.asarray(self.mask).astype(bool)
            if m.ndim != 2:
                raise InvalidInputError("mask must be 2-D (cell resolution)")
            m = m.copy()
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    def cell_mask(self, grid: FeatureGrid) -> np.ndarray:
        """Boolean (H, W) membership mask on `grid`'s lattice."""
        h, w = grid.height_cells, grid.width_cells
        if self.kind == "full":
            return np.ones((h, w), dtype=bool)
        if self.kind == "mask":
            if self.mask.shape != (h, w):
                raise InvalidInputError(
                    f"mask shape {self.mask.shape} != grid dims {(h, w)}"
                )
            return np.array(self.mask)
        x0, y0, x1, y1 = self.bbox
        cx, cy = cell_centers(h, w, grid.stride_px)
        return (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)


@dataclass(frozen=True)
class SimilarityMap:
    """Inner-product scores of one source descriptor against a target grid.

    scores[i, j] = <src_desc, tgt[i, j]>, float64, raw (no normalization or
    softmax applied). Carries the target lattice geometry so downstream
    soft-argmax readout can convert cells back to pixels.
    """

    scores: np.ndarray  # (H, W) float64
    stride_px: float
    source_point: np.ndarray | None = None

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidInputError(f"scores must be 2-D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("similarity scores contain non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)
        check_positive(self.stride_px, "stride_px")


def cell_center(ij, stride_px: float) -> np.ndarray:
    """Pixel center (x, y) of cell (i, j)."""
    i, j = float(ij[0]), float(ij[1])
    return np.array([(j + 0.5) * stride_px, (i + 0.5) * stride_px])


def cell_centers(height: int, width: int, stride_px: float):
    """Meshgrids (cx, cy) of all cell-center coordinates, each (H, W)."""
    xs = (np.arange(width, dtype=np.float64) + 0.5) * stride_px
    ys = (np.arange(height, dtype=np.float64) + 0.5) * stride_px
    cx, cy = np.meshgrid(xs, ys)
    return cx, cy


def px_to_cell(grid: FeatureGrid, p) -> tuple[int, int]:
    """Nearest cell (i, j) to pixel point p; ties go to the lower index."""
    p = as_point(p)
    # continuous cell coords: center of cell j sits at fractional coord j
    cx = p[0] / grid.stride_px - 0.5
    cy = p[1] / grid.stride_px - 0.5
    j = int(np.ceil(cx - 0.5))
    i = int(np.ceil(cy - 0.5))
    i = min(max(i, 0), grid.height_cells - 1)
    j = min(max(j, 0), grid.width_cells - 1)
    return i, j


def cell_to_px(grid: FeatureGrid, ij) -> np.ndarray:
    i, j = check_cell_index(ij, grid.height_cells, grid.width_cells)
    return cell_center((i, j), grid.stride_px)


def bilinear_footprint(points, stride_px: float, height: int, width: int):
    """Bilinear interpolation footprints of N pixel points on a cell lattice.

    Returns (cells, weights): cells is (N, 4, 2) int indices (i, j), weights
    is (N, 4) summing to 1 per row. Coordinates beyond the outermost cell
    centers clamp to the border (constant extrapolation), matching the
    sampling convention used everywhere in the package.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points must be finite")
    cx = np.clip(pts[:, 0] / stride_px - 0.5, 0.0, width - 1.0)
    cy = np.clip(pts[:, 1] / stride_px - 0.5, 0.0, height - 1.0)
    j0 = np.minimum(np.floor(cx).astype(np.int64), max(width - 2, 0))
    i0 = np.minimum(np.floor(cy).astype(np.int64), max(height - 2, 0))
    fx = cx - j0
    fy = cy - i0
    j1 = np.minimum(j0 + 1, width - 1)
    i1 = np.minimum(i0 + 1, height - 1)
    cells = np.stack(
        [
            np.stack([i0, j0], axis=1),
            np.stack([i0, j1], axis=1),
            np.stack([i1, j0], axis=1),
            np.stack([i1, j1], axis=1),
        ],
        axis=1,
    )
    weights = np.stack(
        [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1
    )
    return cells, weights


def bilinear_weights(p, stride_px: float, height: int, width: int):
    """Single-point form of `bilinear_footprint`: ([(i, j)] * 4, (4,) weights)."""
    p = as_point(p)
    cells, weights = bilinear_footprint(p[None, :], stride_px, height, width)
    return [tuple(c) for c in cells[0]], weights[0]


def sample_field(data: np.ndarray, stride_px: float, points) -> np.ndarray:
    """Bilinearly sample an (H, W, D) float array at N pixel points -> (N, D)."""
    data = np.asarray(data, dtype=np.float64)
    h, w, _ = data.shape
    cells, weights = bilinear_footprint(points, stride_px, h, w)
    gathered = data[cells[:, :, 0], cells[:, :, 1]]  # (N, 4, D)
    return np.einsum("nc,ncd->nd", weights, gathered, optimize=False)


def descriptor_at(grid: FeatureGrid, p) -> np.ndarray:
    """Bilinearly interpolated descriptor at pixel point p, float64 (D,)."""
    p = as_point(p)
    return sample_field(grid.data, grid.stride_px, p[None, :])[0]


def normalize_descriptors(grid: FeatureGrid) -> FeatureGrid:
    """L2-normalize every cell descriptor; zero vectors stay zero and are
    recorded in `degenerate_cells`."""
    data = grid.data.astype(np.float64)
    norms = np.sqrt(np.einsum("ijd,ijd->ij", data, data, optimize=False))
    degenerate = np.argwhere(norms == 0.0)
    safe = np.where(norms == 0.0, 1.0, norms)
    out = (data / safe[:, :, None]).astype(np.float32)
    return FeatureGrid(
        data=out,
        stride_px=grid.stride_px,
        normalized=True,
        degenerate_cells=tuple((int(i), int(j)) for i, j in degenerate),
    )


def similarity_map(src_desc, tgt: FeatureGrid, source_point=None) -> SimilarityMap:
    """Raw inner products of `src_desc` against every cell of `tgt`.

    Accumulates in float64 via einsum; einsum (optimize=False) is used instead
    of BLAS matmul so results are bit-identical regardless of thread count.
    """
    src = np.asarray(src_desc, dtype=np.float64)
    if src.shape != (tgt.dim,):
        raise InvalidInputError(
            f"descriptor dim {src.shape} does not match grid dim ({tgt.dim},)"
        )
    if not np.all(np.isfinite(src)):
        raise InvalidInputError("source descriptor contains non-finite values")
    scores = np.einsum(
        "ijd,d->ij", tgt.data.astype(np.float64), src, optimize=False
    )
    sp = None if source_point is None else as_point(source_point, "source_point")
    return SimilarityMap(scores=scores, stride_px=tgt.stride_px, source_point=sp)
