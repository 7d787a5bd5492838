"""Nearest-neighbor seeding between two feature grids.

Exact (non-approximate) NN and mutual-NN matching over raw inner products,
with optional region restriction on both sides, keypoint-bbox region
construction, and the annotated-first seed union used by the miner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRegionError, InvalidInputError
from .grid import FeatureGrid, PixelRegion
from .validation import as_points, check_positive

__all__ = [
    "CorrespondenceSet",
    "nn_match",
    "mutual_nn",
    "bbox_from_keypoints",
    "build_seed_set",
]

PROVENANCE_VALUES = ("annotated", "mnn", "pseudo")

# max score-matrix entries materialized at once by the blocked NN search
_BLOCK_BUDGET = 1 << 22


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired pixel points (src[i] <-> tgt[i]) with per-pair provenance."""

    src: np.ndarray  # (N, 2) float64
    tgt: np.ndarray  # (N, 2) float64
    provenance: np.ndarray  # (N,) unicode, values in PROVENANCE_VALUES

    def __post_init__(self):
        src = as_points(self.src, "src")
        tgt = as_points(self.tgt, "tgt")
        prov = np.asarray(self.provenance, dtype="U9")
        if not (len(src) == len(tgt) == len(prov)):
            raise InvalidInputError("src, tgt, provenance must have equal length")
        bad = set(prov.tolist()) - set(PROVENANCE_VALUES)
        if bad:
            raise InvalidInputError(f"unknown provenance values {sorted(bad)}")
        if len(src) > 1:
            rows = np.concatenate([src, tgt], axis=1)
            uniq = np.unique(rows, axis=0)
            if len(uniq) != len(rows):
                raise InvalidInputError("duplicate (src, tgt) pairs")
        for name, arr in (("src", src), ("tgt", tgt), ("provenance", prov)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(
            src=np.zeros((0, 2)), tgt=np.zeros((0, 2)), provenance=np.zeros(0, "U9")
        )

    @classmethod
    def from_pairs(cls, src, tgt, provenance: str) -> "CorrespondenceSet":
        src = as_points(src, "src")
        return cls(
            src=src,
            tgt=as_points(tgt, "tgt"),
            provenance=np.full(len(src), provenance, dtype="U9"),
        )

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(
            src=self.src[idx], tgt=self.tgt[idx], provenance=self.provenance[idx]
        )


def _flat_region_indices(grid: FeatureGrid, region: PixelRegion | None) -> np.ndarray:
    mask = (region or PixelRegion()).cell_mask(grid)
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        raise InvalidInputError("region restriction selects no cells")
    return idx


def _blocked_argmax(src_flat: np.ndarray, tgt_flat: np.ndarray) -> np.ndarray:
    """Row argmax of src_flat @ tgt_flat.T without materializing it whole.

    float64 accumulation through einsum keeps results independent of BLAS
    thread count; np.argmax takes the first (lowest-index) maximum, which is
    the tie rule the rest of the pipeline depends on.
    """
    n_src = src_flat.shape[0]
    n_tgt = tgt_flat.shape[0]
    block = max(1, _BLOCK_BUDGET // max(n_tgt, 1))
    out = np.empty(n_src, dtype=np.int64)
    for start in range(0, n_src, block):
        stop = min(start + block, n_src)
        scores = np.einsum(
            "sd,td->st", src_flat[start:stop], tgt_flat, optimize=False
        )
        out[start:stop] = np.argmax(scores, axis=1)
    return out


def nn_match(
    src: FeatureGrid,
    tgt: FeatureGrid,
    region_tgt: PixelRegion | None = None,
) -> np.ndarray:
    """For each source cell, the row-major linear index of its best target cell.

    Scores are raw inner products; the argmax runs over cells admitted by
    `region_tgt` and ties resolve to the lowest linear index. Returns an
    (H_src, W_src) int64 array of indices into the *full* target lattice.
    """
    if src.dim != tgt.dim:
        raise InvalidInputError(f"descriptor dims differ: {src.dim} vs {tgt.dim}")
    tgt_idx = _flat_region_indices(tgt, region_tgt)
    src_flat = src.data.reshape(-1, src.dim).astype(np.float64)
    tgt_flat = tgt.data.reshape(-1, tgt.dim).astype(np.float64)[tgt_idx]
    local = _blocked_argmax(src_flat, tgt_flat)
    return tgt_idx[local].reshape(src.height_cells, src.width_cells)


def mutual_nn(
    src: FeatureGrid,
    tgt: FeatureGrid,
    region_src: PixelRegion | None = None,
    region_tgt: PixelRegion | None = None,
    min_similarity: float | None = None,
) -> CorrespondenceSet:
    """Mutual nearest neighbors between two grids, as cell-center point pairs.

    A pair (u, v) survives iff u's best target over `region_tgt` is v and v's
    best source over `region_src` is u; both endpoints must lie inside their
    own regions. With `min_similarity` set, pairs scoring below the floor are
    dropped. The result is injective in both coordinates by construction.
    """
    if src.dim != tgt.dim:
        raise InvalidInputError(f"descriptor dims differ: {src.dim} vs {tgt.dim}")
    src_idx = _flat_region_indices(src, region_src)
    tgt_idx = _flat_region_indices(tgt, region_tgt)
    src_flat = src.data.reshape(-1, src.dim).astype(np.float64)
    tgt_flat = tgt.data.reshape(-1, tgt.dim).astype(np.float64)

    fwd_local = _blocked_argmax(src_flat[src_idx], tgt_flat[tgt_idx])
    bwd_local = _blocked_argmax(tgt_flat[tgt_idx], src_flat[src_idx])
    mutual = bwd_local[fwd_local] == np.arange(len(src_idx))
    src_lin = src_idx[mutual]
    tgt_lin = tgt_idx[fwd_local[mutual]]

    if min_similarity is not None:
        scores = np.einsum(
            "nd,nd->n", src_flat[src_lin], tgt_flat[tgt_lin], optimize=False
        )
        keep = scores >= float(min_similarity)
        src_lin, tgt_lin = src_lin[keep], tgt_lin[keep]

    sw = src.width_cells
    tw = tgt.width_cells
    src_pts = np.stack(
        [(src_lin % sw + 0.5) * src.stride_px, (src_lin // sw + 0.5) * src.stride_px],
        axis=1,
    )
    tgt_pts = np.stack(
        [(tgt_lin % tw + 0.5) * tgt.stride_px, (tgt_lin // tw + 0.5) * tgt.stride_px],
        axis=1,
    )
    return CorrespondenceSet.from_pairs(src_pts, tgt_pts, "mnn")


def _expanded_bbox(pts: np.ndarray, margin_frac: float, image_hw) -> tuple:
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    diag = float(np.hypot(x1 - x0, y1 - y0))
    pad = margin_frac * diag
    x0, y0, x1, y1 = x0 - pad, y0 - pad, x1 + pad, y1 + pad
    if image_hw is not None:
        h, w = float(image_hw[0]), float(image_hw[1])
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, w), min(y1, h)
    if not (x1 > x0 and y1 > y0):
        raise DegenerateRegionError(
            f"keypoint bbox degenerate after margin {margin_frac}: "
            f"({x0}, {y0}, {x1}, {y1})"
        )
    return (x0, y0, x1, y1)


def bbox_from_keypoints(
    annotated: CorrespondenceSet,
    margin_frac: float,
    src_image_hw=None,
    tgt_image_hw=None,
) -> tuple[PixelRegion, PixelRegion]:
    """Axis-aligned keypoint bboxes, each side expanded by margin_frac x the
    keypoint diagonal and clipped to its image when dims are given.

    Raises DegenerateRegionError for < 2 keypoints or a zero-extent box.
    """
    if margin_frac < 0 or not np.isfinite(margin_frac):
        raise InvalidInputError(f"margin_frac must be >= 0, got {margin_frac}")
    if len(annotated) < 2:
        raise DegenerateRegionError(
            f"need >= 2 keypoint pairs for a bbox, got {len(annotated)}"
        )
    return (
        PixelRegion(kind="bbox", bbox=_expanded_bbox(annotated.src, margin_frac, src_image_hw)),
        PixelRegion(kind="bbox", bbox=_expanded_bbox(annotated.tgt, margin_frac, tgt_image_hw)),
    )


def build_seed_set(
    annotated: CorrespondenceSet,
    mnn: CorrespondenceSet,
    stride_px: float,
) -> CorrespondenceSet:
    """Union of annotated pairs and MNN pairs, annotated always kept.

    An MNN pair whose source lies within 0.5 * stride_px of any annotated
    source is dropped as a duplicate of the annotation.
    """
    check_positive(stride_px, "stride_px")
    if len(mnn) == 0:
        return annotated
    if len(annotated) == 0:
        return mnn
    d2 = (
        (mnn.src[:, None, :] - annotated.src[None, :, :]) ** 2
    ).sum(axis=2)
    keep = d2.min(axis=1) > (0.5 * stride_px) ** 2
    return CorrespondenceSet(
        src=np.concatenate([annotated.src, mnn.src[keep]]),
        tgt=np.concatenate([annotated.tgt, mnn.tgt[keep]]),
        provenance=np.concatenate([annotated.provenance, mnn.provenance[keep]]),
    )
