"""Pseudo-label mining: the full seed -> densify -> cluster -> anchor pipeline.

Given two feature grids and a handful of annotated pairs, the miner finds
mutual-nearest-neighbor seeds, densifies them into a piecewise-affine flow,
clusters the flow, keeps only clusters anchored by the annotations, and emits
the surviving cells as pseudo-correspondences. Degenerate intermediates
(no seeds, collinear seeds, nothing anchored) produce an empty set plus a
diagnostic flag, never an exception.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .clustering import anchor_filter, bic_merge, cluster_regions, kmeans_flow
from .errors import InvalidInputError
from .grid import FeatureGrid, PixelRegion, normalize_descriptors
from .matching import CorrespondenceSet, build_seed_set, mutual_nn
from .warp import DisplacementField, densify

__all__ = ["MiningResult", "PseudoLabelMiner", "mine_pseudo_labels"]


@dataclass
class MiningResult:
    pseudo_labels: CorrespondenceSet
    field: DisplacementField
    diagnostics: dict = field(default_factory=dict)


class PseudoLabelMiner(BaseEstimator):
    """Mines pseudo-correspondences between two images' feature grids.

    Parameters
    ----------
    k_init : int
        Initial cluster count for the flow k-means (merged down by BIC).
    r_anchor_cells : float
        Anchor radius in cell units; converted to pixels with the source
        grid's stride.
    seed : int
        Seed for the clustering initialization.
    normalize : bool
        L2-normalize descriptors at ingest (raw inner products otherwise).
    min_similarity : float or None
        Optional score floor on mutual-NN seed pairs.
    """

    def __init__(
        self,
        k_init: int = 15,
        r_anchor_cells: float = 1.5,
        seed: int = 0,
        normalize: bool = True,
        min_similarity: float | None = None,
    ):
        self.k_init = k_init
        self.r_anchor_cells = r_anchor_cells
        self.seed = seed
        self.normalize = normalize
        self.min_similarity = min_similarity

    def mine(
        self,
        src: FeatureGrid,
        tgt: FeatureGrid,
        annotated: CorrespondenceSet,
        region_src: PixelRegion | None = None,
        region_tgt: PixelRegion | None = None,
    ) -> MiningResult:
        if src.stride_px != tgt.stride_px:
            raise InvalidInputError(
                f"grid strides differ: {src.stride_px} vs {tgt.stride_px}"
            )
        stride = src.stride_px
        diag: dict = {"flags": []}

        src_in = normalize_descriptors(src) if self.normalize else src
        tgt_in = normalize_descriptors(tgt) if self.normalize else tgt

        mnn = mutual_nn(
            src_in,
            tgt_in,
            region_src=region_src,
            region_tgt=region_tgt,
            min_similarity=self.min_similarity,
        )
        seeds = build_seed_set(annotated, mnn, stride)
        diag["mnn_count"] = len(mnn)
        diag["seed_count"] = len(seeds)

        th_px, tw_px = tgt.image_extent_px
        flow = densify(
            seeds, (src.height_cells, src.width_cells), stride, (th_px, tw_px)
        )
        diag["valid_cells"] = flow.n_valid
        diag["flags"].extend(flow.flags)

        if flow.n_valid == 0:
            diag.update(
                clusters_initial=0, clusters_merged=0, anchored_clusters=0,
                pair_count=0,
            )
            diag["flags"].append("empty-flow")
            self.diagnostics_ = diag
            return MiningResult(CorrespondenceSet.empty(), flow, diag)

        clustering = kmeans_flow(flow, k_init=self.k_init, seed=self.seed)
        diag["clusters_initial"] = clustering.n_clusters
        merged = bic_merge(clustering)
        diag["clusters_merged"] = merged.n_clusters
        diag["flags"].extend(f for f in merged.flags if f not in diag["flags"])

        regions = cluster_regions(merged, flow)
        pseudo, anchored = anchor_filter(
            regions, annotated, self.r_anchor_cells * stride
        )
        diag["anchored_clusters"] = int(anchored.sum())
        diag["pair_count"] = len(pseudo)
        if len(pseudo) == 0:
            diag["flags"].append("no-anchored-clusters")
        self.diagnostics_ = diag
        return MiningResult(pseudo, flow, diag)


def mine_pseudo_labels(
    teacher_src: FeatureGrid,
    teacher_tgt: FeatureGrid,
    annotated: CorrespondenceSet,
    region_src: PixelRegion | None = None,
    region_tgt: PixelRegion | None = None,
    *,
    k_init: int = 15,
    r_anchor_cells: float = 1.5,
    seed: int = 0,
    normalize: bool = True,
    min_similarity: float | None = None,
) -> MiningResult:
    """Functional wrapper over PseudoLabelMiner.mine."""
    miner = PseudoLabelMiner(
        k_init=k_init,
        r_anchor_cells=r_anchor_cells,
        seed=seed,
        normalize=normalize,
        min_similarity=min_similarity,
    )
    return miner.mine(
        teacher_src, teacher_tgt, annotated,
        region_src=region_src, region_tgt=region_tgt,
    )
