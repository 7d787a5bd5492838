"""densecorr: pseudo-label mining and coarse-to-fine objectives for dense
semantic correspondence, plus a self-contained synthetic training lab.

The package is organized around plain numeric operations on descriptor grids
(`grid`, `matching`, `warp`, `clustering`, `objectives`, `metrics`) with two
estimator-style surfaces on top: `PseudoLabelMiner` mines anchored
pseudo-correspondences between a pair of grids, and `ToyTrainer` runs the
full training loop on synthetic scenes with exact ground-truth oracles.
"""

from .clustering import (
    ClusterRegions,
    FlowClustering,
    anchor_filter,
    bic_merge,
    cluster_regions,
    kmeans_flow,
)
from .errors import (
    DegenerateRegionError,
    FormatError,
    InvalidInputError,
    NumericalGuardError,
    SingularTriangleError,
)
from .fileio import (
    read_correspondence_file,
    read_feature_file,
    write_correspondence_file,
    write_feature_file,
)
from .grid import (
    FeatureGrid,
    PixelRegion,
    SimilarityMap,
    cell_center,
    cell_centers,
    cell_to_px,
    descriptor_at,
    normalize_descriptors,
    px_to_cell,
    similarity_map,
)
from .matching import (
    CorrespondenceSet,
    bbox_from_keypoints,
    build_seed_set,
    mutual_nn,
    nn_match,
)
from .metrics import (
    PckRecord,
    pck_aggregate,
    pck_point,
    perturb_pseudo_labels,
    pseudo_quality,
)
from .mining import MiningResult, PseudoLabelMiner, mine_pseudo_labels
from .objectives import (
    CeLoss,
    LossOutput,
    SigmaSchedule,
    TargetHeatmap,
    ce_loss,
    ema_update,
    gaussian_target,
    l2_self_loss,
    sigma_at,
    soft_argmax,
    supervised_loss,
    windowed_soft_argmax,
)
from .synthetic import SceneSpec, SyntheticScene, load_scene, save_scene, synth_scene
from .training import ToyTrainer, evaluate_pck, train_toy
from .triangulate import Triangulation, delaunay
from .warp import DisplacementField, affine_from_triangle, densify

__version__ = "0.1.0"

__all__ = [
    "ClusterRegions", "FlowClustering", "anchor_filter", "bic_merge",
    "cluster_regions", "kmeans_flow",
    "DegenerateRegionError", "FormatError", "InvalidInputError",
    "NumericalGuardError", "SingularTriangleError",
    "read_correspondence_file", "read_feature_file",
    "write_correspondence_file", "write_feature_file",
    "FeatureGrid", "PixelRegion", "SimilarityMap", "cell_center",
    "cell_centers", "cell_to_px", "descriptor_at", "normalize_descriptors",
    "px_to_cell", "similarity_map",
    "CorrespondenceSet", "bbox_from_keypoints", "build_seed_set",
    "mutual_nn", "nn_match",
    "PckRecord", "pck_aggregate", "pck_point", "perturb_pseudo_labels",
    "pseudo_quality",
    "MiningResult", "PseudoLabelMiner", "mine_pseudo_labels",
    "CeLoss", "LossOutput", "SigmaSchedule", "TargetHeatmap", "ce_loss",
    "ema_update", "gaussian_target", "l2_self_loss", "sigma_at",
    "soft_argmax", "supervised_loss", "windowed_soft_argmax",
    "SceneSpec", "SyntheticScene", "load_scene", "save_scene", "synth_scene",
    "ToyTrainer", "evaluate_pck", "train_toy",
    "Triangulation", "delaunay",
    "DisplacementField", "affine_from_triangle", "densify",
]
