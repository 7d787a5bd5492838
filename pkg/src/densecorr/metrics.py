"""Correspondence evaluation: PCK and pseudo-label quality probes.

PCK follows the per-image convention: a keypoint is correct iff its
prediction lands within alpha * max(bbox_h, bbox_w) of the ground truth
(boundary inclusive), per-image fractions are computed first, and the final
number is the unweighted mean of those fractions — NOT the pooled fraction
over all keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .matching import CorrespondenceSet
from .validation import as_point, as_points, check_positive
from .warp import DisplacementField

__all__ = [
    "pck_point",
    "PckRecord",
    "pck_aggregate",
    "pseudo_quality",
    "perturb_pseudo_labels",
]


def pck_point(pred, gt, bbox_hw, alpha: float) -> bool:
    """|pred - gt|_2 <= alpha * max(bbox_h, bbox_w), boundary inclusive."""
    pred = as_point(pred, "pred")
    gt = as_point(gt, "gt")
    h, w = float(bbox_hw[0]), float(bbox_hw[1])
    if h <= 0 or w <= 0:
        raise InvalidInputError(f"bbox dims must be positive, got {bbox_hw}")
    if alpha <= 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    return bool(np.hypot(*(pred - gt)) <= alpha * max(h, w))


@dataclass
class PckRecord:
    """All keypoint predictions for one image (pair)."""

    image_id: str
    preds: np.ndarray  # (K, 2)
    gts: np.ndarray  # (K, 2)
    bbox_hw: tuple  # (h, w) of the target-image object bbox

    def __post_init__(self):
        self.preds = as_points(self.preds, "preds", allow_empty=False)
        self.gts = as_points(self.gts, "gts", allow_empty=False)
        if len(self.preds) != len(self.gts):
            raise InvalidInputError("preds/gts length mismatch")

    def fraction_correct(self, alpha: float) -> float:
        thr = alpha * max(float(self.bbox_hw[0]), float(self.bbox_hw[1]))
        d = np.sqrt(((self.preds - self.gts) ** 2).sum(axis=1))
        return float((d <= thr).mean())


def pck_aggregate(records: list[PckRecord], alphas) -> dict[float, float]:
    """Mean of per-image correct fractions, for each alpha.

    Averaging is over images with equal weight regardless of keypoint count;
    an empty record list is an error rather than a silent zero.
    """
    if len(records) == 0:
        raise InvalidInputError("no records to aggregate")
    alphas = [float(a) for a in np.atleast_1d(alphas)]
    out = {}
    for a in alphas:
        if a <= 0:
            raise InvalidInputError(f"alpha must be positive, got {a}")
        out[a] = float(np.mean([r.fraction_correct(a) for r in records]))
    return out


def pseudo_quality(
    pseudo: CorrespondenceSet,
    gt_flow: DisplacementField,
    tol_px: float,
) -> dict[str, float]:
    """Precision and coverage of a pseudo-label set against an oracle flow.

    precision: fraction of pairs whose target is within tol_px of the oracle
    warp of their source (sources are snapped to the nearest cell of the
    oracle lattice; pairs landing on invalid oracle cells count as wrong).
    coverage: pair count / oracle valid-cell count. Empty set -> zeros.
    """
    check_positive(tol_px, "tol_px")
    if len(pseudo) == 0:
        return {"precision": 0.0, "coverage": 0.0}
    n_valid = gt_flow.n_valid
    if n_valid == 0:
        raise InvalidInputError("oracle flow has no valid cells")
    h, w = gt_flow.valid.shape
    stride = gt_flow.stride_px
    hits = 0
    for (sx, sy), (tx, ty) in zip(pseudo.src, pseudo.tgt):
        # nearest lattice cell of the oracle field (ties to the lower index)
        j = min(max(int(np.ceil(sx / stride - 1.0)), 0), w - 1)
        i = min(max(int(np.ceil(sy / stride - 1.0)), 0), h - 1)
        if not gt_flow.valid[i, j]:
            continue
        wx = (j + 0.5) * stride + gt_flow.vectors[i, j, 0]
        wy = (i + 0.5) * stride + gt_flow.vectors[i, j, 1]
        if np.hypot(tx - wx, ty - wy) <= tol_px:
            hits += 1
    return {
        "precision": hits / len(pseudo),
        "coverage": len(pseudo) / n_valid,
    }


def perturb_pseudo_labels(
    pseudo: CorrespondenceSet, noise_sigma_px: float, seed: int = 0
) -> CorrespondenceSet:
    """Add iid Gaussian noise to target coordinates only (deterministic per seed)."""
    if noise_sigma_px < 0 or not np.isfinite(noise_sigma_px):
        raise InvalidInputError(f"noise sigma must be >= 0, got {noise_sigma_px}")
    if noise_sigma_px == 0.0 or len(pseudo) == 0:
        return pseudo
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.normal(0.0, noise_sigma_px, size=pseudo.tgt.shape)
    return CorrespondenceSet(
        src=pseudo.src, tgt=pseudo.tgt + noise, provenance=pseudo.provenance
    )
