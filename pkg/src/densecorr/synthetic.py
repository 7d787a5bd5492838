"""Synthetic correspondence scenes with exact ground-truth oracles.

A scene renders one smooth "canonical" descriptor field into several
instances, each seen through its own invertible affine warp, with spatially
correlated per-instance noise, an elliptical object mask, and keypoints
split into seen (train) and unseen (eval) sets. Because the warps are
closed-form, the true flow between any two instances is available exactly
as warp_b(inv_warp_a(u)), which is what every quality probe measures
against.

With `symmetry=True` the canonical field is made near-mirror-symmetric
about the vertical axis inside the mask: every left-half cell has a twin on
the right whose descriptor is a `symmetry_strength` blend of the mirrored
left and the cell's own content. This imitates real bilaterally symmetric
objects (two sides alike but not pixel-identical) and makes matching
ambiguous in exactly the way that anchored clustering is supposed to
resolve; at strength 1.0 the twin is identical and side choice degenerates
to a noise coin-flip. The object mask also excludes a thin band along the
axis (`axis_gap_cells`): on the axis a point is its own mirror image, so
"which side" is undefined there and no flow-level test can separate the
sides — the interesting failure mode is the gross side swap, which this
keeps sharp.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidInputError
from .grid import (
    FeatureGrid,
    PixelRegion,
    cell_centers,
    normalize_descriptors,
    sample_field,
)
from .matching import CorrespondenceSet
from .validation import check_positive
from .warp import DisplacementField

__all__ = ["SceneSpec", "SyntheticScene", "synth_scene", "save_scene", "load_scene"]


@dataclass(frozen=True)
class SceneSpec:
    grid_hw: tuple = (32, 32)
    dim: int = 12
    stride_px: float = 8.0
    n_instances: int = 3
    warp_complexity: float = 1.0  # scales rotation/scale/translation ranges
    noise_sigma: float = 0.1  # feature noise per instance, pre-normalization
    noise_corr_cells: float = 2.5  # spatial correlation radius of the noise
    smoothness_cells: float = 2.5  # Gaussian blur radius of the canonical field
    symmetry: bool = False
    symmetry_strength: float = 0.85  # 1.0 = exact mirror twin (only if symmetry)
    axis_gap_cells: float = 2.5  # masked-out band half-width along the axis
    n_seen_kp: int = 8
    n_unseen_kp: int = 8

    def __post_init__(self):
        if self.n_seen_kp < 3:
            raise InvalidInputError(
                f"need at least 3 seen keypoints, got {self.n_seen_kp}"
            )
        if self.n_unseen_kp < 1:
            raise InvalidInputError("need at least 1 unseen keypoint")
        if self.n_instances < 2:
            raise InvalidInputError("need at least 2 instances")
        if self.dim < 2:
            raise InvalidInputError("descriptor dim must be >= 2")
        h, w = self.grid_hw
        if h < 8 or w < 8:
            raise InvalidInputError("scene grids must be at least 8x8 cells")
        check_positive(self.stride_px, "stride_px")
        check_positive(self.smoothness_cells, "smoothness_cells")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if self.noise_corr_cells < 0:
            raise InvalidInputError("noise_corr_cells must be >= 0")
        if self.warp_complexity < 0:
            raise InvalidInputError("warp_complexity must be >= 0")
        if not 0.0 <= self.symmetry_strength <= 1.0:
            raise InvalidInputError("symmetry_strength must be in [0, 1]")
        if self.axis_gap_cells < 0:
            raise InvalidInputError("axis_gap_cells must be >= 0")


def _affine_apply(a: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return pts @ a[:, :2].T + a[:, 2]


def _affine_invert(a: np.ndarray) -> np.ndarray:
    lin = np.linalg.inv(a[:, :2])
    return np.column_stack([lin, -lin @ a[:, 2]])


class SyntheticScene:
    """Rendered scene: instance grids, masks, keypoints, warp oracles."""

    def __init__(self, spec: SceneSpec, seed: int, warps, grids, masks,
                 keypoints_canonical, keypoints):
        self.spec = spec
        self.seed = seed
        self.warps = warps  # list of (2, 3) canonical -> instance affines
        self.inv_warps = [_affine_invert(a) for a in warps]
        self.grids = grids  # list of FeatureGrid
        self.masks = masks  # list of (H, W) bool cell masks
        self.keypoints_canonical = keypoints_canonical
        self.keypoints = keypoints  # (n_instances, K, 2) pixel positions
        self.seen_idx = np.arange(spec.n_seen_kp)
        self.unseen_idx = np.arange(
            spec.n_seen_kp, spec.n_seen_kp + spec.n_unseen_kp
        )

    @property
    def image_extent_px(self) -> tuple[float, float]:
        h, w = self.spec.grid_hw
        return (h * self.spec.stride_px, w * self.spec.stride_px)

    def mask_region(self, i: int) -> PixelRegion:
        return PixelRegion(kind="mask", mask=self.masks[i])

    def bbox_hw(self, i: int) -> tuple[float, float]:
        """Extent of instance i's object mask, in pixels."""
        cx, cy = cell_centers(*self.spec.grid_hw, self.spec.stride_px)
        m = self.masks[i]
        s = self.spec.stride_px
        return (
            float(cy[m].max() - cy[m].min() + s),
            float(cx[m].max() - cx[m].min() + s),
        )

    def gt_warp_points(self, a: int, b: int, pts) -> np.ndarray:
        """Exact GT correspondence: instance-a pixels -> instance-b pixels."""
        return _affine_apply(
            self.warps[b], _affine_apply(self.inv_warps[a], pts)
        )

    def gt_flow_field(self, a: int, b: int) -> DisplacementField:
        """Oracle displacement field a -> b, valid on instance a's mask."""
        h, w = self.spec.grid_hw
        cx, cy = cell_centers(h, w, self.spec.stride_px)
        pts = np.stack([cx.ravel(), cy.ravel()], axis=1)
        warped = self.gt_warp_points(a, b, pts)
        eh, ew = self.image_extent_px
        in_img = (
            (warped[:, 0] >= 0) & (warped[:, 0] <= ew)
            & (warped[:, 1] >= 0) & (warped[:, 1] <= eh)
        ).reshape(h, w)
        valid = self.masks[a] & in_img
        vectors = (warped - pts).reshape(h, w, 2)
        vectors[~valid] = 0.0
        return DisplacementField(
            vectors=vectors, valid=valid, stride_px=self.spec.stride_px
        )

    def annotated(self, a: int, b: int, split: str = "seen") -> CorrespondenceSet:
        idx = self.seen_idx if split == "seen" else self.unseen_idx
        return CorrespondenceSet.from_pairs(
            self.keypoints[a][idx], self.keypoints[b][idx], "annotated"
        )

    def instance_pairs(self) -> list[tuple[int, int]]:
        n = self.spec.n_instances
        return [(a, b) for a in range(n) for b in range(n) if a != b]

    # -- serialization (scene.json; grids are stored separately as features) --

    def manifest(self) -> dict:
        return {
            "spec": {**asdict(self.spec), "grid_hw": list(self.spec.grid_hw)},
            "seed": self.seed,
            "warps": [w.tolist() for w in self.warps],
            "keypoints_canonical": self.keypoints_canonical.tolist(),
            "keypoints": [k.tolist() for k in self.keypoints],
            "splits": {
                "seen": self.seen_idx.tolist(),
                "unseen": self.unseen_idx.tolist(),
            },
        }

    @classmethod
    def from_manifest(cls, manifest: dict, grids, masks) -> "SyntheticScene":
        raw = dict(manifest["spec"])
        raw["grid_hw"] = tuple(raw["grid_hw"])
        spec = SceneSpec(**raw)
        return cls(
            spec=spec,
            seed=int(manifest["seed"]),
            warps=[np.asarray(w, dtype=np.float64) for w in manifest["warps"]],
            grids=grids,
            masks=masks,
            keypoints_canonical=np.asarray(manifest["keypoints_canonical"]),
            keypoints=[np.asarray(k, dtype=np.float64) for k in manifest["keypoints"]],
        )


def _sample_warp(rng: np.random.Generator, complexity: float,
                 center: np.ndarray, stride: float) -> np.ndarray:
    """Random invertible affine about the image center."""
    angle = rng.uniform(-np.deg2rad(5.0), np.deg2rad(5.0)) * complexity
    log_s = rng.uniform(-0.05, 0.05) * complexity
    shear = rng.uniform(-0.05, 0.05) * complexity
    t = rng.uniform(-0.75, 0.75, size=2) * complexity * stride
    c, s = np.cos(angle), np.sin(angle)
    lin = np.exp(log_s) * np.array([[c, -s], [s, c]]) @ np.array(
        [[1.0, shear], [0.0, 1.0]]
    )
    off = center - lin @ center + t
    return np.column_stack([lin, off])


def _in_object(spec: SceneSpec, bx, by, extent_hw):
    """Canonical-coordinate object membership: an ellipse, minus the
    undefined-side band around the mirror axis when the scene is symmetric."""
    eh, ew = extent_hw
    inside = ((bx - ew / 2) / (0.38 * ew)) ** 2 + (
        (by - eh / 2) / (0.38 * eh)
    ) ** 2 <= 1.0
    if spec.symmetry and spec.axis_gap_cells > 0:
        inside = inside & (
            np.abs(bx - ew / 2) >= spec.axis_gap_cells * spec.stride_px
        )
    return inside


def _canonical_field(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    h, w = spec.grid_hw
    field = rng.normal(size=(h, w, spec.dim))
    field = gaussian_filter(
        field, sigma=(spec.smoothness_cells, spec.smoothness_cells, 0.0),
        mode="nearest",
    )
    norms = np.sqrt((field ** 2).sum(axis=2, keepdims=True))
    field = field / np.maximum(norms, 1e-12)
    if spec.symmetry:
        # right half = blend of the mirrored left half with its own content;
        # strength 1.0 makes the twin identical
        s = spec.symmetry_strength
        for j in range(w // 2, w):
            field[:, j] = s * field[:, w - 1 - j] + (1.0 - s) * field[:, j]
        norms = np.sqrt((field ** 2).sum(axis=2, keepdims=True))
        field = field / np.maximum(norms, 1e-12)
    return field


def _instance_noise(rng: np.random.Generator, spec: SceneSpec,
                    hw: tuple[int, int]) -> np.ndarray:
    """Per-instance feature noise, spatially correlated like real backbone
    noise (neighbouring patches drift together, so matching errors form
    coherent regions rather than salt-and-pepper)."""
    noise = rng.normal(size=(*hw, spec.dim))
    if spec.noise_sigma == 0.0:
        return np.zeros_like(noise)
    if spec.noise_corr_cells > 0:
        noise = gaussian_filter(
            noise, sigma=(spec.noise_corr_cells, spec.noise_corr_cells, 0.0),
            mode="nearest",
        )
        noise /= max(noise.std(), 1e-12)
    return spec.noise_sigma * noise


def _sample_keypoints(rng: np.random.Generator, spec: SceneSpec,
                      warps, extent_hw) -> np.ndarray:
    """Canonical keypoints inside the mask ellipse, min-separated, off the
    symmetry axis, landing inside every instance image."""
    n = spec.n_seen_kp + spec.n_unseen_kp
    eh, ew = extent_hw
    stride = spec.stride_px
    pts: list[np.ndarray] = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > 20000:
            raise InvalidInputError(
                "could not place keypoints; relax the scene spec"
            )
        p = np.array([
            rng.uniform(0.1 * ew, 0.9 * ew), rng.uniform(0.1 * eh, 0.9 * eh)
        ])
        if ((p[0] - ew / 2) / (0.38 * ew)) ** 2 + (
            (p[1] - eh / 2) / (0.38 * eh)
        ) ** 2 > 0.85:
            continue
        if spec.symmetry and abs(p[0] - ew / 2) < (
            max(2.0, spec.axis_gap_cells + 0.5) * stride
        ):
            continue
        if any(np.hypot(*(p - q)) < 2.0 * stride for q in pts):
            continue
        landed = [_affine_apply(a, p)[0] for a in warps]
        if any(
            not (0.05 * ew <= q[0] <= 0.95 * ew and 0.05 * eh <= q[1] <= 0.95 * eh)
            for q in landed
        ):
            continue
        pts.append(p)
    return np.array(pts)


def synth_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Deterministically render a scene from its spec and seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = spec.grid_hw
    stride = spec.stride_px
    eh, ew = h * stride, w * stride
    center = np.array([ew / 2.0, eh / 2.0])

    canonical = _canonical_field(rng, spec)

    warps = [
        _sample_warp(rng, spec.warp_complexity, center, stride)
        for _ in range(spec.n_instances)
    ]

    cx, cy = cell_centers(h, w, stride)
    lattice = np.stack([cx.ravel(), cy.ravel()], axis=1)
    grids, masks = [], []
    for a in warps:
        back = _affine_apply(_affine_invert(a), lattice)
        # bilinear pull of the canonical field at the back-warped centers
        data = sample_field(canonical, stride, back).reshape(h, w, spec.dim)
        data += _instance_noise(rng, spec, (h, w))
        # background cells get fresh unstructured content per instance
        bx = back[:, 0].reshape(h, w)
        by = back[:, 1].reshape(h, w)
        inside = _in_object(spec, bx, by, (eh, ew))
        bg = rng.normal(size=(h, w, spec.dim))
        data = np.where(inside[:, :, None], data, bg)
        grid = normalize_descriptors(
            FeatureGrid(data=data.astype(np.float32), stride_px=stride)
        )
        grids.append(grid)
        masks.append(inside)

    kp_canon = _sample_keypoints(rng, spec, warps, (eh, ew))
    keypoints = [_affine_apply(a, kp_canon) for a in warps]
    return SyntheticScene(
        spec=spec,
        seed=seed,
        warps=warps,
        grids=grids,
        masks=masks,
        keypoints_canonical=kp_canon,
        keypoints=keypoints,
    )


def save_scene(scene: SyntheticScene, outdir: str) -> None:
    """Write scene.json plus one feature container (with mask) per instance."""
    from .fileio import atomic_write_text, dump_json, write_feature_file

    os.makedirs(outdir, exist_ok=True)
    for i, (grid, mask) in enumerate(zip(scene.grids, scene.masks)):
        write_feature_file(
            os.path.join(outdir, f"inst_{i:02d}.mrcf"), grid, mask=mask
        )
    atomic_write_text(
        os.path.join(outdir, "scene.json"), dump_json(scene.manifest())
    )


def load_scene(scene_dir: str) -> SyntheticScene:
    """Inverse of save_scene; grids round-trip bit-exactly."""
    from .fileio import read_feature_file

    with open(os.path.join(scene_dir, "scene.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    n = int(manifest["spec"]["n_instances"])
    grids, masks = [], []
    for i in range(n):
        grid, mask = read_feature_file(
            os.path.join(scene_dir, f"inst_{i:02d}.mrcf"), with_mask=True
        )
        if mask is None:
            raise InvalidInputError(f"instance {i} is missing its mask block")
        grids.append(grid)
        masks.append(np.array(mask.mask))
    return SyntheticScene.from_manifest(manifest, grids, masks)
