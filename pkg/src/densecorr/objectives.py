"""Training objectives with hand-derived analytic gradients.

Two losses drive the descriptor fields: a cross-entropy between the
temperature-softmaxed similarity map and a Gaussian target heatmap whose
radius follows a cosine coarse-to-fine schedule, and an L2 loss between
soft-argmax readouts and pseudo-label targets. Gradients with respect to the
feature entries are derived in closed form (no autodiff anywhere) and chained
through the bilinear sampling of the source descriptor; dense gradient arrays
carry zeros off-support. All accumulation is float64.

Functions accepting a descriptor field take either a FeatureGrid or a raw
(H, W, D) float64 array plus an explicit stride, so learnable float64
parameters can flow through the same code path that serves frozen grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .grid import FeatureGrid, SimilarityMap, bilinear_footprint, cell_centers
from .validation import as_points, check_positive

__all__ = [
    "SigmaSchedule",
    "sigma_at",
    "TargetHeatmap",
    "gaussian_target",
    "CeLoss",
    "ce_loss",
    "LossOutput",
    "supervised_loss",
    "l2_self_loss",
    "soft_argmax",
    "windowed_soft_argmax",
    "ema_update",
]


# ----------------------------------------------------------------------------
# sigma schedule


@dataclass(frozen=True)
class SigmaSchedule:
    """Cosine anneal of the target radius from sigma_max down to sigma_min."""

    sigma_max: float = 3.0
    sigma_min: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        check_positive(self.sigma_min, "sigma_min")
        if self.sigma_max < self.sigma_min:
            raise InvalidInputError(
                f"sigma_max {self.sigma_max} < sigma_min {self.sigma_min}"
            )
        if self.total_steps < 1:
            raise InvalidInputError("total_steps must be >= 1")


def sigma_at(schedule: SigmaSchedule, t: int | float) -> float:
    """sigma(t) = sigma_min + (sigma_max - sigma_min) (1 + cos(pi t / T)) / 2."""
    t = float(t)
    if not (0.0 <= t <= schedule.total_steps):
        raise InvalidInputError(
            f"step {t} outside [0, {schedule.total_steps}]"
        )
    span = schedule.sigma_max - schedule.sigma_min
    return float(
        schedule.sigma_min
        + 0.5 * span * (1.0 + np.cos(np.pi * t / schedule.total_steps))
    )


# ----------------------------------------------------------------------------
# target heatmaps


@dataclass(frozen=True)
class TargetHeatmap:
    """Unit-mass Gaussian bump over a cell lattice (distances in cell units)."""

    probs: np.ndarray  # (H, W) float64, sums to 1
    center_px: np.ndarray
    sigma_cells: float


def _gaussian_rows(centers_px: np.ndarray, sigma_cells: float,
                   grid_hw: tuple[int, int], stride_px: float) -> np.ndarray:
    """(K, H*W) normalized Gaussian masses for K centers."""
    h, w = grid_hw
    ccx = centers_px[:, 0] / stride_px - 0.5
    ccy = centers_px[:, 1] / stride_px - 0.5
    jj = np.arange(w, dtype=np.float64)
    ii = np.arange(h, dtype=np.float64)
    d2 = (
        (jj[None, None, :] - ccx[:, None, None]) ** 2
        + (ii[None, :, None] - ccy[:, None, None]) ** 2
    ).reshape(len(centers_px), h * w)
    # shift by the row min before exponentiating: normalization cancels the
    # shift and distant centers cannot underflow the whole row to zero
    d2 -= d2.min(axis=1, keepdims=True)
    g = np.exp(-d2 / (2.0 * sigma_cells ** 2))
    return g / g.sum(axis=1, keepdims=True)


def gaussian_target(center_px, sigma_cells: float, grid_hw: tuple[int, int],
                    stride_px: float) -> TargetHeatmap:
    """Gaussian target bump centered at a pixel point, normalized to sum 1."""
    check_positive(sigma_cells, "sigma_cells")
    check_positive(stride_px, "stride_px")
    center = as_points(np.asarray(center_px, dtype=np.float64).reshape(1, 2),
                       "center_px")
    h, w = int(grid_hw[0]), int(grid_hw[1])
    if h < 1 or w < 1:
        raise InvalidInputError(f"grid dims must be positive, got {grid_hw}")
    probs = _gaussian_rows(center, sigma_cells, (h, w), stride_px)[0].reshape(h, w)
    return TargetHeatmap(probs=probs, center_px=center[0], sigma_cells=float(sigma_cells))


# ----------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class CeLoss:
    value: float
    grad_scores: np.ndarray  # (H, W) float64, d value / d scores


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce_loss(sim: SimilarityMap, target: TargetHeatmap, temperature: float = 0.05) -> CeLoss:
    """Cross-entropy of the softmaxed similarity map against the target bump.

    value = -sum_u G(u) log softmax(S / T)(u); the gradient with respect to
    the raw scores is (softmax(S / T) - G) / T.
    """
    check_positive(temperature, "temperature")
    s = sim.scores
    g = target.probs
    if s.shape != g.shape:
        raise InvalidInputError(f"shape mismatch: scores {s.shape}, target {g.shape}")
    z = (s / temperature).reshape(1, -1)
    zmax = z.max()
    logsumexp = zmax + np.log(np.exp(z - zmax).sum())
    logp = z - logsumexp
    value = float(-(g.reshape(-1) * logp[0]).sum())
    grad = (_softmax_rows(z)[0].reshape(s.shape) - g) / temperature
    return CeLoss(value=value, grad_scores=grad)


@dataclass(frozen=True)
class LossOutput:
    """Loss value plus dense per-cell feature gradients.

    grad_src / grad_tgt align with the source/target descriptor fields;
    entries are zero outside the cells that enter the loss.
    """

    value: float
    grad_src: np.ndarray
    grad_tgt: np.ndarray
    flags: tuple = ()


def _as_field(x, stride_px=None) -> tuple[np.ndarray, float]:
    """Float64 (H, W, D) view of a FeatureGrid or raw parameter array."""
    if isinstance(x, FeatureGrid):
        return x.data.astype(np.float64), x.stride_px
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInputError(f"descriptor field must be (H, W, D), got {arr.shape}")
    if stride_px is None:
        raise InvalidInputError("stride_px is required with raw field arrays")
    return arr, float(stride_px)


def _gather_sources(src_data: np.ndarray, stride: float, points: np.ndarray):
    """Bilinear descriptors for K pixel points: (K, D) plus the footprint."""
    h, w, _ = src_data.shape
    cells, weights = bilinear_footprint(points, stride, h, w)
    gathered = src_data[cells[:, :, 0], cells[:, :, 1]]  # (K, 4, D)
    descs = np.einsum("kc,kcd->kd", weights, gathered, optimize=False)
    return descs, cells, weights


def _scatter_sources(grad_descs: np.ndarray, cells: np.ndarray,
                     weights: np.ndarray, out: np.ndarray) -> None:
    """Accumulate per-point descriptor gradients back through the bilinear
    footprint; np.add.at applies updates in index order (deterministic)."""
    d = grad_descs.shape[1]
    contrib = weights[:, :, None] * grad_descs[:, None, :]  # (K, 4, D)
    np.add.at(out, (cells[:, :, 0].ravel(), cells[:, :, 1].ravel()),
              contrib.reshape(-1, d))


def _pair_points(pairs) -> tuple[np.ndarray, np.ndarray]:
    # a CorrespondenceSet-like object, or a plain (src, tgt) pair of arrays
    if hasattr(pairs, "src") and hasattr(pairs, "tgt"):
        src, tgt = pairs.src, pairs.tgt
    else:
        src, tgt = pairs
    return as_points(src, "src points"), as_points(tgt, "tgt points")


def supervised_loss(
    pairs,
    src_field,
    tgt_field,
    sigma_cells: float,
    temperature: float = 0.05,
    stride_src: float | None = None,
    stride_tgt: float | None = None,
) -> LossOutput:
    """Mean keypoint cross-entropy, with gradients into both fields.

    For each annotated pair, the source descriptor is bilinearly sampled at
    the source point, scored against every target cell, softmaxed at
    `temperature`, and penalized against a Gaussian bump of radius
    `sigma_cells` centered on the annotated target.
    """
    check_positive(temperature, "temperature")
    src_data, s_stride = _as_field(src_field, stride_src)
    tgt_data, t_stride = _as_field(tgt_field, stride_tgt)
    src_pts, tgt_pts = _pair_points(pairs)
    if len(src_pts) != len(tgt_pts):
        raise InvalidInputError("src/tgt point counts differ")
    grad_src = np.zeros_like(src_data)
    grad_tgt = np.zeros_like(tgt_data)
    if len(src_pts) == 0:
        return LossOutput(0.0, grad_src, grad_tgt, flags=("empty-pairs",))

    th, tw, d = tgt_data.shape
    k = len(src_pts)
    descs, cells, weights = _gather_sources(src_data, s_stride, src_pts)
    tgt_flat = tgt_data.reshape(-1, d)
    scores = np.einsum("kd,cd->kc", descs, tgt_flat, optimize=False)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("similarity scores are non-finite")
    g = _gaussian_rows(tgt_pts, sigma_cells, (th, tw), t_stride)

    z = scores / temperature
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    value = float(-(g * logp).sum(axis=1).mean())

    dz = (_softmax_rows(z) - g) / (temperature * k)  # (K, C)
    grad_tgt += np.einsum("kc,kd->cd", dz, descs, optimize=False).reshape(
        th, tw, d
    )
    grad_descs = np.einsum("kc,cd->kd", dz, tgt_flat, optimize=False)
    _scatter_sources(grad_descs, cells, weights, grad_src)
    return LossOutput(value=value, grad_src=grad_src, grad_tgt=grad_tgt)


def l2_self_loss(
    pairs,
    student_src,
    student_tgt,
    temperature: float = 0.05,
    stride_src: float | None = None,
    stride_tgt: float | None = None,
) -> LossOutput:
    """Mean squared distance between soft-argmax readouts and pair targets.

    For each pair (u, v): the source descriptor at u is scored against the
    target field, softmaxed at `temperature`, and read out as the
    probability-weighted mean of target cell centers; the loss is the mean of
    |readout - v|^2 over pairs. Empty input yields value 0 and zero
    gradients, flagged "empty-pairs".
    """
    check_positive(temperature, "temperature")
    src_data, s_stride = _as_field(student_src, stride_src)
    tgt_data, t_stride = _as_field(student_tgt, stride_tgt)
    src_pts, tgt_pts = _pair_points(pairs)
    if len(src_pts) != len(tgt_pts):
        raise InvalidInputError("src/tgt point counts differ")
    grad_src = np.zeros_like(src_data)
    grad_tgt = np.zeros_like(tgt_data)
    if len(src_pts) == 0:
        return LossOutput(0.0, grad_src, grad_tgt, flags=("empty-pairs",))

    th, tw, d = tgt_data.shape
    k = len(src_pts)
    descs, cells, weights = _gather_sources(src_data, s_stride, src_pts)
    tgt_flat = tgt_data.reshape(-1, d)
    scores = np.einsum("kd,cd->kc", descs, tgt_flat, optimize=False)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("similarity scores are non-finite")

    cx, cy = cell_centers(th, tw, t_stride)
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (C, 2)
    p = _softmax_rows(scores / temperature)  # (K, C)
    preds = np.einsum("kc,cx->kx", p, centers, optimize=False)  # (K, 2)
    r = preds - tgt_pts  # (K, 2)
    value = float((r ** 2).sum(axis=1).mean())

    # d pred / d score_u = p_u (center_u - pred) / T, so
    # d loss_k / d score_u = (2 / T) p_u <center_u - pred, r>
    diff = centers[None, :, :] - preds[:, None, :]  # (K, C, 2)
    dz = (2.0 / temperature) * p * np.einsum(
        "kcx,kx->kc", diff, r, optimize=False
    ) / k
    grad_tgt += np.einsum("kc,kd->cd", dz, descs, optimize=False).reshape(
        th, tw, d
    )
    grad_descs = np.einsum("kc,cd->kd", dz, tgt_flat, optimize=False)
    _scatter_sources(grad_descs, cells, weights, grad_src)
    return LossOutput(value=value, grad_src=grad_src, grad_tgt=grad_tgt)


# ----------------------------------------------------------------------------
# readouts


def soft_argmax(sim: SimilarityMap, temperature: float = 0.05) -> np.ndarray:
    """Probability-weighted mean of cell centers under softmax(S / T)."""
    check_positive(temperature, "temperature")
    h, w = sim.scores.shape
    p = _softmax_rows((sim.scores / temperature).reshape(1, -1))[0]
    cx, cy = cell_centers(h, w, sim.stride_px)
    return np.array([(p * cx.ravel()).sum(), (p * cy.ravel()).sum()])


def windowed_soft_argmax(
    sim: SimilarityMap, window_cells: int = 15, temperature: float = 0.05
) -> np.ndarray:
    """Soft-argmax restricted to a box around the global argmax.

    The box is `window_cells` on a side (odd), centered on the argmax cell
    (ties to the lowest row-major index) and clipped at the borders. A window
    covering the whole grid reproduces plain soft_argmax exactly.
    """
    check_positive(temperature, "temperature")
    if window_cells < 1 or window_cells % 2 == 0:
        raise InvalidInputError(f"window_cells must be odd and >= 1, got {window_cells}")
    h, w = sim.scores.shape
    flat_idx = int(np.argmax(sim.scores))
    i_star, j_star = divmod(flat_idx, w)
    half = window_cells // 2
    i0, i1 = max(0, i_star - half), min(h - 1, i_star + half)
    j0, j1 = max(0, j_star - half), min(w - 1, j_star + half)
    sub = sim.scores[i0 : i1 + 1, j0 : j1 + 1]
    p = _softmax_rows((sub / temperature).reshape(1, -1))[0].reshape(sub.shape)
    cx, cy = cell_centers(h, w, sim.stride_px)
    cx = cx[i0 : i1 + 1, j0 : j1 + 1]
    cy = cy[i0 : i1 + 1, j0 : j1 + 1]
    return np.array([(p * cx).sum(), (p * cy).sum()])


# ----------------------------------------------------------------------------
# teacher update


def ema_update(teacher_params, student_params, beta: float = 0.999):
    """theta_T <- beta * theta_T + (1 - beta) * theta_S, elementwise.

    Accepts a single ndarray, a sequence of ndarrays, or a dict of ndarrays;
    returns the same structure with new arrays. Shapes must match exactly.
    """
    beta = float(beta)
    if not (0.0 <= beta <= 1.0) or not np.isfinite(beta):
        raise InvalidInputError(f"beta must lie in [0, 1], got {beta}")

    def one(t, s):
        t = np.asarray(t, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        if t.shape != s.shape:
            raise InvalidInputError(
                f"teacher/student shapes differ: {t.shape} vs {s.shape}"
            )
        return beta * t + (1.0 - beta) * s

    if isinstance(teacher_params, dict):
        if set(teacher_params) != set(student_params):
            raise InvalidInputError("teacher/student dict keys differ")
        return {k: one(teacher_params[k], student_params[k]) for k in sorted(teacher_params)}
    if isinstance(teacher_params, (list, tuple)):
        if len(teacher_params) != len(student_params):
            raise InvalidInputError("teacher/student sequence lengths differ")
        return [one(t, s) for t, s in zip(teacher_params, student_params)]
    return one(teacher_params, student_params)
