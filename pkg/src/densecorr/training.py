"""Desk-scale training lab: descriptor fields trained directly by gradient
descent.

The "model" is the parameter set itself: one float64 (H, W, D) descriptor
field per scene instance, initialized from the rendered grids. Every step
samples one ordered instance pair, applies the supervised keypoint loss (with
the coarse-to-fine sigma schedule), optionally mines pseudo-labels from an
EMA teacher copy of the fields and applies the dense self-distillation loss,
takes a plain gradient-descent step, and updates the teacher. No deep
learning framework is involved anywhere; gradients are the analytic ones from
`objectives`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import InvalidInputError, NumericalGuardError
from .validation import check_positive
from .grid import FeatureGrid, SimilarityMap, sample_field
from .metrics import PckRecord, perturb_pseudo_labels, pck_aggregate
from .mining import PseudoLabelMiner
from .objectives import (
    SigmaSchedule,
    ema_update,
    l2_self_loss,
    sigma_at,
    supervised_loss,
    windowed_soft_argmax,
)
from .synthetic import SyntheticScene

__all__ = ["ToyTrainer", "train_toy", "evaluate_pck"]


def _predict_points(
    src_field: np.ndarray,
    tgt_field: np.ndarray,
    stride: float,
    points: np.ndarray,
    window_cells: int,
    temperature: float,
) -> np.ndarray:
    """Windowed soft-argmax matches for each source point, (K, 2) pixels."""
    descs = sample_field(src_field, stride, points)
    th, tw, d = tgt_field.shape
    tgt_flat = np.asarray(tgt_field, dtype=np.float64).reshape(-1, d)
    preds = np.empty((len(points), 2), dtype=np.float64)
    for n, f in enumerate(descs):
        scores = np.einsum("cd,d->c", tgt_flat, f, optimize=False).reshape(th, tw)
        sim = SimilarityMap(scores=scores, stride_px=stride)
        preds[n] = windowed_soft_argmax(sim, window_cells, temperature)
    return preds


def evaluate_pck(
    fields: list[np.ndarray],
    scene: SyntheticScene,
    alphas=(0.01, 0.10),
    window_cells: int = 15,
    temperature: float = 0.05,
) -> dict:
    """PCK of windowed soft-argmax matching over all ordered instance pairs.

    Every ordered pair contributes one per-image record (the per-image-first
    convention); returns {"seen"|"unseen": {alpha: value}}.
    """
    stride = scene.spec.stride_px
    out = {}
    for split in ("seen", "unseen"):
        idx = scene.seen_idx if split == "seen" else scene.unseen_idx
        records = []
        for a, b in scene.instance_pairs():
            pts = scene.keypoints[a][idx]
            gts = scene.keypoints[b][idx]
            preds = _predict_points(
                fields[a], fields[b], stride, pts, window_cells, temperature
            )
            records.append(
                PckRecord(
                    image_id=f"{a}->{b}",
                    preds=preds,
                    gts=gts,
                    bbox_hw=scene.bbox_hw(b),
                )
            )
        out[split] = pck_aggregate(records, alphas)
    return out


class ToyTrainer(BaseEstimator):
    """Trains per-instance descriptor fields on a synthetic scene.

    Parameters mirror the training-side knobs: `use_dense_loss` switches the
    mined self-distillation term, `fixed_sigma` (when set) replaces the
    cosine schedule, `lambda_self` weighs the dense term, and
    `pseudo_noise_px` perturbs mined targets (robustness probes). All
    randomness flows from `seed`; fitting twice gives bit-identical history.
    """

    def __init__(
        self,
        steps: int = 300,
        lr: float = 0.1,
        temperature: float = 0.05,
        use_dense_loss: bool = True,
        lambda_self: float = 1.0,
        beta: float = 0.999,
        sigma_max: float = 3.0,
        sigma_min: float = 1.0,
        fixed_sigma: float | None = None,
        window_cells: int = 15,
        k_init: int = 15,
        r_anchor_cells: float = 1.5,
        min_similarity: float | None = None,
        pseudo_noise_px: float = 0.0,
        eval_every: int = 50,
        eval_alphas: tuple = (0.01, 0.10),
        seed: int = 0,
    ):
        self.steps = steps
        self.lr = lr
        self.temperature = temperature
        self.use_dense_loss = use_dense_loss
        self.lambda_self = lambda_self
        self.beta = beta
        self.sigma_max = sigma_max
        self.sigma_min = sigma_min
        self.fixed_sigma = fixed_sigma
        self.window_cells = window_cells
        self.k_init = k_init
        self.r_anchor_cells = r_anchor_cells
        self.min_similarity = min_similarity
        self.pseudo_noise_px = pseudo_noise_px
        self.eval_every = eval_every
        self.eval_alphas = eval_alphas
        self.seed = seed

    # ------------------------------------------------------------------

    def fit(self, scene: SyntheticScene) -> "ToyTrainer":
        # config errors must surface as InvalidInputError here, so that any
        # InvalidInputError raised later, inside the step loop, can only mean
        # numeric blowup and is safe to convert into the divergence guard
        check_positive(self.temperature, "temperature")
        check_positive(self.lr, "lr")
        if self.steps < 0:
            raise InvalidInputError(f"steps must be >= 0, got {self.steps}")
        stride = scene.spec.stride_px
        students = [g.data.astype(np.float64) for g in scene.grids]
        teachers = [s.copy() for s in students]
        schedule = SigmaSchedule(
            sigma_max=self.sigma_max,
            sigma_min=self.sigma_min,
            total_steps=max(self.steps, 1),
        )
        rng = np.random.Generator(np.random.PCG64(self.seed))
        pairs = scene.instance_pairs()
        miner = PseudoLabelMiner(
            k_init=self.k_init,
            r_anchor_cells=self.r_anchor_cells,
            min_similarity=self.min_similarity,
            normalize=True,
        )

        history = {"steps": [], "evals": []}

        def run_eval(step: int):
            pck = evaluate_pck(
                students, scene, self.eval_alphas, self.window_cells,
                self.temperature,
            )
            history["evals"].append(
                {
                    "step": step,
                    "pck": {
                        split: {repr(float(a)): v for a, v in table.items()}
                        for split, table in pck.items()
                    },
                }
            )

        run_eval(0)
        for t in range(self.steps):
            a, b = pairs[rng.integers(len(pairs))]
            sigma = (
                float(self.fixed_sigma)
                if self.fixed_sigma is not None
                else sigma_at(schedule, t)
            )
            ann = scene.annotated(a, b, "seen")
            try:
                sup = supervised_loss(
                    ann, students[a], students[b], sigma,
                    temperature=self.temperature,
                    stride_src=stride, stride_tgt=stride,
                )
                grad_a = sup.grad_src
                grad_b = sup.grad_tgt
                loss_self = 0.0
                n_pseudo = 0
                if self.use_dense_loss and self.lambda_self > 0.0:
                    miner.seed = self.seed ^ (t + 1)
                    result = miner.mine(
                        FeatureGrid(teachers[a].astype(np.float32), stride),
                        FeatureGrid(teachers[b].astype(np.float32), stride),
                        ann,
                        region_src=scene.mask_region(a),
                        region_tgt=scene.mask_region(b),
                    )
                    pseudo = result.pseudo_labels
                    if self.pseudo_noise_px > 0.0 and len(pseudo) > 0:
                        pseudo = perturb_pseudo_labels(
                            pseudo, self.pseudo_noise_px,
                            seed=(self.seed * 2654435761 + t) % (1 << 63),
                        )
                    n_pseudo = len(pseudo)
                    if n_pseudo > 0:
                        dense = l2_self_loss(
                            pseudo, students[a], students[b],
                            temperature=self.temperature,
                            stride_src=stride, stride_tgt=stride,
                        )
                        loss_self = dense.value
                        grad_a = grad_a + self.lambda_self * dense.grad_src
                        grad_b = grad_b + self.lambda_self * dense.grad_tgt
            except InvalidInputError as exc:
                # config was validated up front, so a loss-side rejection here
                # means the fields have blown up (overflowing scores etc.)
                raise NumericalGuardError(
                    f"loss computation failed at step {t}: {exc}", step=t
                ) from exc

            total = sup.value + self.lambda_self * loss_self
            if not np.isfinite(total):
                raise NumericalGuardError(
                    f"loss diverged at step {t}: {total}", step=t
                )
            students[a] = students[a] - self.lr * grad_a
            students[b] = students[b] - self.lr * grad_b
            if not (
                np.all(np.isfinite(students[a])) and np.all(np.isfinite(students[b]))
            ):
                raise NumericalGuardError(
                    f"parameters diverged at step {t}", step=t
                )
            teachers = ema_update(teachers, students, self.beta)

            history["steps"].append(
                {
                    "step": t,
                    "pair": [int(a), int(b)],
                    "sigma": float(sigma),
                    "loss_sup": float(sup.value),
                    "loss_self": float(loss_self),
                    "n_pseudo": int(n_pseudo),
                }
            )
            if self.eval_every > 0 and (t + 1) % self.eval_every == 0:
                run_eval(t + 1)

        if not history["evals"] or history["evals"][-1]["step"] != self.steps:
            run_eval(self.steps)
        self.students_ = students
        self.teachers_ = teachers
        self.history_ = history
        self.stride_px_ = stride
        return self

    # ------------------------------------------------------------------

    def predict(self, scene: SyntheticScene, pair: tuple[int, int], points) -> np.ndarray:
        """Predicted target-pixel matches for source points of pair (a, b)."""
        self._check_fitted()
        a, b = pair
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return _predict_points(
            self.students_[a], self.students_[b], self.stride_px_, pts,
            self.window_cells, self.temperature,
        )

    def score(self, scene: SyntheticScene, split: str = "unseen",
              alpha: float = 0.10) -> float:
        """PCK@alpha of the fitted fields on the given keypoint split."""
        self._check_fitted()
        pck = evaluate_pck(
            self.students_, scene, (alpha,), self.window_cells, self.temperature
        )
        return pck[split][float(alpha)]

    def final_pck(self) -> dict:
        self._check_fitted()
        return self.history_["evals"][-1]["pck"]

    def _check_fitted(self):
        if not hasattr(self, "students_"):
            raise NotFittedError("ToyTrainer is not fitted; call fit(scene) first")


def train_toy(scene: SyntheticScene, **params) -> ToyTrainer:
    """Functional wrapper: fit a ToyTrainer on `scene` with given params."""
    return ToyTrainer(**params).fit(scene)
