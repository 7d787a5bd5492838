"""Feature backbones.

Two families: a handcrafted statistics descriptor that runs anywhere and is
bit-deterministic (the default, and the one the tests exercise), and a
torch-hub loader for pretrained patch encoders ("torchhub:<repo>:<model>")
for machines with torch plus network or cache access.
"""

from __future__ import annotations

import numpy as np

from .manifest import BackboneLoadError, ExportError

_PROJ_DIM = 16
_THUMB = 7  # gray patch is bilinearly thumbnailed to _THUMB x _THUMB
_HIST_BINS = 8
_GRAY = np.array([0.299, 0.587, 0.114])


def _thumb_coords(patch_px: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # sample positions of the thumbnail's cell centers inside one patch
    c = np.clip((np.arange(_THUMB) + 0.5) * patch_px / _THUMB - 0.5,
                0.0, patch_px - 1.0)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, patch_px - 1)
    return lo, hi, c - lo


class HandcraftedBackbone:
    """Dense per-patch descriptor from local color and gradient statistics.

    Channels per patch: 3 color means; gray mean/std/min/max; an 8-bin
    magnitude-weighted gradient-orientation histogram; a fixed random
    projection of the 7x7-thumbnailed gray patch; and a constant bias. The
    bias keeps descriptors nonzero, so a constant image yields identical,
    well-defined cells. Pure float64 numpy throughout.
    """

    dim = 3 + 4 + _HIST_BINS + _PROJ_DIM + 1

    def __init__(self):
        rng = np.random.Generator(np.random.PCG64(7))
        self._proj = rng.normal(size=(_THUMB * _THUMB, _PROJ_DIM))
        self._proj /= np.sqrt(_THUMB * _THUMB)

    def __call__(self, image: np.ndarray, patch_px: int) -> np.ndarray:
        hw = image.shape[0]
        n = hw // patch_px
        p = patch_px

        gray = image @ _GRAY
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)  # [-pi, pi]
        bins = np.minimum(
            ((ang + np.pi) * (_HIST_BINS / (2.0 * np.pi))).astype(np.int64),
            _HIST_BINS - 1,
        )

        def per_patch(plane):
            return plane.reshape(n, p, n, p)

        color_mean = image.reshape(n, p, n, p, 3).mean(axis=(1, 3))
        g = per_patch(gray)
        stats = np.stack(
            [g.mean(axis=(1, 3)), g.std(axis=(1, 3)),
             g.min(axis=(1, 3)), g.max(axis=(1, 3))], axis=-1,
        )
        hist = np.stack(
            [per_patch(np.where(bins == b, mag, 0.0)).sum(axis=(1, 3))
             for b in range(_HIST_BINS)], axis=-1,
        )

        patches = per_patch(gray).transpose(0, 2, 1, 3).reshape(n * n, p, p)
        lo, hi, frac = _thumb_coords(p)
        fy, fx = frac[:, None], frac[None, :]
        top = (patches[:, lo][:, :, lo] * (1 - fx)
               + patches[:, lo][:, :, hi] * fx)
        bot = (patches[:, hi][:, :, lo] * (1 - fx)
               + patches[:, hi][:, :, hi] * fx)
        thumbs = (top * (1 - fy) + bot * fy).reshape(n * n, -1)
        proj = (thumbs @ self._proj).reshape(n, n, _PROJ_DIM)

        bias = np.ones((n, n, 1))
        return np.concatenate([color_mean, stats, hist, proj, bias], axis=-1)


class TorchHubBackbone:
    """Thin adapter around a torch-hub patch encoder (inference only)."""

    def __init__(self, model, identifier: str):
        self._model = model.eval()
        self._identifier = identifier

    def __call__(self, image: np.ndarray, patch_px: int) -> np.ndarray:
        import torch

        n = image.shape[0] // patch_px
        mean = np.array([0.485, 0.456, 0.406])
        std = np.array([0.229, 0.224, 0.225])
        x = torch.from_numpy(
            ((image - mean) / std).transpose(2, 0, 1)[None].astype(np.float32)
        )
        with torch.inference_mode():
            if hasattr(self._model, "forward_features"):
                out = self._model.forward_features(x)
                if isinstance(out, dict):
                    out = out.get("x_norm_patchtokens", out.get("x"))
            else:
                out = self._model(x)
        tokens = out.detach().cpu().numpy().astype(np.float64)
        if tokens.ndim == 4:  # (1, d, h, w) map -> (h, w, d)
            return tokens[0].transpose(1, 2, 0)
        if tokens.ndim == 3 and tokens.shape[1] == n * n:
            return tokens[0].reshape(n, n, -1)
        raise ExportError(
            f"backbone {self._identifier!r} returned unusable features of "
            f"shape {tokens.shape}; expected (1, {n * n}, d) or (1, d, {n}, {n})"
        )


def load_backbone(identifier: str):
    """Resolve a backbone identifier to a callable (image, patch_px) -> cells."""
    if identifier == "handcrafted":
        return HandcraftedBackbone()
    if identifier.startswith("torchhub:"):
        parts = identifier.split(":")
        if len(parts) != 3 or not parts[1] or not parts[2]:
            raise BackboneLoadError(
                f"bad torch-hub identifier {identifier!r}; expected "
                "'torchhub:<repo>:<model>'"
            )
        try:
            import torch
        except ImportError as exc:
            raise BackboneLoadError(
                f"backbone {identifier!r} requires torch: {exc}"
            ) from exc
        try:
            model = torch.hub.load(parts[1], parts[2], trust_repo=True)
        except Exception as exc:  # hub raises many types; all mean "not loadable"
            raise BackboneLoadError(
                f"could not load {identifier!r}: {exc}"
            ) from exc
        return TorchHubBackbone(model, identifier)
    raise BackboneLoadError(f"unknown backbone {identifier!r}")
