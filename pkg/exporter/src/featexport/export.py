"""Run a backbone over one image and write the MRCF feature container.

The container layout is fixed by the consumer: a 24-byte little-endian
header (magic "MRCF", version u16, height u32, width u32, dim u32,
stride f32, flags u16) followed by row-major float32 descriptors. Flag
bit 0 marks L2-normalized payloads; this writer never emits a mask block
(bit 1). Files are written via temp-then-rename so readers never see a
truncated container.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image

from .backbones import load_backbone
from .manifest import ExportError, ExportManifest, ImageDecodeError

_HEADER = struct.Struct("<4sHIIIfH")
_MAGIC = b"MRCF"
_VERSION = 1
_FLAG_NORMALIZED = 1


def decode_image(path: str, input_px: int) -> np.ndarray:
    """Decode, force RGB, and bicubically resize to input_px x input_px."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((input_px, input_px), Image.BICUBIC)
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode {path!r}: {exc}") from exc
    return np.asarray(im, dtype=np.float64) / 255.0


def bilinear_upsample_x4(cells: np.ndarray) -> np.ndarray:
    """(h, w, d) -> (4h, 4w, d), sampled at the finer lattice's cell centers.

    Coarse cell i covers fine cells 4i..4i+3; a fine center at (k + 0.5)/4
    lands at coarse coordinate (k + 0.5)/4 - 0.5, clamped so borders
    replicate instead of extrapolating.
    """
    h, w = cells.shape[:2]

    def axis(n: int):
        c = np.clip((np.arange(4 * n) + 0.5) / 4.0 - 0.5, 0.0, n - 1.0)
        lo = np.floor(c).astype(np.int64)
        return lo, np.minimum(lo + 1, n - 1), c - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = cells[y0][:, x0] * (1 - fx) + cells[y0][:, x1] * fx
    bot = cells[y1][:, x0] * (1 - fx) + cells[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def feature_bytes(cells: np.ndarray, stride_px: float, normalized: bool) -> bytes:
    h, w, d = cells.shape
    header = _HEADER.pack(_MAGIC, _VERSION, h, w, d, float(stride_px),
                          _FLAG_NORMALIZED if normalized else 0)
    return header + np.ascontiguousarray(cells, dtype="<f4").tobytes()


def export_features(manifest: ExportManifest) -> str:
    """Extract, optionally upsample and normalize, and write atomically.

    Returns the output path. Raises BackboneLoadError / ImageDecodeError
    for the two environment-dependent failure modes; OSError propagates
    for plain filesystem trouble.
    """
    backbone = load_backbone(manifest.backbone)
    image = decode_image(manifest.image_path, manifest.input_px)
    cells = np.asarray(backbone(image, manifest.patch_px), dtype=np.float64)
    if cells.ndim != 3 or cells.shape[:2] != (manifest.grid_cells,) * 2:
        raise ExportError(
            f"backbone produced grid {cells.shape}, manifest implies "
            f"{manifest.grid_cells}x{manifest.grid_cells}"
        )
    if manifest.upsample4x:
        cells = bilinear_upsample_x4(cells)
    if manifest.normalize:
        norms = np.linalg.norm(cells, axis=-1, keepdims=True)
        if np.any(norms == 0.0):
            raise ExportError("cannot normalize: zero-norm descriptor cell")
        cells = cells / norms

    blob = feature_bytes(cells, manifest.stride_px, manifest.normalize)
    tmp = manifest.out_path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, manifest.out_path)
    return manifest.out_path
