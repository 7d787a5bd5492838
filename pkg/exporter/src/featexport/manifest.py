"""Export manifest: which image, which backbone, at what scale, where to."""

from __future__ import annotations

from dataclasses import dataclass


class ExportError(Exception):
    """Base class for exporter failures; `code` is a stable machine tag."""

    code = "export-error"


class BackboneLoadError(ExportError):
    code = "backbone-load-failure"


class ImageDecodeError(ExportError):
    code = "image-decode-failure"


@dataclass(frozen=True)
class ExportManifest:
    """One image in, one feature container out.

    The image is resized to input_px x input_px before feature extraction,
    so all emitted coordinates (header stride included) live in resized-image
    pixels, not original-image pixels. input_px must be a positive multiple
    of patch_px so the patch lattice tiles the resized image exactly.

    upsample4x swaps the raw patch lattice for a bilinearly x4-upsampled
    one, recording stride_px = patch_px / 4 (3.5 for 14-px patches). This
    stands in for a learned upsampling head and is a documented fidelity
    gap, not an equivalent.
    """

    image_path: str
    out_path: str
    input_px: int
    backbone: str = "handcrafted"
    patch_px: int = 14
    upsample4x: bool = False
    normalize: bool = False

    def __post_init__(self):
        if self.patch_px <= 0:
            raise ValueError(f"patch_px must be positive, got {self.patch_px}")
        if self.input_px <= 0 or self.input_px % self.patch_px != 0:
            raise ValueError(
                f"input_px {self.input_px} is not a positive multiple of "
                f"patch_px {self.patch_px}"
            )

    @property
    def grid_cells(self) -> int:
        return self.input_px // self.patch_px

    @property
    def stride_px(self) -> float:
        return self.patch_px / 4.0 if self.upsample4x else float(self.patch_px)
