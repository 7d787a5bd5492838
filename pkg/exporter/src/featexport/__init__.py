"""featexport: dense per-patch image features -> MRCF containers + regions."""

from .backbones import HandcraftedBackbone, load_backbone
from .export import bilinear_upsample_x4, decode_image, export_features
from .manifest import (
    BackboneLoadError,
    ExportError,
    ExportManifest,
    ImageDecodeError,
)
from .regions import keypoint_bbox_region, write_region_file

__all__ = [
    "BackboneLoadError",
    "ExportError",
    "ExportManifest",
    "HandcraftedBackbone",
    "ImageDecodeError",
    "bilinear_upsample_x4",
    "decode_image",
    "export_features",
    "keypoint_bbox_region",
    "load_backbone",
    "write_region_file",
]
