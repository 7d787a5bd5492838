"""Keypoint-bbox region files for restricting mining to the object.

The JSON mirrors the consumer's bbox-region convention:
{"kind": "bbox", "bbox": [min_x, min_y, max_x, max_y]} in pixel units of
the resized image.
"""

from __future__ import annotations

import json
import os

import numpy as np


def keypoint_bbox_region(points, margin_px: float = 0.0) -> dict:
    """Axis-aligned bbox of the keypoints, optionally padded by margin_px."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError(f"need nonempty (n, 2) keypoints, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("keypoints must be finite")
    x0, y0 = pts.min(axis=0) - margin_px
    x1, y1 = pts.max(axis=0) + margin_px
    if not (x1 > x0 and y1 > y0):
        raise ValueError(
            f"degenerate keypoint bbox ({x0}, {y0}, {x1}, {y1}); "
            "pass margin_px > 0"
        )
    return {"kind": "bbox", "bbox": [float(x0), float(y0), float(x1), float(y1)]}


def write_region_file(path: str, points, margin_px: float = 0.0) -> str:
    doc = keypoint_bbox_region(points, margin_px=margin_px)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return path
