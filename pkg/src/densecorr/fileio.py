"""On-disk formats: binary feature containers and correspondence JSON.

Feature container layout (all little-endian):

    offset 0   magic   4 bytes  b"MRCF"
    offset 4   version u16      currently 1
    offset 6   height  u32      cells
    offset 10  width   u32      cells
    offset 14  dim     u32      descriptor length
    offset 18  stride  f32      pixels between cell centers
    offset 22  flags   u16      bit0 = descriptors L2-normalized,
                                bit1 = mask block present
    offset 24  payload h*w*dim float32, row-major
    then       mask    h*w bytes (0/1), only if flags bit1

Floats round-trip bit-exactly. All writers write to a temp file in the
destination directory and os.replace it into place, so a crashed write never
leaves a half-written artifact; outputs contain no timestamps, which keeps
repeated runs byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, InvalidInputError
from .grid import FeatureGrid, PixelRegion
from .matching import CorrespondenceSet

__all__ = [
    "write_feature_file",
    "read_feature_file",
    "write_correspondence_file",
    "read_correspondence_file",
    "atomic_write_bytes",
    "atomic_write_text",
    "dump_json",
]

MAGIC = b"MRCF"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIfH")
FLAG_NORMALIZED = 1 << 0
FLAG_MASK = 1 << 1
# guard against absurd headers before allocating payload buffers
_MAX_ELEMENTS = 1 << 31


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write-to-temp-then-rename so readers never observe partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, fixed layout)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ----------------------------------------------------------------------------
# feature containers


def write_feature_file(path: str, grid: FeatureGrid, mask=None) -> None:
    """Serialize a feature grid (and optional cell mask) to `path`."""
    flags = 0
    if grid.normalized:
        flags |= FLAG_NORMALIZED
    blocks = []
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        if m.shape != (grid.height_cells, grid.width_cells):
            raise InvalidInputError(
                f"mask shape {m.shape} != grid dims "
                f"{(grid.height_cells, grid.width_cells)}"
            )
        flags |= FLAG_MASK
        blocks.append(m.astype(np.uint8).tobytes())
    header = _HEADER.pack(
        MAGIC, VERSION, grid.height_cells, grid.width_cells, grid.dim,
        float(grid.stride_px), flags,
    )
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, b"".join([header, payload, *blocks]))


def read_feature_file(path: str, with_mask: bool = False):
    """Parse a feature container.

    Returns the FeatureGrid, or (FeatureGrid, mask-PixelRegion-or-None) when
    `with_mask` is set. Raises FormatError with a stable code on any
    structural problem: bad-magic, bad-version, bad-header, truncated,
    trailing-bytes, bad-mask.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(
            "truncated",
            f"file is {len(raw)} bytes, header needs {_HEADER.size}",
            offset=len(raw),
        )
    magic, version, h, w, dim, stride, flags = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError("bad-magic", f"magic {magic!r} != {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(
            "bad-version", f"unsupported version {version}", offset=4
        )
    if h < 2 or w < 2 or dim < 1:
        raise FormatError(
            "bad-header", f"invalid dims {h}x{w}x{dim}", offset=6
        )
    if h * w * dim > _MAX_ELEMENTS:
        raise FormatError(
            "bad-header", f"dims {h}x{w}x{dim} overflow the element limit",
            offset=6,
        )
    if not (np.isfinite(stride) and stride > 0):
        raise FormatError("bad-header", f"invalid stride {stride}", offset=18)
    n_payload = h * w * dim * 4
    expected = _HEADER.size + n_payload + (h * w if flags & FLAG_MASK else 0)
    if len(raw) < expected:
        raise FormatError(
            "truncated",
            f"file is {len(raw)} bytes, expected {expected}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise FormatError(
            "trailing-bytes",
            f"file is {len(raw)} bytes, expected {expected}",
            offset=expected,
        )
    data = np.frombuffer(
        raw, dtype="<f4", count=h * w * dim, offset=_HEADER.size
    ).reshape(h, w, dim)
    if not np.all(np.isfinite(data)):
        raise FormatError("bad-payload", "payload contains non-finite values")
    grid = FeatureGrid(
        data=data, stride_px=float(stride), normalized=bool(flags & FLAG_NORMALIZED)
    )
    mask_region = None
    if flags & FLAG_MASK:
        mask_bytes = np.frombuffer(
            raw, dtype=np.uint8, count=h * w, offset=_HEADER.size + n_payload
        )
        if np.any(mask_bytes > 1):
            raise FormatError(
                "bad-mask", "mask bytes must be 0 or 1",
                offset=_HEADER.size + n_payload,
            )
        mask_region = PixelRegion(
            kind="mask", mask=mask_bytes.reshape(h, w).astype(bool)
        )
    if with_mask:
        return grid, mask_region
    return grid


# ----------------------------------------------------------------------------
# correspondence JSON


def _corr_payload(
    corr: CorrespondenceSet,
    image_pair: dict | None,
    bbox: dict | None,
    splits: dict | None,
    extra: dict | None,
) -> dict:
    doc = {
        "image_pair": image_pair or {},
        "bbox": bbox or {},
        "pairs": [
            {
                "sx": float(sx), "sy": float(sy),
                "tx": float(tx), "ty": float(ty),
                "provenance": str(prov),
            }
            for (sx, sy), (tx, ty), prov in zip(corr.src, corr.tgt, corr.provenance)
        ],
        "splits": splits or {"seen": [], "unseen": []},
    }
    if extra:
        doc.update(extra)
    return doc


def write_correspondence_file(
    path: str,
    corr: CorrespondenceSet,
    image_pair: dict | None = None,
    bbox: dict | None = None,
    splits: dict | None = None,
    extra: dict | None = None,
) -> None:
    atomic_write_text(path, dump_json(_corr_payload(corr, image_pair, bbox, splits, extra)))


def _check_in_image(pts: np.ndarray, hw, what: str) -> None:
    if hw is None:
        return
    h, w = float(hw[0]), float(hw[1])
    ok = (
        (pts[:, 0] >= 0) & (pts[:, 0] <= w) & (pts[:, 1] >= 0) & (pts[:, 1] <= h)
    )
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise FormatError(
            "out-of-image",
            f"{what} point {bad} at {pts[bad].tolist()} outside {h}x{w}",
        )


def read_correspondence_file(path: str):
    """Parse and validate a correspondence JSON file.

    Returns (CorrespondenceSet, metadata dict with image_pair/bbox/splits and
    any extra blocks). Coordinates must be finite (and inside the image when
    dims are recorded); split index lists must be disjoint and in range.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError("bad-json", f"not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "pairs" not in doc:
        raise FormatError("bad-schema", "missing top-level 'pairs' list")
    pairs = doc["pairs"]
    try:
        src = np.array([[p["sx"], p["sy"]] for p in pairs], dtype=np.float64)
        tgt = np.array([[p["tx"], p["ty"]] for p in pairs], dtype=np.float64)
        prov = np.array([p.get("provenance", "annotated") for p in pairs], dtype="U9")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError("bad-schema", f"malformed pair entry: {e}") from e
    src = src.reshape(-1, 2)
    tgt = tgt.reshape(-1, 2)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
        raise FormatError("bad-coordinates", "non-finite pair coordinates")
    image_pair = doc.get("image_pair") or {}
    _check_in_image(src, image_pair.get("src_hw"), "src")
    _check_in_image(tgt, image_pair.get("tgt_hw"), "tgt")
    splits = doc.get("splits") or {}
    seen = list(splits.get("seen", []))
    unseen = list(splits.get("unseen", []))
    all_idx = seen + unseen
    if len(set(all_idx)) != len(all_idx):
        raise FormatError("bad-splits", "seen/unseen splits overlap")
    if any(not (0 <= int(i) < len(pairs)) for i in all_idx):
        raise FormatError("bad-splits", "split index out of range")
    try:
        corr = CorrespondenceSet(src=src, tgt=tgt, provenance=prov)
    except InvalidInputError as e:
        raise FormatError("bad-pairs", str(e)) from e
    meta = {k: v for k, v in doc.items() if k != "pairs"}
    meta.setdefault("splits", {"seen": seen, "unseen": unseen})
    return corr, meta
