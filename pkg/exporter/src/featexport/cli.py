"""Command line: flags mirror the manifest fields one-to-one.

Exit codes: 0 ok, 2 usage (argparse), 3 backbone/image/manifest trouble,
5 filesystem trouble.
"""

from __future__ import annotations

import argparse
import json
import sys

from .export import export_features
from .manifest import ExportError, ExportManifest
from .regions import write_region_file


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="featexport",
        description="export dense per-patch image features to MRCF containers",
    )
    p.add_argument("--image", required=True, help="input image path")
    p.add_argument("--out", required=True, help="output .mrcf path")
    p.add_argument("--input-px", type=int, required=True,
                   help="square resize applied before extraction")
    p.add_argument("--backbone", default="handcrafted",
                   help="'handcrafted' or 'torchhub:<repo>:<model>'")
    p.add_argument("--patch-px", type=int, default=14)
    p.add_argument("--upsample4x", action="store_true",
                   help="bilinear x4 lattice upsampling (stride becomes patch/4)")
    p.add_argument("--normalize", action="store_true",
                   help="L2-normalize each cell and set the normalized flag")
    p.add_argument("--region-keypoints", default=None,
                   help="JSON file with {\"points\": [[x, y], ...]}; writes a "
                        "keypoint-bbox region next to --out")
    p.add_argument("--region-out", default=None,
                   help="region JSON path (default: <out>.region.json)")
    p.add_argument("--region-margin-px", type=float, default=0.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = ExportManifest(
            image_path=args.image,
            out_path=args.out,
            input_px=args.input_px,
            backbone=args.backbone,
            patch_px=args.patch_px,
            upsample4x=args.upsample4x,
            normalize=args.normalize,
        )
        out = export_features(manifest)
        print(f"wrote {out}: {manifest.grid_cells * (4 if manifest.upsample4x else 1)}"
              f"-cell lattice, stride {manifest.stride_px} px")
        if args.region_keypoints is not None:
            with open(args.region_keypoints, "r", encoding="utf-8") as f:
                points = json.load(f)["points"]
            region_path = args.region_out or args.out + ".region.json"
            write_region_file(region_path, points,
                              margin_px=args.region_margin_px)
            print(f"wrote {region_path}")
    except (ExportError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
