"""Command line for the exporter: export-masks and export-features."""

import argparse
import json
import sys

from .errors import ExportError
from .export import ExportJob, export_features, export_masks, load_prompts

EXIT_OK = 0
EXIT_VALIDATION = 2


def _job(args, prompts=None) -> ExportJob:
    return ExportJob(
        image_dir=args.images,
        cameras_path=args.cameras,
        prompts=prompts or [],
        out_dir=args.out,
        model=args.model,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sam-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-masks", help="segment every view from prompts and write mask frames")
    p.add_argument("--images", required=True, help="directory of rgb_XXXXX.ppm views")
    p.add_argument("--cameras", required=True, help="cameras.json")
    p.add_argument("--prompts", required=True, help="prompts JSON (3D points or per-view pixels)")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="builtin-colorseed")

    p = sub.add_parser("export-features", help="encode every view and write feature frames")
    p.add_argument("--images", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="builtin-colorseed")

    args = parser.parse_args(argv)
    try:
        if args.command == "export-masks":
            outputs = export_masks(_job(args, load_prompts(args.prompts)))
        else:
            outputs = export_features(_job(args))
    except (ExportError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"wrote {len(outputs)} frames to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
