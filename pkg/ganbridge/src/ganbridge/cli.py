"""Command-line entry point: export and encode subcommands."""

import argparse
import sys

from .export import ExportSpec, encode_images, export_pairs
from .model import BridgeError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ganbridge",
        description="export generator pairs and encoder latents in the "
                    "segmentation toolkit's file formats")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("export", help="write an (image, shifted) pair dataset")
    p.add_argument("--model", required=True,
                   help="builtin:<seed> or a path to .npz weights")
    p.add_argument("--directions", required=True,
                   help="text file, one whitespace-separated vector per line")
    p.add_argument("--direction-index", type=int, default=0)
    p.add_argument("--scale", type=float, default=5.0)
    p.add_argument("--latents", default="prior",
                   help="'prior' or a latents file to draw codes from")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("encode", help="encode a directory of PNGs to a latents file")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_encode)
    return parser


def _cmd_export(args):
    spec = ExportSpec(
        model=args.model,
        direction_file=args.directions,
        direction_index=args.direction_index,
        scale=args.scale,
        latent_source=args.latents,
        count=args.count,
        seed=args.seed,
        out_dir=args.out,
    )
    out = export_pairs(spec)
    print(f"wrote {args.count} pairs to {out}")
    return 0


def _cmd_encode(args):
    out = encode_images(args.model, args.images, args.out)
    print(f"wrote latents to {out}")
    return 0


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
