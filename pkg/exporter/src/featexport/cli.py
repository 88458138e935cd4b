"""Command line: featexport export --frames <dir> --out <dir>
--backbone small|base [--weights <path-or-id>] [--strict]."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, export


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="featexport")
    sub = p.add_subparsers(dest="command")
    e = sub.add_parser("export", help="export posed frames to the training layout")
    e.add_argument("--frames", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--backbone", choices=("small", "base"), default="small")
    e.add_argument("--category", default="exported")
    e.add_argument("--weights", default=None,
                   help="checkpoint path or hub id; random init when omitted")
    e.add_argument("--strict", action="store_true",
                   help="deterministic kernels, single thread")
    e.add_argument("--seed", type=int, default=0)
    try:
        args = p.parse_args(argv if argv is not None else sys.argv[1:])
    except SystemExit as ex:
        return 0 if ex.code == 0 else 1
    if args.command != "export":
        p.print_usage(sys.stderr)
        return 1
    try:
        cat_dir, manifest = export(ExportJob(
            frames_dir=args.frames, out_dir=args.out, backbone=args.backbone,
            category=args.category, weights=args.weights, strict=args.strict,
            seed=args.seed))
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"exported {manifest['exported_frames']} frames to {cat_dir} "
          f"({len(manifest['skipped'])} skipped)")
    return 0


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
