"""Command-line entry point: embed-export export.

Exit codes: 0 success, 2 usage/manifest/backbone errors, 1 unexpected.
"""

from __future__ import annotations

import argparse
import sys

from .backbone import load_backbone
from .export import export
from .manifest import ManifestError
from .writer import ExportError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Encode labeled images into a ranking embedding file.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run one manifest through a backbone")
    p.add_argument("--manifest", required=True,
                   help="line-delimited JSON: {image, query, score[, bin]}")
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--resolution", type=int, default=320,
                   help="square input resolution (default 320)")
    p.add_argument("--backbone", default="patch-stats",
                   help="'patch-stats' (default) or 'clip:<model-path>'")
    p.add_argument("--dim", type=int, default=64,
                   help="embedding width for the patch-stats backbone")
    p.add_argument("--text-tokens", type=int, default=16,
                   help="text token count for the patch-stats backbone")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        backbone = load_backbone(args.backbone, resolution=args.resolution,
                                 dim=args.dim, text_tokens=args.text_tokens)
        result = export(args.manifest, args.out, backbone,
                        precision=8 if args.precision == "f64" else 4)
    except (ManifestError, ExportError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - safety net
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.n_items} items, {result.n_queries} queries to "
          f"{result.out_path} (backbone {backbone.name}, "
          f"p={backbone.patch_tokens}, d={backbone.dim}, t={backbone.text_tokens})")
    if result.skipped:
        print(f"skipped {len(result.skipped)} images; see {result.sidecar_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
