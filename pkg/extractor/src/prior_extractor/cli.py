"""extract-priors command-line tool.

Note on the score scale: the softmax here follows standard zero-shot
practice and multiplies image-text similarities by the checkpoint's learned
logit scale before normalizing; pass --no-logit-scale for raw dot products.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backends import ExtractorError, make_backend
from .ctv import CtvFormatError
from .extract import DEFAULT_DESCRIPTORS, DEFAULT_TEMPLATE, extract_priors
from .windowing import DEFAULT_LEVEL, DEFAULT_WIDTH


def _read_descriptor_file(path: Path):
    names = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n and not n.startswith("#")]
    if not names:
        raise ExtractorError(f"{path}: no descriptors found")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extract-priors", description=__doc__)
    parser.add_argument("--images", required=True, help="directory of CTV images")
    parser.add_argument("--descriptors", default=None,
                        help="text file, one descriptor per line (order defines the channel index); "
                             "defaults to the built-in 17-organ set")
    parser.add_argument("--template", default=DEFAULT_TEMPLATE,
                        help="prompt template; {descriptor} is substituted")
    parser.add_argument("--out", required=True, help="output prior JSON path")
    parser.add_argument("--backend", default="biomedclip", choices=("biomedclip", "histogram"))
    parser.add_argument("--window-level", type=float, default=DEFAULT_LEVEL)
    parser.add_argument("--window-width", type=float, default=DEFAULT_WIDTH)
    parser.add_argument("--no-logit-scale", action="store_true",
                        help="softmax raw dot products instead of logit-scaled ones")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        descriptors = (DEFAULT_DESCRIPTORS if args.descriptors is None
                       else _read_descriptor_file(Path(args.descriptors)))
        backend = make_backend(args.backend)
        priors = extract_priors(
            args.images,
            descriptors=descriptors,
            template=args.template,
            out_path=args.out,
            backend=backend,
            window_level=args.window_level,
            window_width=args.window_width,
            apply_logit_scale=not args.no_logit_scale,
        )
    except (ExtractorError, CtvFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote priors for {len(priors)} images to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
