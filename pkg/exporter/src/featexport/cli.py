"""featexport command line: dump pyramid features for a whole dataset."""

from __future__ import annotations

import argparse
import sys

from .export import WeightsUnavailable, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="featexport",
                                     description="export EfficientNet-b4 stage features as ONIP files")
    parser.add_argument("--data", required=True, help="dataset root (scanned recursively)")
    parser.add_argument("--out", required=True, help="output root (tree is mirrored)")
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("--fusion", type=int, nargs=2, default=(14, 14), metavar=("H", "W"))
    parser.add_argument("--weights", default="pretrained",
                        help="'pretrained', 'random', or a state-dict path")
    parser.add_argument("--seed", type=int, default=0, help="seed for --weights random")
    args = parser.parse_args(argv)
    try:
        manifest = export(args.data, args.out, image_size=args.image_size,
                          fusion_size=tuple(args.fusion), weights=args.weights,
                          seed=args.seed)
    except WeightsUnavailable as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    print(f"exported {len(manifest.files)} feature files "
          f"({manifest.channels} channels, skipped {manifest.skipped})", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
