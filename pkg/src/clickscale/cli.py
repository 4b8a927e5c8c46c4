"""Command-line entry point: ``clickscale <subcommand> [options]``.

Pipeline subcommands (select, train, pseudogt, eval, pipeline) read an
optional ``--config`` file of ``key=value`` lines; any ``--key value`` flag
overrides the file. Exit status is 0 on success, 1 on a usage or config
error and 2 on a data error (missing or malformed input).

Setting ``CLICKSCALE_VERBOSE=1`` has the same effect as ``-v``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline as P
from .csvio import ParseError
from .synth import SceneSpec, generate_dataset

log = logging.getLogger("clickscale")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file; flags override it")
    g = p.add_argument_group("configuration (same keys as the config file)")
    for key in P.CONFIG_KEYS:
        g.add_argument(_flag(key), dest=f"cfg_{key}", metavar="VALUE")


def _synth_args(p: argparse.ArgumentParser) -> None:
    d = SceneSpec()
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--width", type=int, default=d.width)
    p.add_argument("--height", type=int, default=d.height)
    p.add_argument("--num-classes", type=int, default=d.num_classes)
    p.add_argument("--min-objects", type=int, default=d.objects_per_image[0])
    p.add_argument("--max-objects", type=int, default=d.objects_per_image[1])
    p.add_argument("--min-size", type=int, default=d.min_size)
    p.add_argument("--max-size", type=int, default=d.max_size)
    p.add_argument("--click-noise", type=float, default=d.click_noise_sigma, help="click noise sigma in pixels")
    p.add_argument("--prefix", default=d.image_prefix, help="image id prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clickscale", description="Pseudo ground-truth boxes from center clicks.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _synth_args(sub.add_parser("synth", help="write a synthetic dataset"))
    for name, text in (
        ("select", "choose proposals for every click"),
        ("train", "train the patch classifier"),
        ("pseudogt", "generate pseudo ground-truth boxes"),
        ("pipeline", "run select, train, pseudogt and eval"),
    ):
        _add_config_flags(sub.add_parser(name, help=text))
    ev = sub.add_parser("eval", help="CorLoc (and mAP for detections) against ground truth")
    _add_config_flags(ev)
    ev.add_argument("--pred", type=Path, help="pseudo-GT or detections CSV (default: OUT_DIR/pseudo_gt.csv)")
    ev.add_argument("--gt", type=Path, help="ground-truth CSV (default: the evaluation dataset's gt.csv)")
    return parser


def config_from_args(args) -> P.PipelineConfig:
    values: dict[str, str] = {}
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
        try:
            values.update(P.parse_config_text(text))
        except ValueError as e:
            raise UsageError(f"{args.config}: {e}") from None
    for key in P.CONFIG_KEYS:
        v = getattr(args, f"cfg_{key}")
        if v is not None:
            values[key] = v
    try:
        return P.build_config(values)
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad configuration: {e}") from None


def cmd_synth(args) -> None:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        spec = SceneSpec(
            width=args.width,
            height=args.height,
            num_classes=args.num_classes,
            objects_per_image=(args.min_objects, args.max_objects),
            click_noise_sigma=args.click_noise,
            seed=args.seed,
            min_size=args.min_size,
            max_size=args.max_size,
            image_prefix=args.prefix,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = generate_dataset(spec, args.count, args.out)
    print(f"wrote {args.count} scenes to {out}")


def _print_corloc(cl) -> None:
    for c, v in cl.per_class.items():
        print(f"class {c}: {v:.4f}")
    print(f"corloc: {cl.mean:.4f}")


def run(args) -> None:
    if args.command == "synth":
        cmd_synth(args)
        return
    cfg = config_from_args(args)
    if args.command == "select":
        for p in P.cmd_select(cfg):
            print(p)
    elif args.command == "train":
        P.cmd_train(cfg)
        print(cfg.out_dir / "model.ckpt")
    elif args.command == "pseudogt":
        P.cmd_pseudogt(cfg)
        print(cfg.out_dir / "pseudo_gt.csv")
    elif args.command == "eval":
        cl, aps = P.cmd_eval(cfg, args.pred, args.gt)
        _print_corloc(cl)
        if aps is not None:
            print(f"map: {sum(aps.values()) / len(aps) if aps else 0.0:.4f}")
    elif args.command == "pipeline":
        _print_corloc(P.run_pipeline(cfg))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    verbose = args.verbose or (os.environ.get("CLICKSCALE_VERBOSE", "") not in ("", "0"))
    level = logging.WARNING if not verbose else logging.INFO if args.verbose < 2 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except UsageError as e:
        print(f"clickscale: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (P.DataError, ParseError, OSError, ValueError) as e:
        print(f"clickscale: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
