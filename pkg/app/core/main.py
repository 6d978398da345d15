"""
Command-line entry point for the PL2Map relocalizer

    pl2map gen-synth --out scene/
    pl2map train     --scene scene/ --out run/ [--iters N] [--lr LR]
    pl2map infer     --checkpoint run/checkpoint.pl2m --scene scene/ --out infer/
    pl2map localize  --scene scene/ --out loc/ (--predictions infer/predictions | --checkpoint FILE)
    pl2map eval      --estimates loc/estimates.json --scene scene/

Every subcommand accepts --config FILE, --preset NAME, --seed N and
--log-level. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from app.core.config import config
from app.core.logging import configure_logging, logger
from app.relocalization.exceptions import PL2MapError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file layered over the preset")
    common.add_argument("--preset", default=None, help=f"named preset (default: {config.PRESET})")
    common.add_argument("--seed", type=int, help="seed for init, augmentation, synthesis and RANSAC")
    common.add_argument("--log-level", default=None, help=f"log level (default: {config.LOG_LEVEL})")

    parser = argparse.ArgumentParser(prog="pl2map", description=config.SERVICE_NAME)
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-synth", parents=[common], help="generate a synthetic scene")
    gen.add_argument("--out", type=Path, required=True, help="scene directory to write")

    train = commands.add_parser("train", parents=[common], help="train the point/line network")
    train.add_argument("--scene", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--iters", type=int, help="override train.iterations")
    train.add_argument("--lr", type=float, help="override train.lr")

    infer = commands.add_parser("infer", parents=[common], help="predict and export the map")
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("--scene", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--split", choices=["train", "test"], default="test")
    infer.add_argument("--threshold", type=float, help="override localization.export_threshold")

    localize = commands.add_parser("localize", parents=[common], help="estimate camera poses")
    localize.add_argument("--scene", type=Path, required=True)
    localize.add_argument("--out", type=Path, required=True)
    source = localize.add_mutually_exclusive_group(required=True)
    source.add_argument("--predictions", type=Path, help="directory written by infer")
    source.add_argument("--checkpoint", type=Path, help="predict on the fly from this checkpoint")
    localize.add_argument("--split", choices=["train", "test"], default="test")
    localize.add_argument("--mode", choices=["points", "points+lines", "both"])

    evaluate = commands.add_parser("eval", parents=[common], help="median errors and accuracy")
    evaluate.add_argument("--estimates", type=Path, required=True)
    evaluate.add_argument("--scene", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, help="defaults to the estimates directory")

    return parser


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config mapping for the flags that were given."""
    overrides: Dict[str, Dict[str, Any]] = {"train": {}, "synth": {}, "localization": {}}
    if args.seed is not None:
        for section in overrides.values():
            section["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        overrides["train"]["iterations"] = args.iters
    if getattr(args, "lr", None) is not None:
        overrides["train"]["lr"] = args.lr
    if getattr(args, "mode", None) is not None:
        overrides["localization"]["mode"] = args.mode
    if getattr(args, "threshold", None) is not None:
        overrides["localization"]["export_threshold"] = args.threshold
    return {k: v for k, v in overrides.items() if v}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or config.LOG_LEVEL, config.LOG_FILE)

    # Imported late so --help stays fast
    from app.relocalization.pl2map_relocalizer import PL2MapRelocalizer
    from app.relocalization.preset_manager import PresetManager

    try:
        run_config = PresetManager().build(args.preset or config.PRESET, args.config, overrides_from(args))
    except (FileNotFoundError, KeyError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE

    relocalizer = PL2MapRelocalizer(run_config, argv=argv)
    try:
        if args.command == "gen-synth":
            relocalizer.gen_synth(args.out)
        elif args.command == "train":
            relocalizer.train(args.scene, args.out)
        elif args.command == "infer":
            relocalizer.infer(args.checkpoint, args.scene, args.out, split=args.split)
        elif args.command == "localize":
            relocalizer.localize(
                args.scene, args.out, predictions_dir=args.predictions, checkpoint=args.checkpoint, split=args.split
            )
        elif args.command == "eval":
            metrics = relocalizer.eval(args.estimates, args.scene, args.out or args.estimates.parent)
            for mode, m in metrics.items():
                print(f"{mode}\t{m.row()}")
    except (PL2MapError, OSError, KeyError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
