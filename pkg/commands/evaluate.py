import argparse
import logging

from commands import load_config
from commands.error_handler import handle_errors
from helpers.constants import DEFAULT_CULANE_SHAPE
from helpers.reporting import write_report
from samiro.metrics import evaluate_culane_dirs, evaluate_tusimple_files

COMMAND_METADATA = {
    "name": "evaluate",
    "description": "Score predicted lanes against ground truth",
    "category": "Metrics",
    "hidden": False,
}

FORMATS = ("culane", "tusimple", "synth")

logger = logging.getLogger("metrics")


def image_shape(text: str) -> tuple[int, int]:
    """Parse ``HxW``."""
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got '{text}'")
    if height < 1 or width < 1:
        raise argparse.ArgumentTypeError(f"image shape must be positive, got '{text}'")
    return height, width


def setup(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        "evaluate",
        aliases=["eval"],
        help=COMMAND_METADATA["description"],
        description=(
            "culane/synth: PRED and GT are directories of *.lines.txt files matched by relative path. "
            "tusimple: PRED and GT are JSON-lines files paired by raw_file."
        ),
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--pred", required=True, help="Predictions (directory or JSON-lines file)")
    parser.add_argument("--gt", required=True, help="Ground truth (directory or JSON-lines file)")
    parser.add_argument("--format", choices=FORMATS, default="culane", help="Annotation layout")
    parser.add_argument("--iou", type=float, default=None, help="IoU threshold of a match (default: [eval] iou)")
    parser.add_argument(
        "--width",
        type=int,
        default=None,
        help="Rendered lane width in pixels (default: [eval] lane_width, or [eval] synth_lane_width for synth)",
    )
    parser.add_argument(
        "--image-shape",
        type=image_shape,
        default=None,
        help="Frame size HxW for culane when no image sits beside an annotation (default: 590x1640)",
    )
    parser.add_argument("--matcher", choices=("hungarian", "greedy"), default=None, help="Lane assignment")
    parser.add_argument("--config", help="Run config file for the [eval] section")
    parser.add_argument("--out", help="Directory for report.csv and report.txt")
    parser.set_defaults(handler=run)
    return parser


@handle_errors
def run(args: argparse.Namespace, runtime) -> int:
    eval_cfg = load_config(args.config).eval
    matcher = args.matcher or eval_cfg.matcher
    iou = args.iou if args.iou is not None else eval_cfg.iou

    if args.format == "tusimple":
        settings = {"format": "tusimple"}
        report = evaluate_tusimple_files(
            args.pred, args.gt, eval_cfg.tusimple_dist, eval_cfg.tusimple_ratio, settings=settings
        )
    else:
        if args.width is not None:
            width = args.width
        else:
            width = eval_cfg.synth_lane_width if args.format == "synth" else eval_cfg.lane_width
        if args.format == "synth":
            shape = args.image_shape  # None reads each frame size from the dataset images
        else:
            shape = args.image_shape or DEFAULT_CULANE_SHAPE
        settings = {"format": args.format}
        report = evaluate_culane_dirs(args.pred, args.gt, iou, width, shape, matcher, settings=settings)

    if args.out:
        write_report(report, args.out)
    logger.info(
        {"event": "evaluate_done", "format": args.format, "images": report.overall.images, "score": report.headline()}
    )
    print(report.headline())
    return 0
