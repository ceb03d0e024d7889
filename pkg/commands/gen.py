import argparse
import logging
from pathlib import Path

from commands import load_config
from commands.error_handler import handle_errors
from config import ConfigurationError
from helpers.constants import TAG_NORMAL
from helpers.reporting import write_resolved_config
from samiro.synth import generate_dataset, write_dataset

COMMAND_METADATA = {
    "name": "gen",
    "description": "Generate a synthetic lane dataset",
    "category": "Data",
    "hidden": False,
}

logger = logging.getLogger("data")


def setup(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        "gen",
        help=COMMAND_METADATA["description"],
        description="Write COUNT procedurally generated road scenes with lane annotations to OUT.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="Run config file (defaults when omitted)")
    parser.add_argument("--out", required=True, help="Dataset directory to write")
    parser.add_argument("--count", type=int, help="Number of scenes (default: [data] train_count)")
    parser.add_argument("--seed", type=int, help="Base seed of the set (default: [data] seed)")
    parser.set_defaults(handler=run)
    return parser


@handle_errors
def run(args: argparse.Namespace, runtime) -> int:
    config = load_config(args.config)
    count = config.data.train_count if args.count is None else args.count
    seed = config.data.seed if args.seed is None else args.seed
    if count < 0:
        raise ConfigurationError(f"--count must be >= 0, got {count}")

    scenes = generate_dataset(config.data, count, seed)
    root = write_dataset(scenes, args.out)
    write_resolved_config(config, root)

    tagged = sum(1 for scene in scenes if scene.meta.tags != (TAG_NORMAL,))
    logger.info({"event": "gen_done", "out": str(Path(args.out)), "scenes": count, "perturbed": tagged})
    print(f"wrote {count} scene(s) to {root}")
    return 0
