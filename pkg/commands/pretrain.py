import argparse
import logging
from pathlib import Path

from commands import load_config
from commands.error_handler import handle_errors
from helpers.constants import CHECKPOINT_DIR
from helpers.reporting import RunClock, ensure_dir, write_loss_csv, write_resolved_config, write_summary
from samiro.synth import check_scene_shapes, read_dataset
from samiro.training import mim_pretrain, save_oracle

COMMAND_METADATA = {
    "name": "pretrain",
    "description": "Pretrain the oracle encoder by masked image modelling",
    "category": "Training",
    "hidden": False,
}

logger = logging.getLogger("lab")


def setup(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        "pretrain",
        help=COMMAND_METADATA["description"],
        description="Train an encoder to reconstruct masked patches of unlabelled scenes and save it as the oracle.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="Run config file (defaults when omitted)")
    parser.add_argument("--data", required=True, help="Dataset directory written by 'gen'")
    parser.add_argument("--out", required=True, help="Run directory for the checkpoint and loss curve")
    parser.add_argument("--seed", type=int, help="Run seed (default: [train] seed)")
    parser.set_defaults(handler=run)
    return parser


@handle_errors
def run(args: argparse.Namespace, runtime) -> int:
    clock = RunClock()
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace("train", seed=args.seed)

    scenes = read_dataset(args.data)
    check_scene_shapes(scenes, config.data, source=args.data)
    result = mim_pretrain(config, scenes)

    out = ensure_dir(args.out)
    checkpoint = save_oracle(result.encoder, out / CHECKPOINT_DIR)
    write_loss_csv(out, result.record.columns, result.record.rows)
    write_resolved_config(config, out)

    losses = result.record.column("mim_loss")
    write_summary(
        out,
        {
            "command": "pretrain",
            "oracle_mode": config.train.oracle_mode,
            "seed": config.train.seed,
            "steps": result.record.steps,
            "images": min(len(scenes), config.train.mim_images or len(scenes)),
            "mask_ratio": config.train.mask_ratio,
            "patch_size": config.train.patch_size,
            "initial_loss": repr(losses[0]) if losses else "n/a",
            "final_loss": repr(losses[-1]) if losses else "n/a",
            "config_hash": config.config_hash(),
            "checkpoint": str(Path(checkpoint).relative_to(out)),
        },
        clock,
        runtime.timestamps,
    )
    logger.info({"event": "pretrain_done", "out": str(out), "steps": result.record.steps})
    print(f"oracle saved to {checkpoint}")
    return 0
