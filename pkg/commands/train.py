import argparse
import logging
from pathlib import Path

from commands import load_config
from commands.error_handler import handle_errors
from helpers.constants import CHECKPOINT_DIR, PREDICTIONS_DIR
from helpers.reporting import (
    RunClock,
    ensure_dir,
    write_loss_csv,
    write_report,
    write_resolved_config,
    write_summary,
)
from samiro.lanes import format_culane_lines
from samiro.synth import check_scene_shapes, read_dataset, read_index
from samiro.training import (
    evaluate_predictions,
    finetune,
    load_oracle,
    predict_dataset,
    save_lane_model,
)

COMMAND_METADATA = {
    "name": "train",
    "description": "Fine-tune the lane model, regularised by a frozen oracle",
    "category": "Training",
    "hidden": False,
}

logger = logging.getLogger("lab")


def setup(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        "train",
        help=COMMAND_METADATA["description"],
        description=(
            "Train the lane encoder and head on labelled scenes. With --oracle the configured regulariser "
            "ties the encoder's features to the oracle's; without it the run is the unregularised baseline."
        ),
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="Run config file (defaults when omitted)")
    parser.add_argument("--data", required=True, help="Labelled dataset directory written by 'gen'")
    parser.add_argument("--oracle", help="Oracle checkpoint directory written by 'pretrain'")
    parser.add_argument("--out", required=True, help="Run directory for checkpoint, loss curve and report")
    parser.add_argument("--test", help="Dataset directory to evaluate the trained model on")
    parser.add_argument("--seed", type=int, help="Run seed (default: [train] seed)")
    parser.set_defaults(handler=run)
    return parser


def write_predictions(predictions, test_dir: str, out: Path) -> Path:
    """One ``<stem>.lines.txt`` per test image, named after the dataset index."""
    target = ensure_dir(out / PREDICTIONS_DIR)
    stems = [stem for stem, _, _ in read_index(test_dir)]
    for stem, lanes in zip(stems, predictions, strict=True):
        (target / f"{stem}.lines.txt").write_text(format_culane_lines(lanes), encoding="utf-8")
    return target


@handle_errors
def run(args: argparse.Namespace, runtime) -> int:
    clock = RunClock()
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace("train", seed=args.seed)

    oracle = load_oracle(args.oracle, config) if args.oracle else None
    if oracle is None:
        logger.info({"event": "baseline_run", "detail": "no --oracle given"})
    scenes = read_dataset(args.data)
    check_scene_shapes(scenes, config.data, source=args.data)

    out = ensure_dir(args.out)

    def on_checkpoint(step, model, regularizer):
        save_lane_model(model, regularizer, out / f"{CHECKPOINT_DIR}-step{step:06d}", config)

    result = finetune(config, oracle, scenes, on_checkpoint=on_checkpoint)
    save_lane_model(result.model, result.regularizer, out / CHECKPOINT_DIR, config)
    write_loss_csv(out, result.record.columns, result.record.rows)
    write_resolved_config(config, out)

    totals = result.record.column("total")
    entries = {
        "command": "train",
        "lambda": repr(config.loss.lam),
        "norm_mode": config.loss.norm_mode,
        "variant": config.loss.variant,
        "regularized": "yes" if oracle is not None and config.loss.active else "no",
        "seed": config.train.seed,
        "steps": result.record.steps,
        "initial_total": repr(totals[0]) if totals else "n/a",
        "final_total": repr(totals[-1]) if totals else "n/a",
        "config_hash": config.config_hash(),
    }

    if args.test:
        test_scenes = read_dataset(args.test)
        check_scene_shapes(test_scenes, config.data, source=args.test)
        predictions = predict_dataset(result.model, test_scenes, config.eval)
        write_predictions(predictions, args.test, out)
        report = evaluate_predictions(predictions, test_scenes, config.eval)
        result.record.report = report
        write_report(report, out)
        entries["test_f1"] = f"{report.f1:.6f}"
        print(report.headline())

    write_summary(out, entries, clock, runtime.timestamps)
    logger.info({"event": "train_done", "out": str(out), "steps": result.record.steps})
    return 0
