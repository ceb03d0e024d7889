import argparse
import logging
from collections.abc import Sequence

from commands import load_config
from commands.error_handler import handle_errors
from helpers.constants import (
    ABLATION_CSV,
    ABLATION_OCCLUDED_CSV,
    ABLATION_SETTINGS,
    DATA_DIR,
    RUNS_DIR,
)
from helpers.reporting import RunClock, ensure_dir, write_csv, write_loss_csv, write_resolved_config, write_summary
from samiro.synth import generate_dataset, read_dataset, write_dataset
from samiro.training import AblationResult, run_ablation

COMMAND_METADATA = {
    "name": "ablate",
    "description": "Compare regulariser components over several seeds",
    "category": "Training",
    "hidden": False,
}

logger = logging.getLogger("lab")


def setup(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        "ablate",
        help=COMMAND_METADATA["description"],
        description=(
            "Generate train/test sets, pretrain one oracle per seed and fine-tune the baseline plus each "
            "regulariser setting; writes F1 per seed with mean and range."
        ),
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="Run config file (defaults when omitted)")
    parser.add_argument("--out", required=True, help="Directory for data, per-run loss curves and the CSVs")
    parser.set_defaults(handler=run)
    return parser


def comparison_rows(results: Sequence[AblationResult], seeds: Sequence[int], metric: str) -> list[list]:
    """One row per setting: the metric for each seed, then mean, min and max."""
    rows = []
    for setting in ABLATION_SETTINGS:
        by_seed = {r.seed: getattr(r, metric) for r in results if r.setting == setting}
        values = [by_seed[seed] for seed in seeds]
        rows.append([setting, *values, sum(values) / len(values), min(values), max(values)])
    return rows


@handle_errors
def run(args: argparse.Namespace, runtime) -> int:
    clock = RunClock()
    config = load_config(args.config)
    out = ensure_dir(args.out)

    # Scenes are scored after a write/read round trip so they match what 'train' sees
    data_root = out / DATA_DIR
    write_dataset(generate_dataset(config.data, config.data.train_count, config.data.seed), data_root / "train")
    write_dataset(generate_dataset(config.data, config.data.test_count, config.data.test_seed), data_root / "test")
    train_scenes = read_dataset(data_root / "train")
    test_scenes = read_dataset(data_root / "test")

    results = run_ablation(config, train_scenes, test_scenes)

    for result in results:
        run_dir = ensure_dir(out / RUNS_DIR / f"{result.setting}_seed{result.seed}")
        write_loss_csv(run_dir, result.record.columns, result.record.rows)

    seeds = list(config.train.seeds)
    columns = ["setting", *[f"f1_seed{seed}" for seed in seeds], "mean", "min", "max"]
    write_csv(out / ABLATION_CSV, columns, comparison_rows(results, seeds, "f1"))
    write_csv(out / ABLATION_OCCLUDED_CSV, columns, comparison_rows(results, seeds, "f1_occluded"))
    write_resolved_config(config, out)
    write_summary(
        out,
        {
            "command": "ablate",
            "settings": ",".join(ABLATION_SETTINGS),
            "seeds": ",".join(str(seed) for seed in seeds),
            "lambda": repr(config.loss.lam),
            "norm_mode": config.loss.norm_mode,
            "train_scenes": len(train_scenes),
            "test_scenes": len(test_scenes),
            "occluded_test_scenes": sum(1 for scene in test_scenes if scene.occluded),
            "config_hash": config.config_hash(),
        },
        clock,
        runtime.timestamps,
    )

    for row in comparison_rows(results, seeds, "f1"):
        print(f"{row[0]:<12} mean F1 {row[-3]:.6f}  range [{row[-2]:.6f}, {row[-1]:.6f}]")
    logger.info({"event": "ablate_done", "out": str(out), "runs": len(results)})
    return 0
