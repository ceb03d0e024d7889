"""
Run artefacts: loss curves, evaluation reports, summaries and resolved configs.

Every file has a fixed name inside the run's output directory. Numbers are
written with fixed precision so reruns with the same config and seeds
produce identical bytes (apart from the timing lines of ``summary.txt``,
which ``--no-timestamp`` suppresses).
"""

import csv
import io
import logging
import os
import time
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import psutil

from helpers.constants import LOSS_CSV, REPORT_CSV, REPORT_TXT, RESOLVED_CONFIG, SUMMARY_TXT
from helpers.exceptions import DatasetIOError

logger = logging.getLogger("lab")

REPORT_COLUMNS = ["category", "images", "tp", "fp", "fn", "precision", "recall", "f1", "fp_rate", "fn_rate", "accuracy"]


def format_number(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def ensure_dir(path: str | os.PathLike) -> Path:
    target = Path(path)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create output directory {target}: {e.strerror}")
    return target


def write_csv(path: str | os.PathLike, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_number(value) for value in row])
    target = Path(path)
    target.write_text(buffer.getvalue(), encoding="utf-8")
    return target


def write_loss_csv(out_dir: str | os.PathLike, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    # full precision
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else str(v) for v in row])
    target = Path(out_dir) / LOSS_CSV
    target.write_text(buffer.getvalue(), encoding="utf-8")
    return target


def report_rows(report) -> list[list[Any]]:
    """One row for the whole set followed by one row per category."""
    rows = []
    for index, entry in enumerate([report.overall, *report.categories.values()]):
        precision, recall, f1 = entry.scores
        stats = entry.stats
        fp_rate = stats.fp / stats.predictions if stats.predictions else 0.0
        fn_rate = stats.fn / stats.ground_truths if stats.ground_truths else 0.0
        accuracy = report.accuracy if index == 0 and report.accuracy is not None else ""
        rows.append(
            [entry.name, entry.images, stats.tp, stats.fp, stats.fn, precision, recall, f1, fp_rate, fn_rate, accuracy]
        )
    return rows


def format_report_table(report) -> str:
    lines = [f"{key}: {value}" for key, value in report.settings.items()]
    lines.append("")
    header = f"{'category':<14}{'images':>8}{'tp':>7}{'fp':>7}{'fn':>7}{'precision':>11}{'recall':>9}{'f1':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in report_rows(report):
        name, images, tp, fp, fn, precision, recall, f1 = row[:8]
        lines.append(f"{name:<14}{images:>8}{tp:>7}{fp:>7}{fn:>7}{precision:>11.4f}{recall:>9.4f}{f1:>9.4f}")
    lines.append("")
    if report.accuracy is not None:
        lines.append(f"accuracy: {report.accuracy:.6f}")
    lines.append(f"fp_rate: {report.fp_rate:.6f}")
    lines.append(f"fn_rate: {report.fn_rate:.6f}")
    return "\n".join(lines) + "\n"


def write_report(report, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    target = ensure_dir(out_dir)
    csv_path = write_csv(target / REPORT_CSV, REPORT_COLUMNS, report_rows(report))
    txt_path = target / REPORT_TXT
    txt_path.write_text(format_report_table(report), encoding="utf-8")
    logger.debug({"event": "report_written", "path": str(target)})
    return csv_path, txt_path


def write_resolved_config(config, out_dir: str | os.PathLike) -> Path:
    target = ensure_dir(out_dir) / RESOLVED_CONFIG
    target.write_text(config.resolved_text(), encoding="utf-8")
    return target


class RunClock:
    """Wall-clock and memory figures for summaries."""

    def __init__(self):
        self.started = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.started

    @staticmethod
    def memory_mb() -> float:
        return psutil.Process().memory_info().rss / (1024 * 1024)


def write_summary(
    out_dir: str | os.PathLike,
    entries: Mapping[str, Any],
    clock: RunClock | None = None,
    timestamps: bool = True,
) -> Path:
    """``key: value`` lines; wall-clock and RSS lines only when ``timestamps`` is on."""
    lines = [f"{key}: {value}" for key, value in entries.items()]
    if timestamps and clock is not None:
        lines.append(f"wall_clock_seconds: {clock.elapsed():.2f}")
        lines.append(f"rss_mb: {clock.memory_mb():.1f}")
    target = ensure_dir(out_dir) / SUMMARY_TXT
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target
