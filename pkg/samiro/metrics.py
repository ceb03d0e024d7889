"""
Lane detection metrics.

CULane-style F1: every lane is rendered as a band of fixed width, predicted
and ground-truth bands are paired one-to-one by mask IoU, and a pair with
IoU at or above the threshold is a true positive.

TuSimple-style accuracy: predicted and ground-truth lanes are sampled at
fixed rows; a point is correct when the x distance is below a pixel
threshold, and accuracy is the share of ground-truth points predicted
correctly.
"""

import logging
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np
import orjson
from PIL import Image
from scipy.optimize import linear_sum_assignment

from helpers.constants import (
    DEFAULT_CULANE_SHAPE,
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_LANE_WIDTH,
    IMAGES_DIR,
    INDEX_FILE,
    TUSIMPLE_ABSENT,
    TUSIMPLE_DIST_THRESHOLD,
    TUSIMPLE_POINT_RATIO,
)
from helpers.exceptions import DataError, DatasetIOError, DimensionError, ParseError
from samiro.lanes import Lane, parse_culane_lines, render_lane_mask

logger = logging.getLogger("metrics")

ALL_CATEGORY = "all"
MATCHERS = ("hungarian", "greedy", "exhaustive")

__all__ = [
    "EvalReport",
    "MatchStats",
    "evaluate_culane_dirs",
    "evaluate_sets",
    "evaluate_tusimple_files",
    "f1_from_stats",
    "lane_iou",
    "match_lanes",
    "parse_culane_lines",
    "parse_tusimple_record",
    "render_lane_mask",
    "tusimple_accuracy",
]


@dataclass
class MatchStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchStats") -> "MatchStats":
        return MatchStats(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def predictions(self) -> int:
        return self.tp + self.fp

    @property
    def ground_truths(self) -> int:
        return self.tp + self.fn


def f1_from_stats(stats: MatchStats) -> tuple[float, float, float]:
    precision = stats.tp / (stats.tp + stats.fp) if stats.tp + stats.fp else 0.0
    recall = stats.tp / (stats.tp + stats.fn) if stats.tp + stats.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def lane_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    if mask_a.shape != mask_b.shape:
        raise DimensionError(f"lane_iou: mask shapes {mask_a.shape} and {mask_b.shape} differ")
    union = np.count_nonzero(mask_a | mask_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(mask_a & mask_b) / union


def iou_matrix(
    preds: Sequence[Lane], gts: Sequence[Lane], width_px: float, shape: tuple[int, int]
) -> np.ndarray:
    height, width = shape
    pred_masks = [render_lane_mask(lane, width_px, height, width) for lane in preds]
    gt_masks = [render_lane_mask(lane, width_px, height, width) for lane in gts]
    matrix = np.zeros((len(preds), len(gts)))
    for i, pred in enumerate(pred_masks):
        for j, gt in enumerate(gt_masks):
            matrix[i, j] = lane_iou(pred, gt)
    return matrix


def _assign_hungarian(scores: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return list(zip(rows.tolist(), cols.tolist(), strict=True))


def _assign_greedy(scores: np.ndarray) -> list[tuple[int, int]]:
    pairs = []
    used_rows: set[int] = set()
    used_cols: set[int] = set()
    order = sorted(np.ndindex(scores.shape), key=lambda ij: (-scores[ij], ij))
    for i, j in order:
        if i not in used_rows and j not in used_cols:
            pairs.append((i, j))
            used_rows.add(i)
            used_cols.add(j)
    return pairs


def _assign_exhaustive(scores: np.ndarray) -> list[tuple[int, int]]:
    """Best total score over every one-to-one assignment. Only for small matrices."""
    n_rows, n_cols = scores.shape
    best_total, best = -1.0, []
    if n_rows <= n_cols:
        for cols in permutations(range(n_cols), n_rows):
            total = sum(scores[i, j] for i, j in enumerate(cols))
            if total > best_total:
                best_total, best = total, list(enumerate(cols))
    else:
        for rows in permutations(range(n_rows), n_cols):
            total = sum(scores[i, j] for j, i in enumerate(rows))
            if total > best_total:
                best_total, best = total, [(i, j) for j, i in enumerate(rows)]
    return best


def match_lanes(
    preds: Sequence[Lane],
    gts: Sequence[Lane],
    iou_thresh: float = DEFAULT_IOU_THRESHOLD,
    width_px: float = DEFAULT_LANE_WIDTH,
    shape: tuple[int, int] = DEFAULT_CULANE_SHAPE,
    matcher: str = "hungarian",
) -> MatchStats:
    """
    One-to-one assignment maximising the summed IoU of eligible pairs
    (IoU >= ``iou_thresh``); each assigned eligible pair is a true positive.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    if matcher not in MATCHERS:
        raise ValueError(f"unknown matcher '{matcher}', expected one of {', '.join(MATCHERS)}")
    if not preds or not gts:
        return MatchStats(tp=0, fp=len(preds), fn=len(gts))
    ious = iou_matrix(preds, gts, width_px, shape)
    eligible = np.where(ious >= iou_thresh, ious, 0.0)
    assign = {"hungarian": _assign_hungarian, "greedy": _assign_greedy, "exhaustive": _assign_exhaustive}[matcher]
    tp = sum(1 for i, j in assign(eligible) if eligible[i, j] > 0)
    return MatchStats(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp)


# TuSimple


@dataclass
class TuSimpleCounts:
    correct: int = 0
    total: int = 0
    fp: int = 0
    predictions: int = 0
    fn: int = 0
    ground_truths: int = 0

    def __add__(self, other: "TuSimpleCounts") -> "TuSimpleCounts":
        return TuSimpleCounts(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple(), strict=True)))

    def as_tuple(self) -> tuple[int, ...]:
        return (self.correct, self.total, self.fp, self.predictions, self.fn, self.ground_truths)

    @property
    def accuracy(self) -> float:
        # no ground-truth points scores zero, as an empty F1 set does
        return self.correct / self.total if self.total else 0.0

    @property
    def fp_rate(self) -> float:
        return self.fp / self.predictions if self.predictions else 0.0

    @property
    def fn_rate(self) -> float:
        return self.fn / self.ground_truths if self.ground_truths else 0.0

    @property
    def stats(self) -> MatchStats:
        tp = self.predictions - self.fp
        return MatchStats(tp=tp, fp=self.fp, fn=self.fn)


def sample_lane(lane: Lane, h_samples: Sequence[int]) -> np.ndarray:
    """x at every sampled row, NaN where the lane has no point."""
    return np.array([np.nan if (x := lane.x_at(h)) is None else x for h in h_samples], dtype=np.float64)


def tusimple_image_counts(
    preds: Sequence[Lane],
    gts: Sequence[Lane],
    h_samples: Sequence[int],
    dist_thresh: float = TUSIMPLE_DIST_THRESHOLD,
    point_ratio: float = TUSIMPLE_POINT_RATIO,
) -> TuSimpleCounts:
    """
    Greedy lane pairing by number of correct points for one image.

    A pair is accepted when at least ``point_ratio`` of the ground-truth
    lane's sampled points are correct; prediction rows beyond the ground
    truth do not count against it. Predictions outside accepted pairs are false
    positives; ground truths outside accepted pairs are false negatives.
    """
    if len(h_samples) == 0:
        raise DataError("tusimple accuracy needs at least one h_sample")
    pred_x = [sample_lane(lane, h_samples) for lane in preds]
    gt_x = [sample_lane(lane, h_samples) for lane in gts]
    gt_points = [int(np.count_nonzero(~np.isnan(x))) for x in gt_x]

    correct = np.zeros((len(preds), len(gts)), dtype=np.int64)
    for i, px in enumerate(pred_x):
        for j, gx in enumerate(gt_x):
            with np.errstate(invalid="ignore"):
                correct[i, j] = int(np.count_nonzero(np.abs(px - gx) < dist_thresh))

    matched_correct = 0
    accepted = 0
    for i, j in _assign_greedy(correct.astype(np.float64)):
        if correct[i, j] == 0:
            continue
        matched_correct += int(correct[i, j])
        if correct[i, j] >= point_ratio * gt_points[j]:
            accepted += 1
    return TuSimpleCounts(
        correct=matched_correct,
        total=sum(gt_points),
        fp=len(preds) - accepted,
        predictions=len(preds),
        fn=len(gts) - accepted,
        ground_truths=len(gts),
    )


def tusimple_accuracy(
    preds: Sequence[Sequence[Lane]],
    gts: Sequence[Sequence[Lane]],
    h_samples: Sequence[int] | Sequence[Sequence[int]],
    dist_thresh: float = TUSIMPLE_DIST_THRESHOLD,
    point_ratio: float = TUSIMPLE_POINT_RATIO,
) -> tuple[float, float, float]:
    """
    (accuracy, fp_rate, fn_rate) over a set of images.

    ``h_samples`` is either one row list shared by every image or one list
    per image.
    """
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} prediction sets for {len(gts)} ground-truth sets")
    if len(h_samples) == 0:
        raise DataError("tusimple accuracy needs at least one h_sample")
    shared = isinstance(h_samples[0], (int, np.integer))
    totals = TuSimpleCounts()
    for index, (pred, gt) in enumerate(zip(preds, gts, strict=True)):
        rows = h_samples if shared else h_samples[index]
        totals = totals + tusimple_image_counts(pred, gt, rows, dist_thresh, point_ratio)
    return totals.accuracy, totals.fp_rate, totals.fn_rate


def parse_tusimple_record(json_line: str, path: str | None = None, line: int | None = None):
    """Returns (lanes, h_samples, raw_file); an x of -2 marks an absent point."""
    try:
        record = orjson.loads(json_line)
    except orjson.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e}", path=path, line=line)
    if not isinstance(record, dict) or not {"lanes", "h_samples", "raw_file"} <= set(record):
        raise ParseError("record needs 'lanes', 'h_samples' and 'raw_file'", path=path, line=line)
    h_samples = record["h_samples"]
    try:
        h_samples = [int(h) for h in h_samples]
        lanes = []
        for xs in record["lanes"]:
            if len(xs) != len(h_samples):
                raise ParseError(f"lane has {len(xs)} x values for {len(h_samples)} h_samples", path=path, line=line)
            points = [
                (float(x), float(h)) for x, h in zip(xs, h_samples, strict=True) if x != TUSIMPLE_ABSENT and x >= 0
            ]
            if points:
                lanes.append(Lane.from_points(points))
    except (TypeError, ValueError) as e:
        raise ParseError(f"non-numeric lane data: {e}", path=path, line=line)
    return lanes, h_samples, str(record["raw_file"])


def read_tusimple_file(path: str | os.PathLike) -> dict[str, tuple[list[Lane], list[int]]]:
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"cannot read {source}: {e.strerror}")
    records = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        if raw.strip():
            lanes, h_samples, raw_file = parse_tusimple_record(raw, path=str(source), line=number)
            records[raw_file] = (lanes, h_samples)
    return records


# Reports


@dataclass
class CategoryResult:
    name: str
    images: int = 0
    stats: MatchStats = field(default_factory=MatchStats)

    @property
    def scores(self) -> tuple[float, float, float]:
        return f1_from_stats(self.stats)


@dataclass
class EvalReport:
    overall: CategoryResult
    categories: dict[str, CategoryResult] = field(default_factory=dict)
    accuracy: float | None = None
    fp_rate: float = 0.0
    fn_rate: float = 0.0
    settings: dict[str, str] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.overall.scores[0]

    @property
    def recall(self) -> float:
        return self.overall.scores[1]

    @property
    def f1(self) -> float:
        return self.overall.scores[2]

    def headline(self) -> str:
        if self.accuracy is not None:
            return f"accuracy {self.accuracy:.6f}"
        return f"F1 {self.f1:.6f}"


def _rates(stats: MatchStats) -> tuple[float, float]:
    fp_rate = stats.fp / stats.predictions if stats.predictions else 0.0
    fn_rate = stats.fn / stats.ground_truths if stats.ground_truths else 0.0
    return fp_rate, fn_rate


def evaluate_sets(
    preds: Sequence[Sequence[Lane]],
    gts: Sequence[Sequence[Lane]],
    shapes: Sequence[tuple[int, int]],
    tags: Sequence[Sequence[str]] | None = None,
    iou_thresh: float = DEFAULT_IOU_THRESHOLD,
    width_px: float = DEFAULT_LANE_WIDTH,
    matcher: str = "hungarian",
    settings: Mapping[str, str] | None = None,
) -> EvalReport:
    """CULane-style evaluation of per-image lane lists, with per-tag breakdown."""
    if not len(preds) == len(gts) == len(shapes):
        raise DimensionError(f"{len(preds)} prediction sets, {len(gts)} ground-truth sets, {len(shapes)} shapes")
    overall = CategoryResult(ALL_CATEGORY)
    categories: dict[str, CategoryResult] = {}
    for index, (pred, gt, shape) in enumerate(zip(preds, gts, shapes, strict=True)):
        pred = [lane for lane in pred if len(lane) >= 2]
        gt = [lane for lane in gt if len(lane) >= 2]
        stats = match_lanes(pred, gt, iou_thresh, width_px, shape, matcher)
        overall.images += 1
        overall.stats = overall.stats + stats
        for tag in tags[index] if tags is not None else ():
            entry = categories.setdefault(tag, CategoryResult(tag))
            entry.images += 1
            entry.stats = entry.stats + stats
    fp_rate, fn_rate = _rates(overall.stats)
    report = EvalReport(
        overall=overall,
        categories=dict(sorted(categories.items())),
        fp_rate=fp_rate,
        fn_rate=fn_rate,
        settings={
            "iou_threshold": str(iou_thresh),
            "lane_width": str(width_px),
            "matcher": matcher,
            **(settings or {}),
        },
    )
    logger.debug({"event": "evaluated", "images": overall.images, "tp": overall.stats.tp, "f1": report.f1})
    return report


def _read_lanes(path: Path) -> list[Lane]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"cannot read {path}: {e.strerror}")
    return parse_culane_lines(text, path=str(path))


def _dataset_tags(gt_root: Path) -> dict[str, tuple[str, ...]]:
    index = gt_root / INDEX_FILE
    if not index.is_file():
        return {}
    tags = {}
    for raw in index.read_text(encoding="utf-8").splitlines():
        fields = raw.split()
        if fields:
            tags[fields[0]] = tuple(fields[1].split(",")) if len(fields) > 1 else ()
    return tags


def _image_shape(annotation: Path, fallback: tuple[int, int] | None) -> tuple[int, int]:
    stem = annotation.name[: -len(".lines.txt")]
    for suffix in (".pgm", ".ppm", ".png", ".jpg"):
        image_path = annotation.with_name(stem + suffix)
        if image_path.is_file():
            with Image.open(image_path) as handle:
                return handle.height, handle.width
    if fallback is None:
        raise DatasetIOError(f"no image found next to {annotation} and no image shape given")
    return fallback


def evaluate_culane_dirs(
    pred_dir: str | os.PathLike,
    gt_dir: str | os.PathLike,
    iou_thresh: float = DEFAULT_IOU_THRESHOLD,
    width_px: float = DEFAULT_LANE_WIDTH,
    shape: tuple[int, int] | None = DEFAULT_CULANE_SHAPE,
    matcher: str = "hungarian",
    settings: Mapping[str, str] | None = None,
) -> EvalReport:
    """
    Evaluate every ``*.lines.txt`` under ``gt_dir`` against the file at the
    same relative path under ``pred_dir``. A dataset written by the generator
    is recognised by its index; its images give the frame size and its tags
    the categories. A prediction under ``pred_dir/<stem>.lines.txt`` is also
    accepted for such a dataset. Missing prediction files count as no lanes.

    ``shape=None`` reads the frame size from the image next to each annotation.
    """
    pred_root, gt_root = Path(pred_dir), Path(gt_dir)
    if not gt_root.is_dir():
        raise DatasetIOError(f"ground-truth directory {gt_root} does not exist")
    if not pred_root.is_dir():
        raise DatasetIOError(f"prediction directory {pred_root} does not exist")
    dataset_tags = _dataset_tags(gt_root)
    annotations = sorted(gt_root.rglob("*.lines.txt"))

    preds, gts, shapes, tags = [], [], [], []
    missing = 0
    for annotation in annotations:
        relative = annotation.relative_to(gt_root)
        candidates = [pred_root / relative]
        if relative.parts[0] == IMAGES_DIR:
            candidates.append(pred_root / annotation.name)
        pred_path = next((p for p in candidates if p.is_file()), None)
        if pred_path is None:
            missing += 1
            preds.append([])
        else:
            preds.append(_read_lanes(pred_path))
        gts.append(_read_lanes(annotation))
        shapes.append(_image_shape(annotation, shape) if shape is None or dataset_tags else shape)
        stem = annotation.name[: -len(".lines.txt")]
        tags.append(dataset_tags.get(stem, ()))
    if missing:
        logger.warning({"event": "missing_predictions", "count": missing, "pred_dir": str(pred_root)})
    return evaluate_sets(preds, gts, shapes, tags, iou_thresh, width_px, matcher, settings)


def evaluate_tusimple_files(
    pred_file: str | os.PathLike,
    gt_file: str | os.PathLike,
    dist_thresh: float = TUSIMPLE_DIST_THRESHOLD,
    point_ratio: float = TUSIMPLE_POINT_RATIO,
    settings: Mapping[str, str] | None = None,
) -> EvalReport:
    """Records are paired by ``raw_file``; ground-truth rows drive the sampling."""
    predictions = read_tusimple_file(pred_file)
    ground_truth = read_tusimple_file(gt_file)
    totals = TuSimpleCounts()
    for raw_file, (gt_lanes, h_samples) in ground_truth.items():
        pred_lanes = predictions.get(raw_file, ([], h_samples))[0]
        totals = totals + tusimple_image_counts(pred_lanes, gt_lanes, h_samples, dist_thresh, point_ratio)
    overall = CategoryResult(ALL_CATEGORY, images=len(ground_truth), stats=totals.stats)
    return EvalReport(
        overall=overall,
        accuracy=totals.accuracy,
        fp_rate=totals.fp_rate,
        fn_rate=totals.fn_rate,
        settings={"dist_threshold": str(dist_thresh), "point_ratio": str(point_ratio), **(settings or {})},
    )
