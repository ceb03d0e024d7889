"""
Procedural road scenes with exact lane annotations.

A scene is a perspective road: lanes run from a vanishing region near the
horizon down to the bottom edge, bending with a shared curvature, over a
noisy road surface with bright clutter. Each scene may additionally receive
a global illumination change (gain and bias) and dark occluding rectangles
placed over lanes. The image changes under a perturbation; the lane
annotation never does.

Every random draw comes from one generator seeded by the scene seed, so the
same seed and parameters reproduce the same scene bit for bit.
"""

import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from config import DataConfig
from helpers.constants import (
    ANNOTATION_DECIMALS,
    GENERATION_RETRIES,
    IMAGES_DIR,
    INDEX_FILE,
    TAG_ILLUMINATION,
    TAG_NORMAL,
    TAG_OCCLUSION,
)
from helpers.exceptions import DataError, DatasetIOError, GenerationError, ParseError
from samiro.lanes import Lane, format_culane_lines, parse_culane_lines, render_lanes
from samiro.tensor import Tensor

logger = logging.getLogger("data")


@dataclass(frozen=True)
class SceneMeta:
    seed: tuple[int, ...]
    tags: tuple[str, ...] = (TAG_NORMAL,)


@dataclass
class Scene:
    image: Tensor  # [1 or 3, H, W], values in [0, 1]
    lanes: tuple[Lane, ...]
    meta: SceneMeta

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def occluded(self) -> bool:
        return TAG_OCCLUSION in self.meta.tags


@dataclass(frozen=True)
class OcclusionRect:
    x: int
    y: int
    w: int
    h: int
    value: float


def _seed_tuple(seed: int | Sequence[int]) -> tuple[int, ...]:
    return (int(seed),) if isinstance(seed, (int, np.integer)) else tuple(int(s) for s in seed)


def apply_illumination(image: np.ndarray, gain: float, bias: float) -> np.ndarray:
    """clip(gain * image + bias, 0, 1)."""
    if gain <= 0:
        raise DataError(f"illumination gain must be > 0, got {gain}")
    return np.clip(gain * np.asarray(image) + bias, 0.0, 1.0)


def apply_occlusion(image: np.ndarray, rects: Sequence[OcclusionRect]) -> np.ndarray:
    """Fill each rectangle with its value; rectangles must lie inside the image."""
    out = np.array(image, copy=True)
    height, width = out.shape[-2:]
    for rect in rects:
        inside = rect.x >= 0 and rect.y >= 0 and rect.x + rect.w <= width and rect.y + rect.h <= height
        if rect.w < 1 or rect.h < 1 or not inside:
            raise DataError(f"occlusion rectangle {rect} is not inside a {height}x{width} image")
        out[..., rect.y : rect.y + rect.h, rect.x : rect.x + rect.w] = rect.value
    return out


def _longest_run(keep: np.ndarray) -> slice:
    best = slice(0, 0)
    start = None
    for index, flag in enumerate(list(keep) + [False]):
        if flag and start is None:
            start = index
        elif not flag and start is not None:
            if index - start > best.stop - best.start:
                best = slice(start, index)
            start = None
    return best


def _draw_lanes(rng: np.random.Generator, params: DataConfig) -> list[Lane] | None:
    """One attempt at lane geometry; None when the draw is degenerate."""
    height, width = params.height, params.width
    y_top = int(round(params.horizon * height))
    y_bottom = height - 1
    rows = np.arange(y_top, height, dtype=np.float64)
    t = (rows - y_top) / (y_bottom - y_top)

    count = int(rng.integers(params.lanes_min, params.lanes_max + 1))
    vanishing_x = width / 2 + rng.uniform(-0.1, 0.1) * width
    bottom_shift = rng.uniform(-0.1, 0.1) * width
    spacing_bottom = width * rng.uniform(0.6, 0.9) / max(count - 1, 1)
    spacing_top = spacing_bottom * rng.uniform(0.12, 0.22)
    bend = rng.uniform(params.curvature_min, params.curvature_max) * width

    lanes = []
    columns = []
    min_rows = max(2, int(0.3 * len(rows)))
    for index in range(count):
        offset = index - (count - 1) / 2
        x_top = vanishing_x + offset * spacing_top
        x_bottom = width / 2 + bottom_shift + offset * spacing_bottom
        xs = x_top + (x_bottom - x_top) * t + bend * (1.0 - t) ** 2
        run = _longest_run((xs >= 0) & (xs <= width - 1))
        if run.stop - run.start < min_rows:
            continue
        column = np.full(len(rows), np.nan)
        column[run] = xs[run]
        columns.append(column)
        points = zip(xs[run], rows[run], strict=True)
        lanes.append(Lane(points=tuple((round(float(x), 4), float(y)) for x, y in points)))

    if len(lanes) < params.lanes_min:
        return None
    separation = params.lane_width_px + 3
    for left, right in zip(columns[:-1], columns[1:], strict=True):
        both = ~np.isnan(left) & ~np.isnan(right)
        if both.any() and np.min(np.abs(right[both] - left[both])) < separation:
            return None
    return lanes


def _paint(rng: np.random.Generator, lanes: Sequence[Lane], params: DataConfig) -> np.ndarray:
    height, width = params.height, params.width
    y_top = int(round(params.horizon * height))
    image = np.empty((height, width))
    sky = rng.uniform(0.45, 0.7)
    image[:y_top] = sky + np.linspace(0.1, 0.0, y_top)[:, None]
    image[y_top:] = rng.uniform(0.15, 0.35)
    image += rng.normal(0.0, 0.03, size=(height, width))
    clutter = rng.random((height, width)) < params.clutter_density
    image[clutter] = rng.uniform(0.5, 0.9, size=int(clutter.sum()))
    for lane in lanes:
        mask = render_lanes([lane], params.lane_width_px, height, width)
        image[mask] = rng.uniform(0.75, 0.95)
    image = np.clip(image, 0.0, 1.0)
    if params.channels == 3:
        tint = rng.uniform(0.85, 1.0, size=3)
        return np.clip(image[None] * tint[:, None, None], 0.0, 1.0)
    return image[None]


def _occluders(rng: np.random.Generator, lanes: Sequence[Lane], params: DataConfig) -> list[OcclusionRect]:
    height, width = params.height, params.width
    rects = []
    for _ in range(int(rng.integers(1, params.occluders_max + 1))):
        lane = lanes[int(rng.integers(len(lanes)))]
        x_center, y_center = lane.points[int(rng.integers(len(lane) // 2, len(lane)))]
        w = int(rng.integers(max(2, width // 10), max(3, width // 5)))
        h = int(rng.integers(max(2, height // 10), max(3, height // 5)))
        x = int(np.clip(round(x_center - w / 2), 0, width - w))
        y = int(np.clip(round(y_center - h / 2), 0, height - h))
        rects.append(OcclusionRect(x, y, w, h, float(rng.uniform(0.0, 0.2))))
    return rects


def generate_scene(seed: int | Sequence[int], params: DataConfig) -> Scene:
    """Draw one scene; degenerate lane geometry is redrawn a bounded number of times."""
    seed_key = _seed_tuple(seed)
    rng = np.random.default_rng(list(seed_key))
    for _ in range(GENERATION_RETRIES):
        lanes = _draw_lanes(rng, params)
        if lanes is not None:
            break
    else:
        raise GenerationError(f"seed {seed_key}: no valid lane layout after {GENERATION_RETRIES} attempts")

    image = _paint(rng, lanes, params)
    tags = []
    if rng.random() < params.p_illumination:
        gain = rng.uniform(params.gain_min, params.gain_max)
        image = apply_illumination(image, gain, rng.uniform(params.bias_min, params.bias_max))
        tags.append(TAG_ILLUMINATION)
    if params.occluders_max > 0 and rng.random() < params.p_occlusion:
        image = apply_occlusion(image, _occluders(rng, lanes, params))
        tags.append(TAG_OCCLUSION)
    return Scene(
        image=Tensor(image),
        lanes=tuple(lanes),
        meta=SceneMeta(seed=seed_key, tags=tuple(tags) or (TAG_NORMAL,)),
    )


def generate_dataset(params: DataConfig, count: int, seed: int) -> list[Scene]:
    """Scene ``i`` of a set is seeded by (seed, i)."""
    scenes = [generate_scene((seed, index), params) for index in range(count)]
    logger.info({"event": "dataset_generated", "count": count, "seed": seed})
    return scenes


def render_gt_mask(scene: Scene, width_px: float) -> np.ndarray:
    """Binary [1,H,W] lane mask of the scene's annotation."""
    return render_lanes(scene.lanes, width_px, scene.height, scene.width)[None].astype(np.float64)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(scenes: Sequence[Scene], directory: str | os.PathLike, decimals: int = ANNOTATION_DECIMALS) -> Path:
    """
    Write ``images/NNNN.pgm|ppm`` with ``images/NNNN.lines.txt`` beside each
    image, plus ``index.txt`` listing stems, tags and seeds.
    """
    root = Path(directory)
    images = root / IMAGES_DIR
    try:
        images.mkdir(parents=True, exist_ok=True)
        index_lines = []
        for number, scene in enumerate(scenes):
            stem = f"{number:04d}"
            pixels = _quantize(scene.image.data)
            if pixels.shape[0] == 1:
                Image.fromarray(pixels[0]).save(images / f"{stem}.pgm", format="PPM")
            else:
                rgb = np.ascontiguousarray(pixels.transpose(1, 2, 0))
                Image.fromarray(rgb).save(images / f"{stem}.ppm", format="PPM")
            (images / f"{stem}.lines.txt").write_text(format_culane_lines(scene.lanes, decimals), encoding="utf-8")
            tags = ",".join(scene.meta.tags)
            seed = ",".join(str(s) for s in scene.meta.seed)
            index_lines.append(f"{stem} {tags} {seed}")
        (root / INDEX_FILE).write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"cannot write dataset to {root}: {e}")
    logger.info({"event": "dataset_written", "path": str(root), "scenes": len(scenes)})
    return root


def read_image(path: Path) -> np.ndarray:
    """Read a PGM/PPM as a [C,H,W] array of values in [0, 1]."""
    try:
        with Image.open(path) as handle:
            if handle.mode not in ("L", "RGB"):
                raise ParseError(f"unsupported image mode {handle.mode}", path=str(path))
            pixels = np.asarray(handle)
    except (OSError, UnidentifiedImageError) as e:
        raise ParseError(f"unreadable image: {e}", path=str(path))
    pixels = pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)
    return pixels.astype(np.float64) / 255.0


def read_index(directory: str | os.PathLike) -> list[tuple[str, tuple[str, ...], tuple[int, ...]]]:
    index_path = Path(directory) / INDEX_FILE
    try:
        text = index_path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"cannot read dataset index {index_path}: {e.strerror}")
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) > 3:
            raise ParseError("expected 'stem [tags] [seed]'", path=str(index_path), line=number)
        tags = tuple(fields[1].split(",")) if len(fields) > 1 else (TAG_NORMAL,)
        try:
            seed = tuple(int(s) for s in fields[2].split(",")) if len(fields) > 2 else ()
        except ValueError:
            raise ParseError(f"bad seed '{fields[2]}'", path=str(index_path), line=number)
        entries.append((fields[0], tags, seed))
    return entries


def read_dataset(directory: str | os.PathLike) -> list[Scene]:
    root = Path(directory)
    images = root / IMAGES_DIR
    scenes = []
    for stem, tags, seed in read_index(root):
        candidates = [images / f"{stem}.pgm", images / f"{stem}.ppm"]
        image_path = next((p for p in candidates if p.is_file()), None)
        if image_path is None:
            raise DatasetIOError(f"{root}: image for '{stem}' is missing")
        annotation = images / f"{stem}.lines.txt"
        try:
            lanes_text = annotation.read_text(encoding="utf-8")
        except OSError as e:
            raise DatasetIOError(f"cannot read annotation {annotation}: {e.strerror}")
        scenes.append(
            Scene(
                image=Tensor(read_image(image_path)),
                lanes=tuple(parse_culane_lines(lanes_text, path=str(annotation))),
                meta=SceneMeta(seed=seed, tags=tags),
            )
        )
    logger.info({"event": "dataset_read", "path": str(root), "scenes": len(scenes)})
    return scenes


def check_scene_shapes(scenes: Sequence[Scene], params: DataConfig, source: str = "dataset") -> None:
    """Every image must have the configured channel count and frame size."""
    expected = (params.channels, params.height, params.width)
    for number, scene in enumerate(scenes):
        if tuple(scene.image.shape) != expected:
            raise DataError(
                f"{source}: scene {number:04d} is {list(scene.image.shape)}, config expects {list(expected)}"
            )
