"""Lane polylines and their rasterisation."""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from helpers.exceptions import DataError, ParseError


@dataclass(frozen=True)
class Lane:
    """An ordered polyline of (x, y) image points, sorted by increasing y."""

    points: tuple[tuple[float, float], ...]

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]]) -> "Lane":
        ordered = sorted(((float(x), float(y)) for x, y in points), key=lambda p: p[1])
        return cls(points=tuple(ordered))

    def __len__(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def x_at(self, y: float) -> float | None:
        """Linear interpolation of x at row ``y``; None outside the lane's vertical span."""
        if not self.points:
            return None
        pts = self.as_array()
        if y < pts[0, 1] or y > pts[-1, 1]:
            return None
        return float(np.interp(y, pts[:, 1], pts[:, 0]))


def render_lane_mask(lane: Lane, width_px: float, height: int, width: int) -> np.ndarray:
    """
    Rasterise ``lane`` as a band of the given width.

    A pixel is set when the distance from its centre (integer coordinates) to
    the polyline is at most ``width_px / 2``. Pixels outside the image are
    clipped.
    """
    if len(lane) < 2:
        raise DataError(f"cannot render a lane with {len(lane)} point(s); at least 2 are needed")
    mask = np.zeros((height, width), dtype=bool)
    radius = width_px / 2.0
    radius_sq = radius * radius
    pts = lane.as_array()
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:], strict=True):
        left = max(int(np.floor(min(x0, x1) - radius)), 0)
        right = min(int(np.ceil(max(x0, x1) + radius)), width - 1)
        top = max(int(np.floor(min(y0, y1) - radius)), 0)
        bottom = min(int(np.ceil(max(y0, y1) + radius)), height - 1)
        if left > right or top > bottom:
            continue
        px, py = np.meshgrid(
            np.arange(left, right + 1, dtype=np.float64), np.arange(top, bottom + 1, dtype=np.float64)
        )
        dx = x1 - x0
        dy = y1 - y0
        length_sq = dx * dx + dy * dy
        if length_sq > 0:
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / length_sq, 0.0, 1.0)
        else:
            t = np.zeros_like(px)
        ex = px - x0 - t * dx
        ey = py - y0 - t * dy
        mask[top : bottom + 1, left : right + 1] |= ex * ex + ey * ey <= radius_sq
    return mask


def render_lanes(lanes: Sequence[Lane], width_px: float, height: int, width: int) -> np.ndarray:
    """Union of the masks of every lane with at least two points."""
    mask = np.zeros((height, width), dtype=bool)
    for lane in lanes:
        if len(lane) >= 2:
            mask |= render_lane_mask(lane, width_px, height, width)
    return mask


def format_culane_lines(lanes: Sequence[Lane], decimals: int = 4) -> str:
    """One lane per line as ``x1 y1 x2 y2 ...``."""
    lines = []
    for lane in lanes:
        lines.append(" ".join(f"{x:.{decimals}f} {y:.{decimals}f}" for x, y in lane.points))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_culane_lines(text: str, path: str | None = None) -> list[Lane]:
    """Parse a ``.lines.txt`` document; blank lines are skipped."""
    lanes = []
    for number, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) % 2:
            raise ParseError(f"odd number of coordinates ({len(tokens)})", path=path, line=number)
        try:
            values = [float(token) for token in tokens]
        except ValueError as e:
            raise ParseError(f"non-numeric coordinate: {e}", path=path, line=number)
        if not all(np.isfinite(values)):
            raise ParseError("non-finite coordinate", path=path, line=number)
        points = list(zip(values[::2], values[1::2], strict=True))
        ys = [y for _, y in points]
        if len(set(ys)) != len(ys):
            raise ParseError("lane visits the same y twice", path=path, line=number)
        lanes.append(Lane.from_points(points))
    return lanes
