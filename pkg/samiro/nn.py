"""
Network building blocks: the strided conv encoder, spatial attention, the
bias-free 1x1 projection, the segmentation head, the reconstruction decoder
used for masked-image pretraining, and polyline decoding of probability maps.
"""

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from helpers.exceptions import DimensionError
from samiro.lanes import Lane
from samiro.tensor import (
    Tensor,
    concat_channels,
    conv2d,
    elementwise,
    pool_over_channels,
    relu,
    sigmoid,
    upsample_nearest,
)

logger = logging.getLogger("lab")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Anything holding named parameter tensors."""

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{name}": value for name, value in self.named_parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.data.copy() for name, value in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise DimensionError(f"state is missing parameters: {', '.join(missing)}")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(f"parameter {name}: stored shape {list(value.shape)} != {list(param.shape)}")
            param.data = value.astype(param.dtype)

    def freeze(self) -> None:
        for _, param in self.named_parameters():
            param.requires_grad = False
            param.grad = None


@dataclass
class ConvBlock(Module):
    kernel: Tensor
    bias: Tensor | None
    stride: int = 1
    padding: int = 0

    @classmethod
    def create(
        cls,
        rng: np.random.Generator | None,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        bias: bool = True,
    ) -> "ConvBlock":
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        weights = he_normal(rng, shape) if rng is not None else np.zeros(shape)
        return cls(
            kernel=Tensor(weights, requires_grad=True),
            bias=Tensor(np.zeros(out_channels), requires_grad=True) if bias else None,
            stride=stride,
            padding=kernel_size // 2,
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "kernel", self.kernel
        if self.bias is not None:
            yield "bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class Encoder(Module):
    """
    Stack of stride-2 conv + ReLU stages.

    Stage ``l`` (1-based) has ``widths[l-1]`` channels and 1/2**l of the
    input resolution. ``rng=None`` builds all-zero weights.
    """

    def __init__(
        self,
        widths: Sequence[int],
        in_channels: int,
        kernel_size: int = 3,
        rng: np.random.Generator | None = None,
    ):
        if not widths:
            raise DimensionError("an encoder needs at least one stage")
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.stages: list[ConvBlock] = []
        previous = in_channels
        for width in self.widths:
            self.stages.append(ConvBlock.create(rng, previous, width, kernel_size, stride=2))
            previous = width

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for index, stage in enumerate(self.stages, start=1):
            for name, value in stage.named_parameters():
                yield f"stage{index}.{name}", value

    def __call__(self, image: Tensor) -> list[Tensor]:
        return encoder_forward(self, image)


def encoder_forward(encoder: Encoder, image: Tensor) -> list[Tensor]:
    """Feature pyramid, one map per stage, finest first."""
    if image.ndim != 3 or image.shape[0] != encoder.in_channels:
        raise DimensionError(
            f"encoder expects a [{encoder.in_channels},H,W] image, got shape {list(image.shape)}"
        )
    factor = 2**encoder.num_stages
    _, height, width = image.shape
    if height % factor or width % factor:
        raise DimensionError(f"image extents {height}x{width} are not divisible by 2**{encoder.num_stages}")
    pyramid = []
    features = image
    for stage in encoder.stages:
        features = relu(stage(features))
        pyramid.append(features)
    return pyramid


class SpatialAttentionBlock(Module):
    """Channel-pooled spatial attention: sigmoid(conv([avg; max])) scaling every channel."""

    def __init__(self, kernel_size: int = 7, rng: np.random.Generator | None = None):
        if kernel_size % 2 == 0:
            raise DimensionError(f"attention kernel size must be odd, got {kernel_size}")
        self.conv = ConvBlock.create(rng, 2, 1, kernel_size)

    @property
    def kernel_size(self) -> int:
        return self.conv.kernel.shape[-1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.conv.named_parameters()

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        return spatial_attention(self, features)


def spatial_attention(block: SpatialAttentionBlock, features: Tensor) -> tuple[Tensor, Tensor]:
    """Returns the [1,H,W] attention map and the filtered features."""
    pooled = concat_channels(pool_over_channels(features, "avg"), pool_over_channels(features, "max"))
    attention = sigmoid(block.conv(pooled))
    return attention, elementwise("mul", features, attention)


class Projection(Module):
    """Bias-free 1x1 convolution mapping target channels onto oracle channels."""

    def __init__(self, target_channels: int, oracle_channels: int, rng: np.random.Generator | None = None):
        self.conv = ConvBlock.create(rng, target_channels, oracle_channels, 1, bias=False)

    @property
    def weight(self) -> Tensor:
        return self.conv.kernel

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.conv.kernel

    def __call__(self, features: Tensor) -> Tensor:
        return project(self, features)


def project(projection: Projection, features: Tensor) -> Tensor:
    return projection.conv(features)


class UpsamplingDecoder(Module):
    """
    Conv + ReLU at the deepest resolution, then ``levels`` rounds of nearest
    x2 upsampling + conv + ReLU, then a 3x3 conv to ``out_channels``.
    """

    def __init__(
        self,
        in_channels: int,
        levels: int,
        hidden: int,
        out_channels: int,
        rng: np.random.Generator | None = None,
    ):
        self.levels = levels
        self.entry = ConvBlock.create(rng, in_channels, hidden, 3)
        self.refine = [ConvBlock.create(rng, hidden, hidden, 3) for _ in range(levels)]
        self.output = ConvBlock.create(rng, hidden, out_channels, 3)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        blocks = [("entry", self.entry)]
        blocks += [(f"refine{index}", block) for index, block in enumerate(self.refine, start=1)]
        blocks.append(("output", self.output))
        for prefix, block in blocks:
            for name, value in block.named_parameters():
                yield f"{prefix}.{name}", value

    def logits(self, features: Tensor) -> Tensor:
        hidden = relu(self.entry(features))
        for block in self.refine:
            hidden = relu(block(upsample_nearest(hidden, 2)))
        return self.output(hidden)


class LaneHead(UpsamplingDecoder):
    """Per-pixel lane probability at input resolution from the deepest stage."""

    def __init__(self, in_channels: int, levels: int, hidden: int = 8, rng: np.random.Generator | None = None):
        super().__init__(in_channels, levels, hidden, 1, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return lane_head_forward(self, features)


def lane_head_forward(head: LaneHead, features: Tensor) -> Tensor:
    return sigmoid(head.logits(features))


class ReconstructionDecoder(UpsamplingDecoder):
    """Pixel reconstruction for masked-image pretraining (linear output)."""

    def __init__(self, in_channels: int, levels: int, image_channels: int, hidden: int = 8, rng=None):
        super().__init__(in_channels, levels, hidden, image_channels, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return self.logits(features)


def _row_runs(row: np.ndarray) -> list[float]:
    """Centroid x of every run of set pixels in a boolean row."""
    padded = np.concatenate([[False], row, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(start + stop - 1) / 2.0 for start, stop in zip(edges[::2], edges[1::2], strict=True)]


def decode_lanes(
    prob_map: Tensor | np.ndarray,
    row_stride: int = 1,
    threshold: float = 0.5,
    max_dx: float = 5.0,
    max_row_gap: int | None = None,
) -> list[Lane]:
    """
    Turn a [1,H,W] probability map into lane polylines.

    Every ``row_stride``-th row is scanned for runs of pixels above
    ``threshold``; each run contributes its centroid. Points are chained
    top to bottom onto the track whose last point is nearest in x (within
    ``max_dx`` and at most ``max_row_gap`` rows back). Tracks with fewer than
    two points are discarded.
    """
    probs = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map)
    if probs.ndim == 3:
        if probs.shape[0] != 1:
            raise DimensionError(f"decode_lanes expects a single-channel map, got shape {list(probs.shape)}")
        probs = probs[0]
    if probs.ndim != 2:
        raise DimensionError(f"decode_lanes expects [1,H,W] or [H,W], got shape {list(probs.shape)}")
    if row_stride < 1:
        raise DimensionError(f"row_stride must be >= 1, got {row_stride}")
    gap = max_row_gap if max_row_gap is not None else 3 * row_stride

    tracks: list[list[tuple[float, float]]] = []
    for y in range(0, probs.shape[0], row_stride):
        centers = _row_runs(probs[y] > threshold)
        if not centers:
            continue
        candidates = []
        for track_index, track in enumerate(tracks):
            last_x, last_y = track[-1]
            if y - last_y > gap:
                continue
            for point_index, x in enumerate(centers):
                dx = abs(x - last_x)
                if dx <= max_dx:
                    candidates.append((dx, track_index, point_index))
        taken_tracks: set[int] = set()
        taken_points: set[int] = set()
        for _, track_index, point_index in sorted(candidates):
            if track_index in taken_tracks or point_index in taken_points:
                continue
            tracks[track_index].append((centers[point_index], float(y)))
            taken_tracks.add(track_index)
            taken_points.add(point_index)
        for point_index, x in enumerate(centers):
            if point_index not in taken_points:
                tracks.append([(x, float(y))])

    lanes = [Lane(points=tuple(track)) for track in tracks if len(track) >= 2]
    lanes.sort(key=lambda lane: (lane.points[-1][0], lane.points[0][1]))
    return lanes
