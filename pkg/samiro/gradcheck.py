"""
Finite-difference verification of every backward rule.

Each registered case builds a small seeded problem in 64-bit precision and
returns a closure recomputing a scalar loss from its parameter leaves.
Analytic gradients from ``backward`` are compared with central differences;
the error of a parameter group is max|analytic - numeric| divided by the
largest gradient magnitude of the group.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from config import LossConfig
from helpers.constants import GRADCHECK_STEP, GRADCHECK_TOLERANCE
from samiro import tensor as T
from samiro.losses import (
    ChannelScale,
    RegularizerState,
    channel_normalize,
    lane_detection_loss,
    miro_loss,
    plain_l2_distill,
    regularizer_terms,
    samiro_loss,
    total_loss,
)
from samiro.nn import Encoder, LaneHead, Projection, SpatialAttentionBlock
from samiro.tensor import Tensor

logger = logging.getLogger("lab")

LossClosure = Callable[[], Tensor]
CaseBuilder = Callable[[np.random.Generator], tuple[LossClosure, dict[str, Tensor]]]

CASES: dict[str, CaseBuilder] = {}


def register_case(name: str) -> Callable[[CaseBuilder], CaseBuilder]:
    def decorator(builder: CaseBuilder) -> CaseBuilder:
        CASES[name] = builder
        return builder

    return decorator


@dataclass
class GradcheckEntry:
    case: str
    group: str
    max_rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    entries: list[GradcheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    @property
    def failures(self) -> list[GradcheckEntry]:
        return [entry for entry in self.entries if not entry.passed]

    def format(self) -> str:
        width = max([len(f"{e.case}/{e.group}") for e in self.entries] + [10])
        lines = [f"{'case/group':<{width}}  {'max_rel_err':>12}  result"]
        for entry in self.entries:
            label = f"{entry.case}/{entry.group}"
            lines.append(f"{label:<{width}}  {entry.max_rel_error:>12.3e}  {'ok' if entry.passed else 'FAIL'}")
        lines.append(f"{len(self.entries) - len(self.failures)}/{len(self.entries)} groups within {self.tolerance:g}")
        return "\n".join(lines)


def numerical_gradient(loss_fn: LossClosure, param: Tensor, step: float = GRADCHECK_STEP) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with T.no_grad():
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + step
            plus = loss_fn().item()
            flat[index] = original - step
            minus = loss_fn().item()
            flat[index] = original
            out[index] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_case(
    name: str, builder: CaseBuilder, tolerance: float, step: float = GRADCHECK_STEP, seed: int = 0
) -> list[GradcheckEntry]:
    with T.precision(np.float64):
        loss_fn, params = builder(np.random.default_rng(seed))
        for param in params.values():
            param.zero_grad()
        T.backward(loss_fn())
        entries = []
        for group, param in params.items():
            analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
            error = relative_error(analytic, numerical_gradient(loss_fn, param, step))
            entries.append(GradcheckEntry(name, group, error, error <= tolerance))
    return entries


def gradcheck_suite(
    tolerance: float = GRADCHECK_TOLERANCE, cases: dict[str, CaseBuilder] | None = None, seed: int = 0
) -> GradcheckReport:
    report = GradcheckReport(tolerance=tolerance)
    for name, builder in (cases if cases is not None else CASES).items():
        report.entries.extend(check_case(name, builder, tolerance, seed=seed))
        logger.debug({"event": "gradcheck_case", "case": name})
    logger.info({"event": "gradcheck_done", "groups": len(report.entries), "failures": len(report.failures)})
    return report


# Problem builders


def leaf(rng: np.random.Generator, *shape: int, away_from_zero: float = 0.0, name: str | None = None) -> Tensor:
    values = rng.normal(size=shape)
    if away_from_zero:
        values = np.where(np.abs(values) < away_from_zero, np.sign(values + 1e-12) * away_from_zero, values)
    return Tensor(values, requires_grad=True, name=name)


def scales(rng: np.random.Generator, channels: int) -> ChannelScale:
    """Channel scales clear of |w| = 1 and 0, where the log terms have kinks."""
    magnitude = rng.uniform(1.3, 2.0, size=(channels, 1, 1))
    magnitude[::2] = rng.uniform(0.4, 0.7, size=magnitude[::2].shape)
    sign = np.where(rng.random((channels, 1, 1)) < 0.5, -1.0, 1.0)
    return ChannelScale(weight=Tensor(sign * magnitude, requires_grad=True))


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_all(T.elementwise("mul", out, Tensor(weights)))


def _unary_case(op: Callable[[Tensor], Tensor], *shape: int, away: float = 0.0) -> CaseBuilder:
    def build(rng):
        x = leaf(rng, *shape, away_from_zero=away)
        weights = rng.normal(size=op(Tensor(x.data)).shape)
        return (lambda: weighted_sum(op(x), weights)), {"x": x}

    return build


def _binary_case(op: str, shape_a: tuple[int, ...], shape_b: tuple[int, ...]) -> CaseBuilder:
    def build(rng):
        a = leaf(rng, *shape_a)
        b = leaf(rng, *shape_b, away_from_zero=0.5)
        weights = rng.normal(size=np.broadcast_shapes(shape_a, shape_b))
        return (lambda: weighted_sum(T.elementwise(op, a, b), weights)), {"a": a, "b": b}

    return build


for _op in ("add", "sub", "mul", "div"):
    register_case(f"elementwise_{_op}")(_binary_case(_op, (3, 4, 5), (3, 1, 5)))
register_case("elementwise_scale")(_unary_case(lambda x: T.elementwise("scale", x, -2.5), 2, 3, 4))
register_case("sigmoid")(_unary_case(T.sigmoid, 2, 3, 4))
register_case("relu")(_unary_case(T.relu, 2, 3, 4, away=0.05))
register_case("log_abs")(_unary_case(T.log_abs, 2, 3, 4, away=0.2))
register_case("magnitude")(_unary_case(lambda x: T.magnitude(x, 1e-8), 2, 3, 4, away=0.05))
register_case("clamp")(_unary_case(lambda x: T.clamp(x, -0.8, 0.8), 2, 3, 4))
register_case("sqrt")(_unary_case(lambda x: T.sqrt(T.elementwise("mul", x, x)), 2, 3, 4, away=0.2))
for _reduction in T.REDUCTIONS:
    register_case(f"reduce_{_reduction}")(_unary_case(lambda x, r=_reduction: T.reduce(r, x, axes=(1, 2)), 3, 4, 5))
register_case("reduce_keepdims")(_unary_case(lambda x: T.reduce("sq_l2_norm", x, axes=0, keepdims=True), 3, 4, 5))
register_case("pool_avg")(_unary_case(lambda x: T.pool_over_channels(x, "avg"), 4, 5, 6))
register_case("pool_max")(_unary_case(lambda x: T.pool_over_channels(x, "max"), 4, 5, 6))
register_case("slice_channels")(_unary_case(lambda x: T.slice_channels(x, 1, 3), 4, 3, 3))
register_case("avg_pool2d")(_unary_case(lambda x: T.avg_pool2d(x, 2), 2, 4, 6))
register_case("upsample_nearest")(_unary_case(lambda x: T.upsample_nearest(x, 2), 2, 3, 3))


@register_case("concat_channels")
def _concat(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 3, 4)
    weights = rng.normal(size=(5, 3, 4))
    return (lambda: weighted_sum(T.concat_channels(a, b), weights)), {"a": a, "b": b}


def _conv_case(stride: int, padding: int, bias: bool) -> CaseBuilder:
    def build(rng):
        x = leaf(rng, 2, 7, 6)
        kernel = leaf(rng, 3, 2, 3, 3)
        b = leaf(rng, 3) if bias else None
        out_shape = T.conv2d(Tensor(x.data), Tensor(kernel.data), stride=stride, padding=padding).shape
        weights = rng.normal(size=out_shape)
        params = {"input": x, "kernel": kernel}
        if b is not None:
            params["bias"] = b
        return (lambda: weighted_sum(T.conv2d(x, kernel, b, stride=stride, padding=padding), weights)), params

    return build


register_case("conv2d")(_conv_case(1, 1, True))
register_case("conv2d_strided")(_conv_case(2, 1, True))
register_case("conv2d_valid")(_conv_case(1, 0, False))


def _normalize_case(mode: str) -> CaseBuilder:
    def build(rng):
        x = leaf(rng, 3, 4, 4)
        weights = rng.normal(size=(3, 4, 4))
        return (lambda: weighted_sum(channel_normalize(x, mode, 1e-8), weights)), {"x": x}

    return build


for _mode in ("per_channel_spatial", "per_position_channel", "global_frobenius"):
    register_case(f"channel_normalize_{_mode}")(_normalize_case(_mode))


@register_case("spatial_attention")
def _attention(rng):
    block = SpatialAttentionBlock(7, rng)
    block.conv.bias.data = rng.normal(size=1)
    features = leaf(rng, 3, 5, 5)
    weights = rng.normal(size=(3, 5, 5))
    params = {"features": features, "p.kernel": block.conv.kernel, "p.bias": block.conv.bias}
    return (lambda: weighted_sum(block(features)[1], weights)), params


@register_case("miro_loss")
def _miro(rng):
    f_s, f_t, w = leaf(rng, 3, 4, 4), leaf(rng, 3, 4, 4), scales(rng, 3)
    return (lambda: miro_loss(f_s, f_t, w)), {"f_s": f_s, "f_t": f_t, "w": w.weight}


def _samiro_case(mode: str) -> CaseBuilder:
    def build(rng):
        cfg = LossConfig(norm_mode=mode)
        f_s, f_t = leaf(rng, 3, 4, 4), leaf(rng, 2, 4, 4)
        g, w = Projection(2, 3, rng), scales(rng, 3)
        params = {"f_s_hat": f_s, "f_t": f_t, "g": g.weight, "w": w.weight}
        return (lambda: samiro_loss(f_s, f_t, g, w, cfg)), params

    return build


register_case("samiro_loss")(_samiro_case("per_channel_spatial"))
register_case("samiro_loss_per_position")(_samiro_case("per_position_channel"))
register_case("samiro_loss_global")(_samiro_case("global_frobenius"))


@register_case("plain_l2_distill")
def _plain(rng):
    f_s, f_t, g = leaf(rng, 3, 4, 4), leaf(rng, 2, 4, 4), Projection(2, 3, rng)
    return (lambda: plain_l2_distill(f_s, f_t, g)), {"f_s": f_s, "f_t": f_t, "g": g.weight}


@register_case("lane_detection_loss")
def _bce(rng):
    logits = leaf(rng, 1, 4, 5)
    mask = (rng.random((1, 4, 5)) < 0.3).astype(np.float64)
    return (lambda: lane_detection_loss(T.sigmoid(logits), mask)), {"logits": logits}


@register_case("samiro_full_graph")
def _full_graph(rng):
    """Target encoder and head, frozen oracle, attention, normalisation, projection, total loss."""
    cfg = LossConfig(lam=0.5, variant="samiro", stage_set=(1, 2))
    image = Tensor(rng.uniform(size=(1, 8, 8)))
    mask = (rng.random((1, 8, 8)) < 0.3).astype(np.float64)
    oracle = Encoder((4, 4), 1, 3, rng)
    oracle.freeze()
    encoder = Encoder((3, 4), 1, 3, rng)
    head = LaneHead(4, 2, hidden=3, rng=rng)
    for _, param in [*encoder.named_parameters(), *head.named_parameters()]:
        if param.ndim == 1:
            param.data = rng.normal(scale=0.1, size=param.shape)
    regularizer = RegularizerState((4, 4), (3, 4), cfg, attention_kernel=3, rng=rng)
    for entry in regularizer.stages:
        entry.attention.conv.bias.data = rng.normal(size=1)
        entry.scale.weight.data = scales(rng, entry.scale.channels).weight.data
    oracle_pyramid = oracle(image)

    def loss_fn() -> Tensor:
        target_pyramid = encoder(image)
        l_ld = lane_detection_loss(head(target_pyramid[-1]), mask)
        return total_loss(l_ld, regularizer_terms(regularizer, oracle_pyramid, target_pyramid), cfg)

    params = {
        **encoder.parameters("encoder."),
        **head.parameters("head."),
        **regularizer.parameters(),
    }
    return loss_fn, params
