"""
Feature-level regularisers that keep a target encoder close to a frozen oracle.

Three variants are available next to the plain lane-detection loss:

* ``miro``: per-channel Gaussian log-likelihood of the target features
  around the oracle features, with learned channel scales ``w``.
* ``samiro``: the same idea on attention-filtered, channel-normalised oracle
  features, with the log-scale term rectified so it never goes negative.
* ``plain_l2``: mean squared distance to the projected target features.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from config import LossConfig
from helpers.constants import BCE_CLAMP, CHANNEL_SCALE_FLOOR
from helpers.exceptions import DataError, DimensionError, TrainingError
from samiro.nn import Projection, SpatialAttentionBlock, project, spatial_attention
from samiro.tensor import (
    Tensor,
    avg_pool2d,
    average,
    clamp,
    elementwise,
    log_abs,
    magnitude,
    mean,
    reduce,
    relu,
    sqrt,
)

logger = logging.getLogger("training")

_NORM_AXES = {
    "per_channel_spatial": (1, 2),
    "per_position_channel": (0,),
    "global_frobenius": (0, 1, 2),
}


@dataclass
class ChannelScale:
    """Learned per-channel scales, stored as [C,1,1] so they broadcast over H,W."""

    weight: Tensor

    @classmethod
    def ones(cls, channels: int) -> "ChannelScale":
        return cls(weight=Tensor(np.ones((channels, 1, 1)), requires_grad=True))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {list(a.shape)} and {list(b.shape)} differ")


def _require_scale(w: ChannelScale, features: Tensor) -> None:
    if w.weight.shape != (features.shape[0], 1, 1):
        raise DimensionError(
            f"channel scale of shape {list(w.weight.shape)} does not match {features.shape[0]} feature channels"
        )


def feature_norm(features: Tensor, mode: str) -> Tensor:
    """L2 norm in the given mode, kept broadcastable against ``features``."""
    if mode not in _NORM_AXES:
        raise ValueError(f"unknown norm mode '{mode}', expected one of {', '.join(_NORM_AXES)}")
    if features.ndim != 3:
        raise DimensionError(f"expected [C,H,W] features, got shape {list(features.shape)}")
    return sqrt(reduce("sq_l2_norm", features, axes=_NORM_AXES[mode], keepdims=True))


def channel_normalize(features: Tensor, mode: str, eps: float) -> Tensor:
    """Divide by max(norm, eps); an all-zero map stays zero."""
    return elementwise("div", features, clamp(feature_norm(features, mode), low=eps))


def miro_loss(f_s: Tensor, f_t: Tensor, w: ChannelScale) -> Tensor:
    """mean over C,H,W of log|w_c| + (F_s - F_t)^2 / |w_c|."""
    _require_same_shape(f_s, f_t, "miro_loss")
    _require_scale(w, f_s)
    residual = f_s - f_t
    per_element = log_abs(w.weight) + (residual * residual) / magnitude(w.weight, CHANNEL_SCALE_FLOOR)
    return mean(per_element)


def samiro_target(f_t: Tensor, g: Projection, cfg: LossConfig) -> Tensor:
    """
    The projected target side of the samiro residual.

    Normalisation always reads the un-projected target features. For the
    per-position and global modes the divisor is shared by every channel, so
    the projected map is divided by it. The per-channel mode normalises each
    target channel before projecting, which is defined for any pair of widths.
    """
    if not cfg.use_norm:
        return project(g, f_t)
    if cfg.norm_mode == "per_channel_spatial":
        return project(g, channel_normalize(f_t, cfg.norm_mode, cfg.eps_norm))
    divisor = clamp(feature_norm(f_t, cfg.norm_mode), low=cfg.eps_norm)
    return elementwise("div", project(g, f_t), divisor)


def samiro_loss(f_s_hat: Tensor, f_t: Tensor, g: Projection, w: ChannelScale, cfg: LossConfig) -> Tensor:
    """
    mean over C,H,W of ReLU(log|w_c|) + (A - B)^2 / |w_c|, where A is the
    (normalised) filtered oracle map and B the projected target map.
    """
    a = channel_normalize(f_s_hat, cfg.norm_mode, cfg.eps_norm) if cfg.use_norm else f_s_hat
    b = samiro_target(f_t, g, cfg)
    _require_same_shape(a, b, "samiro_loss")
    _require_scale(w, a)
    residual = a - b
    per_element = relu(log_abs(w.weight)) + (residual * residual) / magnitude(w.weight, CHANNEL_SCALE_FLOOR)
    return mean(per_element)


def plain_l2_distill(f_s: Tensor, f_t: Tensor, g: Projection) -> Tensor:
    projected = project(g, f_t)
    _require_same_shape(f_s, projected, "plain_l2_distill")
    residual = f_s - projected
    return mean(residual * residual)


def total_loss(l_ld: Tensor, per_stage_reg: Sequence[Tensor], cfg: LossConfig) -> Tensor:
    """L_LD + lambda * mean of the per-stage terms; L_LD itself when the regulariser is off."""
    if cfg.variant == "none" or cfg.lam == 0:
        return l_ld
    if not per_stage_reg:
        raise TrainingError(f"variant '{cfg.variant}' selected but no stage terms were computed")
    return l_ld + average(list(per_stage_reg)) * cfg.lam


def lane_detection_loss(prob: Tensor, gt_mask: Tensor | np.ndarray) -> Tensor:
    """Pixelwise binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    target = gt_mask if isinstance(gt_mask, Tensor) else Tensor(gt_mask, dtype=prob.dtype)
    if target.shape != prob.shape:
        raise DimensionError(f"lane_detection_loss: prediction {list(prob.shape)} vs mask {list(target.shape)}")
    if not np.all((target.data == 0) | (target.data == 1)):
        raise DataError("lane_detection_loss: ground-truth mask must be binary")
    p = clamp(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)
    log_likelihood = target * log_abs(p) + (1.0 - target) * log_abs(1.0 - p)
    return -mean(log_likelihood)


def pair_stages(f_s: Tensor, f_t: Tensor) -> tuple[Tensor, Tensor]:
    """Average-pool the larger of two maps so both share spatial extents."""
    (_, hs, ws), (_, ht, wt) = f_s.shape, f_t.shape
    if (hs, ws) == (ht, wt):
        return f_s, f_t
    larger, smaller = ((hs, ws), (ht, wt)) if hs >= ht else ((ht, wt), (hs, ws))
    if larger[0] % smaller[0] or larger[1] % smaller[1] or larger[0] // smaller[0] != larger[1] // smaller[1]:
        raise DimensionError(f"cannot pair stages of extents {hs}x{ws} and {ht}x{wt}")
    factor = larger[0] // smaller[0]
    if hs >= ht:
        return avg_pool2d(f_s, factor), f_t
    return f_s, avg_pool2d(f_t, factor)


@dataclass
class StageRegularizer:
    stage: int
    attention: SpatialAttentionBlock
    projection: Projection
    scale: ChannelScale


class RegularizerState:
    """Learnable regulariser parameters (attention p, projection g, scales w) for every regularised stage."""

    def __init__(
        self,
        oracle_widths: Sequence[int],
        target_widths: Sequence[int],
        cfg: LossConfig,
        attention_kernel: int = 7,
        rng: np.random.Generator | None = None,
    ):
        self.cfg = cfg
        self.stages: list[StageRegularizer] = []
        for stage in cfg.stage_set:
            if stage > min(len(oracle_widths), len(target_widths)):
                raise DimensionError(f"stage {stage} does not exist in both encoders")
            oracle_channels = oracle_widths[stage - 1]
            self.stages.append(
                StageRegularizer(
                    stage=stage,
                    attention=SpatialAttentionBlock(attention_kernel, rng),
                    projection=Projection(target_widths[stage - 1], oracle_channels, rng),
                    scale=ChannelScale.ones(oracle_channels),
                )
            )

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for entry in self.stages:
            prefix = f"reg.stage{entry.stage}"
            if self.cfg.variant == "samiro" and self.cfg.use_attention:
                params.update(entry.attention.parameters(f"{prefix}.attention."))
            params.update(entry.projection.parameters(f"{prefix}.projection."))
            if self.cfg.variant in ("samiro", "miro"):
                params[f"{prefix}.scale"] = entry.scale.weight
        return params

    def terms(self, oracle_pyramid: Sequence[Tensor], target_pyramid: Sequence[Tensor]) -> list[Tensor]:
        return regularizer_terms(self, oracle_pyramid, target_pyramid)


def regularizer_terms(
    state: RegularizerState, oracle_pyramid: Sequence[Tensor], target_pyramid: Sequence[Tensor]
) -> list[Tensor]:
    """One scalar loss per regularised stage, in ``stage_set`` order."""
    cfg = state.cfg
    terms = []
    for entry in state.stages:
        f_s, f_t = pair_stages(oracle_pyramid[entry.stage - 1], target_pyramid[entry.stage - 1])
        if cfg.variant == "samiro":
            f_s_hat = spatial_attention(entry.attention, f_s)[1] if cfg.use_attention else f_s
            terms.append(samiro_loss(f_s_hat, f_t, entry.projection, entry.scale, cfg))
        elif cfg.variant == "miro":
            terms.append(miro_loss(f_s, project(entry.projection, f_t), entry.scale))
        elif cfg.variant == "plain_l2":
            terms.append(plain_l2_distill(f_s, f_t, entry.projection))
    return terms
