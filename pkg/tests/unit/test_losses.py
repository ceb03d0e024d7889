"""Unit tests for the feature regularisers and the lane-detection loss."""

import math
import os
import sys

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../..")))

import numpy as np
import pytest

from config import LossConfig
from helpers.constants import NORM_MODES
from helpers.exceptions import DataError, DimensionError, TrainingError
from samiro import tensor as T
from samiro.losses import (
    ChannelScale,
    RegularizerState,
    channel_normalize,
    lane_detection_loss,
    miro_loss,
    pair_stages,
    plain_l2_distill,
    regularizer_terms,
    samiro_loss,
    total_loss,
)
from samiro.nn import Encoder, Projection
from samiro.tensor import Tensor
from samiro.training import SGD


def scale_of(values) -> ChannelScale:
    return ChannelScale(weight=Tensor(np.asarray(values, dtype=np.float64).reshape(-1, 1, 1), requires_grad=True))


def identity_projection(channels: int) -> Projection:
    g = Projection(channels, channels)
    g.weight.data = np.eye(channels).reshape(channels, channels, 1, 1).astype(g.weight.dtype)
    return g


def normalize_oracle(x: np.ndarray, mode: str, eps: float) -> np.ndarray:
    channels, height, width = x.shape
    out = np.zeros_like(x)
    if mode == "per_channel_spatial":
        for c in range(channels):
            norm = math.sqrt(sum(v * v for v in x[c].reshape(-1)))
            out[c] = x[c] / max(norm, eps)
    elif mode == "per_position_channel":
        for i in range(height):
            for j in range(width):
                norm = math.sqrt(sum(v * v for v in x[:, i, j]))
                out[:, i, j] = x[:, i, j] / max(norm, eps)
    else:
        norm = math.sqrt(sum(v * v for v in x.reshape(-1)))
        out = x / max(norm, eps)
    return out


@pytest.mark.unit
class TestChannelNormalize:
    @pytest.mark.parametrize("mode", NORM_MODES)
    def test_zero_map_stays_zero(self, mode):
        out = channel_normalize(T.zeros((2, 3, 3)), mode, 1e-8)
        assert np.all(out.data == 0)

    def test_channel_with_norm_four(self, float64):
        x = np.zeros((2, 2, 2))
        x[0] = 2.0  # four elements of 2: norm 4
        x[1] = [[1.0, 0.0], [0.0, 0.0]]
        out = channel_normalize(Tensor(x), "per_channel_spatial", 1e-8).data
        np.testing.assert_allclose(out[0], 0.5)
        assert np.linalg.norm(out[0]) == pytest.approx(1.0)
        assert np.linalg.norm(out[1]) == pytest.approx(1.0)

    @pytest.mark.parametrize("mode", NORM_MODES)
    def test_matches_loop_oracle(self, rng, float64, mode):
        x = rng.normal(size=(3, 4, 4))
        out = channel_normalize(Tensor(x), mode, 1e-8).data
        np.testing.assert_allclose(out, normalize_oracle(x, mode, 1e-8), rtol=0, atol=1e-12)


@pytest.mark.unit
class TestMiroLoss:
    def test_zero_residual_unit_scale(self, rng):
        f = Tensor(rng.normal(size=(3, 4, 4)))
        assert miro_loss(f, f, ChannelScale.ones(3)).item() == 0.0

    def test_unit_residual(self):
        assert miro_loss(T.ones((2, 3, 3)), T.zeros((2, 3, 3)), ChannelScale.ones(2)).item() == pytest.approx(1.0)

    def test_negative_below_unit_scale(self, float64):
        f = T.zeros((2, 3, 3))
        loss = miro_loss(f, f, scale_of([math.exp(-1.0)] * 2)).item()
        assert loss == pytest.approx(-1.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            miro_loss(T.zeros((2, 3, 3)), T.zeros((3, 3, 3)), ChannelScale.ones(2))

    def test_scale_shape_checked(self):
        with pytest.raises(DimensionError):
            miro_loss(T.zeros((2, 3, 3)), T.zeros((2, 3, 3)), ChannelScale.ones(3))

    def test_descent_on_scales_reaches_mean_square_residual(self, float64):
        rng = np.random.default_rng(21)
        channels = 4
        targets = rng.uniform(0.5, 2.0, size=channels)
        residual = rng.normal(size=(channels, 5, 5))
        residual *= np.sqrt(targets / (residual**2).mean(axis=(1, 2)))[:, None, None]
        f_s, f_t = Tensor(residual), T.zeros((channels, 5, 5))
        w = ChannelScale.ones(channels)
        optimizer = SGD({"w": w.weight}, lr=0.2 * channels, momentum=0.0)
        for _ in range(1500):
            T.backward(miro_loss(f_s, f_t, w))
            optimizer.step()
        np.testing.assert_allclose(np.abs(w.weight.data.reshape(-1)), targets, rtol=0.01)


@pytest.mark.unit
class TestSamiroLoss:
    def cfg(self, **changes) -> LossConfig:
        return LossConfig(**changes)

    def test_equal_sides_and_small_scale_give_zero(self, float64):
        # Both sides are already unit channel norm, identity projection
        x = np.zeros((2, 2, 2))
        x[0, 0, 0] = 1.0
        x[1, 1, 1] = 1.0
        loss = samiro_loss(Tensor(x), Tensor(x), identity_projection(2), scale_of([0.5, 1.0]), self.cfg())
        assert loss.item() == 0.0

    def test_zero_residual_scale_e(self, float64):
        x = Tensor(np.ones((2, 3, 3)))
        loss = samiro_loss(x, x, identity_projection(2), scale_of([math.e] * 2), self.cfg())
        assert loss.item() == pytest.approx(1.0, abs=1e-12)

    def test_zero_residual_scale_inverse_e_versus_miro(self, float64):
        x = Tensor(np.ones((2, 3, 3)))
        w = scale_of([math.exp(-1.0)] * 2)
        assert samiro_loss(x, x, identity_projection(2), w, self.cfg()).item() == 0.0
        assert miro_loss(x, x, w).item() == pytest.approx(-1.0, abs=1e-12)

    def test_relu_term_vanishes_at_unit_scale(self, float64):
        w = scale_of([1.0, -1.0])
        assert T.relu(T.log_abs(w.weight)).data.max() == 0.0

    def test_non_negative_on_random_inputs(self, float64):
        rng = np.random.default_rng(99)
        for case in range(1000):
            mode = NORM_MODES[case % 3]
            c_s, c_t = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            f_s = Tensor(rng.normal(scale=rng.uniform(0.01, 10), size=(c_s, 3, 3)))
            f_t = Tensor(rng.normal(scale=rng.uniform(0.01, 10), size=(c_t, 3, 3)))
            w = scale_of(rng.normal(scale=2.0, size=c_s))
            cfg = self.cfg(norm_mode=mode, use_norm=bool(case % 2))
            assert samiro_loss(f_s, f_t, Projection(c_t, c_s, rng), w, cfg).item() >= 0.0

    @pytest.mark.parametrize("mode", NORM_MODES)
    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_quadratic_term_is_scale_invariant_in_target(self, float64, mode, c):
        rng = np.random.default_rng(5)
        f_s = Tensor(rng.normal(size=(3, 4, 4)))
        f_t = rng.normal(size=(2, 4, 4))
        g = Projection(2, 3, rng)
        w = ChannelScale.ones(3)  # ReLU(log 1) = 0 leaves the quadratic term alone
        cfg = self.cfg(norm_mode=mode)
        base = samiro_loss(f_s, Tensor(f_t), g, w, cfg).item()
        scaled = samiro_loss(f_s, Tensor(c * f_t), g, w, cfg).item()
        assert abs(scaled - base) <= 1e-6 * abs(base)

    def test_projection_mismatch(self, float64):
        with pytest.raises(DimensionError):
            samiro_loss(T.ones((3, 2, 2)), T.ones((2, 2, 2)), Projection(2, 4), ChannelScale.ones(3), self.cfg())


@pytest.mark.unit
class TestPlainL2:
    def test_identical_features(self, rng):
        f = Tensor(rng.normal(size=(2, 3, 3)))
        assert plain_l2_distill(f, f, identity_projection(2)).item() == 0.0

    def test_residual_two(self):
        assert plain_l2_distill(T.ones((2, 2, 2)) * 3.0, T.ones((2, 2, 2)), identity_projection(2)).item() == 4.0

    def test_equals_miro_quadratic_at_unit_scale(self, rng, float64):
        f_s, f_t = Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
        g = identity_projection(3)
        assert plain_l2_distill(f_s, f_t, g).item() == pytest.approx(
            miro_loss(f_s, f_t, ChannelScale.ones(3)).item(), rel=1e-12
        )


@pytest.mark.unit
class TestTotalLoss:
    def test_lambda_zero_returns_lane_loss(self):
        l_ld = Tensor(0.7)
        assert total_loss(l_ld, [Tensor(5.0)], LossConfig(lam=0.0)) is l_ld

    def test_variant_none_returns_lane_loss(self):
        l_ld = Tensor(0.7)
        assert total_loss(l_ld, [], LossConfig(variant="none")) is l_ld

    def test_single_stage_sum(self, float64):
        assert total_loss(Tensor(0.5), [Tensor(0.25)], LossConfig(lam=1.0)).item() == 0.75

    def test_three_stage_mean(self, float64):
        stages = [Tensor(0.3), Tensor(0.6), Tensor(0.9)]
        assert total_loss(Tensor(1.0), stages, LossConfig(lam=0.1)).item() == pytest.approx(1.06, abs=1e-12)

    def test_empty_stage_list(self):
        with pytest.raises(TrainingError):
            total_loss(Tensor(1.0), [], LossConfig())


@pytest.mark.unit
class TestLaneDetectionLoss:
    def test_confident_prediction(self, rng):
        mask = (rng.random((1, 6, 6)) < 0.4).astype(np.float64)
        assert lane_detection_loss(Tensor(mask), mask).item() <= 1e-6

    def test_half_probability_is_ln2(self, float64):
        mask = np.zeros((1, 4, 4))
        mask[0, :, 1] = 1.0
        loss = lane_detection_loss(T.ones((1, 4, 4)) * 0.5, mask).item()
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_non_binary_mask(self):
        with pytest.raises(DataError):
            lane_detection_loss(T.ones((1, 2, 2)) * 0.5, np.full((1, 2, 2), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            lane_detection_loss(T.ones((1, 2, 2)), np.zeros((1, 2, 3)))


@pytest.mark.unit
class TestRegularizerState:
    def test_parameter_groups_follow_variant(self):
        def names(**changes):
            cfg = LossConfig(stage_set=(1, 2), **changes)
            return sorted(RegularizerState((4, 8), (4, 8), cfg, 3, np.random.default_rng(0)).parameters())

        full = names()
        assert "reg.stage1.attention.kernel" in full and "reg.stage2.scale" in full
        assert not any("attention" in n for n in names(use_attention=False))
        assert not any("attention" in n or "scale" in n for n in names(variant="plain_l2"))
        assert any("scale" in n for n in names(variant="miro"))
        assert not any("attention" in n for n in names(variant="miro"))

    def test_scales_start_at_one(self):
        state = RegularizerState((4,), (2,), LossConfig(stage_set=(1,)))
        assert np.all(state.stages[0].scale.weight.data == 1.0)

    def test_missing_stage(self):
        with pytest.raises(DimensionError):
            RegularizerState((4,), (4,), LossConfig(stage_set=(2,)))

    @pytest.mark.parametrize("variant", ["samiro", "miro", "plain_l2"])
    def test_one_term_per_stage(self, variant):
        rng = np.random.default_rng(2)
        cfg = LossConfig(variant=variant, stage_set=(2, 1))
        oracle, target = Encoder((4, 6), 1, 3, rng), Encoder((3, 5), 1, 3, rng)
        image = Tensor(rng.uniform(size=(1, 8, 8)))
        state = RegularizerState(oracle.widths, target.widths, cfg, 3, rng)
        terms = regularizer_terms(state, oracle(image), target(image))
        assert len(terms) == 2
        assert all(np.isfinite(term.item()) for term in terms)


@pytest.mark.unit
class TestPairStages:
    def test_equal_extents_untouched(self):
        a, b = T.ones((2, 4, 4)), T.ones((3, 4, 4))
        assert pair_stages(a, b) == (a, b)

    def test_larger_map_is_pooled(self):
        f_s, f_t = pair_stages(T.ones((2, 8, 8)), T.ones((3, 4, 4)))
        assert f_s.shape == (2, 4, 4) and f_t.shape == (3, 4, 4)
        f_s, f_t = pair_stages(T.ones((2, 2, 2)), T.ones((3, 4, 4)))
        assert f_t.shape == (3, 2, 2)

    def test_incommensurate_extents(self):
        with pytest.raises(DimensionError):
            pair_stages(T.ones((1, 6, 6)), T.ones((1, 4, 4)))
