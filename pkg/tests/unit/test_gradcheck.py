"""Unit tests for the finite-difference gradient checker."""

import os
import sys

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../..")))

import numpy as np
import pytest

from samiro import tensor as T
from samiro.gradcheck import CASES, check_case, gradcheck_suite, leaf, numerical_gradient, relative_error


def broken_square(x):
    """x**2 whose backward rule forgets the factor 2."""
    return T._record(x.data * x.data, "broken_square", (x,), lambda g: (g * x.data,))


def broken_case(rng):
    x = leaf(rng, 2, 3, away_from_zero=0.3)
    return (lambda: T.sum_all(broken_square(x))), {"x": x}


def honest_case(rng):
    x = leaf(rng, 2, 3)
    return (lambda: T.sum_all(x * x)), {"x": x}


@pytest.mark.unit
class TestGradcheckSuite:
    def test_every_registered_case_passes(self):
        report = gradcheck_suite(1e-4)
        assert report.entries
        failing = [f"{e.case}/{e.group}: {e.max_rel_error:.2e}" for e in report.failures]
        assert report.passed, failing

    @pytest.mark.parametrize("name", ["samiro_loss", "samiro_loss_per_position", "samiro_loss_global"])
    def test_samiro_case_per_norm_mode(self, name):
        entries = check_case(name, CASES[name], 1e-4)
        assert {entry.group for entry in entries} == {"f_s_hat", "f_t", "g", "w"}
        assert all(entry.passed for entry in entries)

    def test_full_graph_checks_scales_and_attention(self):
        groups = {entry.group for entry in check_case("samiro_full_graph", CASES["samiro_full_graph"], 1e-4)}
        assert "reg.stage1.scale" in groups
        assert "reg.stage2.attention.kernel" in groups
        assert "reg.stage1.projection.weight" in groups
        assert any(group.startswith("encoder.") for group in groups)

    def test_corrupted_rule_is_detected(self):
        report = gradcheck_suite(1e-4, cases={"honest": honest_case, "broken": broken_case})
        assert not report.passed
        assert [(e.case, e.group) for e in report.failures] == [("broken", "x")]
        # analytic is half the true gradient
        assert report.failures[0].max_rel_error == pytest.approx(0.5, rel=1e-4)

    def test_report_format(self):
        report = gradcheck_suite(1e-4, cases={"honest": honest_case, "broken": broken_case})
        text = report.format()
        assert "honest/x" in text
        assert "FAIL" in text
        assert text.splitlines()[-1] == "1/2 groups within 0.0001"

    def test_runs_in_double_precision(self):
        seen = []

        def record_dtype(rng):
            x = leaf(rng, 2)
            seen.append(x.dtype)
            return (lambda: T.sum_all(x)), {"x": x}

        gradcheck_suite(cases={"dtype": record_dtype})
        assert seen == [np.float64]


@pytest.mark.unit
class TestFiniteDifferences:
    def test_numerical_gradient_of_cube(self, float64):
        x = T.Tensor([0.5, -1.0, 2.0], requires_grad=True)
        grad = numerical_gradient(lambda: T.sum_all(x * x * x), x)
        np.testing.assert_allclose(grad, 3 * x.data**2, rtol=1e-8)

    def test_numerical_gradient_restores_values(self, float64):
        x = T.Tensor([0.5, -1.0], requires_grad=True)
        numerical_gradient(lambda: T.sum_all(x * x), x)
        np.testing.assert_array_equal(x.data, [0.5, -1.0])

    def test_relative_error(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
