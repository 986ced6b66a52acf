"""Tests for the variance-components test engine on fitted models and fit summaries."""

import json

import numpy as np
import pytest

from conetest.errors import (
    FimUnavailableError,
    NestednessError,
    NumericalError,
    SummaryError,
    ValidationError,
)
from conetest.inference.engine import (
    FitSummary,
    TestOptions,
    describe_test,
    parse_fit_summary,
    var_comp_test,
)
from conetest.models.mixed_model import CovarianceLayout, LmmSpec, fit_ml
from conetest.models.structure import (
    COVARIANCES_ONLY,
    FULL,
    SUBBLOCK,
    BlockTest,
    TestStructure,
)

ORTHODONT_FIXED = ("1", "Sex", "age", "Sex:age")


@pytest.fixture(scope="module")
def orthodont_fits(orthodont):
    def fit(random, blocks):
        return fit_ml(
            LmmSpec(ORTHODONT_FIXED, random, CovarianceLayout(blocks), "Subject"), orthodont
        )

    return {
        "full": fit(("1", "age"), (2,)),
        "diag": fit(("1", "age"), (1, 1)),
        "intercept": fit(("1",), (1,)),
        "none": fit((), ()),
    }


def single_variance_structure():
    return TestStructure(1, (), CovarianceLayout((1,)), (BlockTest(0, FULL),))


class TestOrthodont:
    def test_correlated_slope(self, orthodont, orthodont_fits):
        result = var_comp_test(
            orthodont_fits["full"], orthodont_fits["intercept"], TestOptions(pval_mode="both"), orthodont
        )
        assert result.lrt == pytest.approx(0.8326426, abs=1e-3)
        assert result.dims.dfs == [1, 2]
        assert result.weights.exact
        np.testing.assert_array_equal(result.weights.weights, [0.5, 0.5])
        assert result.pvalues.from_weights == pytest.approx(0.5104889, abs=5e-4)
        assert result.pvalues.lower_bound == pytest.approx(result.pvalues.upper_bound)
        assert result.tested_description == "Testing that variance of age is null"
        assert result.null_description == "var(age) = 0, cov(Intercept,age) = 0"
        assert result.alternative_description == "var(age) > 0"
        assert result.M is None
        assert result.fim is None

    def test_independent_slope(self, orthodont, orthodont_fits):
        result = var_comp_test(
            orthodont_fits["diag"], orthodont_fits["intercept"], TestOptions(pval_mode="both"), orthodont
        )
        assert result.lrt == pytest.approx(0.5304106, abs=1e-3)
        assert result.dims.dfs == [0, 1]
        assert result.pvalues.from_weights == pytest.approx(0.2332171, abs=5e-4)

    def test_both_variances_bounds_only(self, orthodont, orthodont_fits):
        result = var_comp_test(orthodont_fits["diag"], orthodont_fits["none"], data=orthodont)
        assert result.lrt == pytest.approx(50.13311, abs=1e-2)
        assert result.pvalues.lower_bound == pytest.approx(7.18311e-13, rel=1e-2)
        assert result.pvalues.upper_bound == pytest.approx(7.215163e-12, rel=1e-2)
        assert result.weights is None
        assert result.pvalues.from_weights is None
        assert result.tested_description == "Testing that variances of Intercept and age are null"

    def test_both_variances_monte_carlo(self, orthodont, orthodont_fits):
        options = TestOptions(pval_mode="both", M=5000, seed=1)
        result = var_comp_test(orthodont_fits["diag"], orthodont_fits["none"], options, orthodont)
        np.testing.assert_allclose(result.weights.weights, [0.3765372, 0.5, 0.1234628], atol=0.03)
        assert result.pvalues.from_weights == pytest.approx(2.32255e-12, rel=0.25)
        assert result.pvalues.lower_bound <= result.pvalues.from_weights <= result.pvalues.upper_bound
        assert result.pvalues.from_sample == 0.0
        assert any("below 1/M" in warning for warning in result.warnings)
        assert result.M == 5000
        assert result.seed == 1
        assert result.fim.kind == "extracted"

    def test_monte_carlo_reproducible(self, orthodont, orthodont_fits):
        options = TestOptions(pval_mode="approx", M=1000, seed=4)
        first = var_comp_test(orthodont_fits["diag"], orthodont_fits["none"], options, orthodont)
        second = var_comp_test(
            orthodont_fits["diag"],
            orthodont_fits["none"],
            TestOptions(pval_mode="approx", M=1000, seed=4, workers=2),
            orthodont,
        )
        np.testing.assert_array_equal(first.weights.weights, second.weights.weights)

    def test_fit_needs_data_for_fim(self, orthodont_fits):
        with pytest.raises(ValidationError):
            var_comp_test(
                orthodont_fits["diag"], orthodont_fits["none"], TestOptions(pval_mode="approx")
            )

    def test_non_nested_models(self, orthodont, orthodont_fits):
        with pytest.raises(NestednessError):
            var_comp_test(orthodont_fits["intercept"], orthodont_fits["full"], data=orthodont)

    @pytest.mark.slow
    def test_bootstrap_fim(self, orthodont, orthodont_fits):
        options = TestOptions(pval_mode="approx", fim_mode="compute", M=2000, B=100, seed=2)
        result = var_comp_test(orthodont_fits["diag"], orthodont_fits["none"], options, orthodont)
        assert result.fim.kind == "bootstrap"
        assert result.fim.is_inverse
        assert abs(sum(result.weights.weights) - 1.0) < 1e-9


class TestSummaries:
    def test_glmm_summary(self, summary_path):
        m1 = parse_fit_summary(summary_path("cbpp_glmm.json"))
        m0 = parse_fit_summary(summary_path("cbpp_glmm_h0.json"))
        result = var_comp_test(m1, m0, TestOptions(pval_mode="both"))
        assert result.lrt == pytest.approx(14.00527)
        assert result.dims.dfs == [0, 1]
        assert result.pvalues.from_weights == pytest.approx(9.114967e-05, rel=1e-5)
        assert result.pvalues.lower_bound == result.pvalues.upper_bound
        assert result.tested_description == "Testing that variance of Intercept is null"
        assert any("lrt_override" in warning for warning in result.warnings)

    def test_nlmm_summary_bounds(self, summary_path):
        m1 = parse_fit_summary(summary_path("loblolly_nlmm.json"))
        m0 = parse_fit_summary(summary_path("loblolly_nlmm_h0.json"))
        result = var_comp_test(m1, m0)
        assert result.dims.q == 7
        assert result.dims.dfs == [0, 1, 2]
        assert result.pvalues.lower_bound == pytest.approx(0.05620995, rel=1e-5)
        assert result.pvalues.upper_bound == pytest.approx(0.1980462, rel=1e-5)
        assert result.tested_description == "Testing that variances of R0 and lrc are null"

    def test_nlmm_summary_without_fim(self, summary_path):
        m1 = parse_fit_summary(summary_path("loblolly_nlmm.json"))
        m0 = parse_fit_summary(summary_path("loblolly_nlmm_h0.json"))
        with pytest.raises(FimUnavailableError):
            var_comp_test(m1, m0, TestOptions(pval_mode="approx"))
        with pytest.raises(FimUnavailableError):
            var_comp_test(m1, m0, TestOptions(pval_mode="approx", fim_mode="compute"))

    def test_fim_file(self, summary_path, tmp_path):
        path = tmp_path / "fim.txt"
        np.savetxt(path, np.eye(7))
        m1 = parse_fit_summary(summary_path("loblolly_nlmm.json"))
        m0 = parse_fit_summary(summary_path("loblolly_nlmm_h0.json"))
        options = TestOptions(pval_mode="approx", fim_mode="file", fim_path=str(path), M=20000, seed=3)
        result = var_comp_test(m1, m0, options)
        np.testing.assert_allclose(result.weights.weights, [0.25, 0.5, 0.25], atol=0.02)
        assert result.fim.kind == "user"

    def test_fim_in_summary(self):
        structure = single_variance_structure()
        fim = np.diag([4.0, 2.0, 1.0])
        m1 = FitSummary(loglik=-10.0, structure=structure, fim=fim)
        m0 = FitSummary(loglik=-11.0)
        result = var_comp_test(m1, m0, TestOptions(pval_mode="approx"))
        # One half-line has closed-form weights; no FIM is needed
        assert result.weights.exact
        assert result.fim is None
        assert result.lrt == pytest.approx(2.0)

    def test_fitted_and_summary_mixed(self, orthodont_fits):
        with pytest.raises(ValidationError):
            var_comp_test(orthodont_fits["diag"], FitSummary(loglik=-10.0))

    def test_small_negative_lrt_clamped(self):
        m1 = FitSummary(loglik=-10.0, structure=single_variance_structure())
        m0 = FitSummary(loglik=-10.0 + 1e-8)
        result = var_comp_test(m1, m0)
        assert result.lrt == 0.0
        assert result.pvalues.lower_bound == pytest.approx(0.5)
        assert any("clamped" in warning for warning in result.warnings)

    def test_negative_lrt(self):
        m1 = FitSummary(loglik=-12.0, structure=single_variance_structure())
        m0 = FitSummary(loglik=-10.0)
        with pytest.raises(NumericalError):
            var_comp_test(m1, m0)

    def test_summaries_disagree(self):
        other = TestStructure(1, (0,), CovarianceLayout((1,)), (BlockTest(0, FULL),))
        m1 = FitSummary(loglik=-10.0, structure=single_variance_structure())
        m0 = FitSummary(loglik=-11.0, structure=other)
        with pytest.raises(NestednessError):
            var_comp_test(m1, m0)

    def test_theta_length_checked(self):
        with pytest.raises(SummaryError) as excinfo:
            FitSummary(loglik=-10.0, structure=single_variance_structure(), theta=[1.0, 2.0])
        assert excinfo.value.paths == ["theta"]


class TestParseFitSummary:
    def write(self, tmp_path, payload):
        path = tmp_path / "summary.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return str(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(SummaryError):
            parse_fit_summary(str(tmp_path / "absent.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "summary.json"
        path.write_text("{loglik", encoding="utf-8")
        with pytest.raises(SummaryError):
            parse_fit_summary(str(path))

    def test_schema_paths(self, tmp_path):
        payload = {
            "loglik": -1.0,
            "fixed": {"count": 1},
            "blocks": [{"size": 2, "test": "sideways"}],
        }
        with pytest.raises(SummaryError) as excinfo:
            parse_fit_summary(self.write(tmp_path, payload))
        assert "blocks.0.test" in excinfo.value.paths

    def test_unknown_field(self, tmp_path):
        with pytest.raises(SummaryError) as excinfo:
            parse_fit_summary(self.write(tmp_path, {"loglik": -1.0, "colour": "red"}))
        assert "colour" in excinfo.value.paths

    def test_structure_built(self, tmp_path):
        payload = {
            "loglik": -1.0,
            "fixed": {"count": 2, "tested_indices": [1]},
            "blocks": [{"size": 3, "test": "subblock", "s": 1}],
            "residual_param_count": 1,
            "theta": [0.0] * 9,
        }
        summary = parse_fit_summary(self.write(tmp_path, payload))
        assert summary.structure.q == 9
        assert summary.structure.tested_fixed == (1,)
        assert summary.structure.block_tests[0].kind == SUBBLOCK

    def test_invalid_structure_reported_on_blocks(self, tmp_path):
        payload = {
            "loglik": -1.0,
            "fixed": {"count": 1},
            "blocks": [{"size": 1, "test": "covariances_only"}],
        }
        with pytest.raises(SummaryError) as excinfo:
            parse_fit_summary(self.write(tmp_path, payload))
        assert "blocks" in excinfo.value.paths


class TestDescribeTest:
    def test_covariances_only(self):
        ts = TestStructure(1, (), CovarianceLayout((3,)), (BlockTest(0, COVARIANCES_ONLY),))
        sentence, null, alternative = describe_test(ts, ["1"], [("1", "a", "b")])
        assert sentence == (
            "Testing that covariances of (Intercept, a), (Intercept, b) and (a, b) are null"
        )
        assert null == "cov(Intercept,a) = 0, cov(Intercept,b) = 0, cov(a,b) = 0"

    def test_variance_with_fixed_effect(self):
        ts = TestStructure(2, (1,), CovarianceLayout((2,)), (BlockTest(0, SUBBLOCK, s=1),))
        sentence, null, alternative = describe_test(ts, ["1", "age"], [("1", "age")])
        assert sentence == "Testing that variance of age and fixed effect of age are null"
        assert alternative == "var(age) > 0 or beta(age) != 0"

    def test_default_names(self):
        sentence, _, _ = describe_test(single_variance_structure())
        assert sentence == "Testing that variance of b1 is null"
