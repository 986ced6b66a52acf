"""Tests for the linear mixed model likelihood, fitting and simulation.

The likelihood is checked against a dense multivariate normal evaluation,
the gradient against central differences, and the fit against the
Orthodont growth data.
"""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conetest.errors import EvaluationError, ValidationError
from conetest.models.dataset import design_matrices
from conetest.models.mixed_model import (
    ACCEPTED_GRADIENT_FACTOR,
    CovarianceLayout,
    FitOptions,
    LmmSpec,
    ParamVector,
    compute_sufficient_statistics,
    constrain,
    fit_ml,
    hessian_fim,
    loglik_gradient,
    marginal_loglik,
    simulate,
)
from conetest.models.structure import BlockTest, TestStructure

ORTHODONT_FIXED = ("1", "Sex", "age", "Sex:age")


def dense_loglik(spec, theta, ds):
    total = 0.0
    gamma = theta.gamma()
    for ind, pair in zip(ds.individuals, design_matrices(ds, spec.fixed_terms, spec.random_terms)):
        V = pair.Z @ gamma @ pair.Z.T + theta.sigma2 * np.eye(ind.n_obs)
        total += multivariate_normal(mean=pair.X @ theta.beta, cov=V).logpdf(ind.responses)
    return total


class TestCovarianceLayout:
    def test_counts(self):
        layout = CovarianceLayout((2, 1))
        assert layout.p == 3
        assert layout.n_params == 4
        assert layout.term_offsets() == [0, 2]
        assert layout.param_offsets() == [0, 3]

    def test_constructors(self):
        assert CovarianceLayout.full(3).blocks == (3,)
        assert CovarianceLayout.diagonal(3).blocks == (1, 1, 1)
        assert CovarianceLayout.full(0).blocks == ()

    def test_rejects_empty_block(self):
        with pytest.raises(ValidationError):
            CovarianceLayout((2, 0))


class TestLmmSpec:
    def test_intercept_moved_first(self):
        spec = LmmSpec(("age", "1"), ("1",), CovarianceLayout.full(1))
        assert spec.fixed_terms == ("1", "age")
        assert spec.n_params == 2 + 1 + 1

    def test_layout_must_match_random_terms(self):
        with pytest.raises(ValidationError):
            LmmSpec(("1",), ("1", "age"), CovarianceLayout.full(1))

    def test_parameter_labels(self, slope_spec):
        assert slope_spec.parameter_labels() == [
            "beta[1]",
            "beta[t]",
            "var[1]",
            "cov[1,t]",
            "var[t]",
            "sigma2",
        ]


class TestParamVector:
    def test_negative_sigma2(self):
        with pytest.raises(ValidationError):
            ParamVector([1.0], (), -0.1)

    def test_not_psd(self):
        with pytest.raises(ValidationError):
            ParamVector([1.0], (np.array([[1.0, 2.0], [2.0, 1.0]]),), 1.0)

    def test_asymmetric(self):
        with pytest.raises(ValidationError):
            ParamVector([1.0], (np.array([[1.0, 0.5], [0.0, 1.0]]),), 1.0)

    def test_flat_order(self, slope_theta, slope_spec):
        flat = slope_theta.flatten()
        np.testing.assert_allclose(flat, [5.0, 7.0, 0.64, 0.4, 1.0, 1.44])
        back = ParamVector.from_flat(flat, slope_spec.layout, slope_spec.b)
        np.testing.assert_allclose(back.gamma(), slope_theta.gamma())

    def test_gamma_is_block_diagonal(self):
        theta = ParamVector([0.0], (np.array([[2.0]]), np.array([[1.0, 0.3], [0.3, 1.0]])), 1.0)
        expected = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.3], [0.0, 0.3, 1.0]])
        np.testing.assert_allclose(theta.gamma(), expected)


class TestLikelihood:
    def test_matches_dense_normal(self, slope_spec, slope_theta, simulated):
        ours = marginal_loglik(slope_spec, slope_theta, simulated)
        assert ours == pytest.approx(dense_loglik(slope_spec, slope_theta, simulated), rel=1e-10)

    def test_matches_dense_normal_at_boundary(self, slope_spec, simulated):
        theta = ParamVector([5.0, 7.0], (np.array([[0.5, 0.0], [0.0, 0.0]]),), 2.0)
        ours = marginal_loglik(slope_spec, theta, simulated)
        assert ours == pytest.approx(dense_loglik(slope_spec, theta, simulated), rel=1e-10)

    def test_no_random_effects(self, simulated):
        spec = LmmSpec(("1", "t"), (), CovarianceLayout(()))
        theta = ParamVector([5.0, 7.0], (), 3.0)
        ours = marginal_loglik(spec, theta, simulated)
        assert ours == pytest.approx(dense_loglik(spec, theta, simulated), rel=1e-10)

    def test_singular_covariance(self, slope_spec, simulated):
        theta = ParamVector([5.0, 7.0], (np.zeros((2, 2)),), 0.0)
        with pytest.raises(EvaluationError):
            marginal_loglik(slope_spec, theta, simulated)

    def test_parameter_shape_checked(self, slope_spec, simulated):
        theta = ParamVector([5.0], (np.eye(2),), 1.0)
        with pytest.raises(ValidationError):
            marginal_loglik(slope_spec, theta, simulated)

    def test_gradient_matches_central_differences(self, slope_spec, slope_theta, simulated):
        flat = slope_theta.flatten()
        analytic = loglik_gradient(slope_spec, slope_theta, simulated)
        numeric = np.empty_like(flat)
        for j in range(len(flat)):
            step = 1e-6 * max(1.0, abs(flat[j]))
            up, down = flat.copy(), flat.copy()
            up[j] += step
            down[j] -= step
            f_up = marginal_loglik(
                slope_spec, ParamVector.from_flat(up, slope_spec.layout, 2), simulated
            )
            f_down = marginal_loglik(
                slope_spec, ParamVector.from_flat(down, slope_spec.layout, 2), simulated
            )
            numeric[j] = (f_up - f_down) / (2.0 * step)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-5)

    def test_sufficient_statistics_shapes(self, slope_spec, simulated):
        stats = compute_sufficient_statistics(slope_spec, simulated)
        assert stats.xtx.shape == (40, 2, 2)
        assert stats.ztx.shape == (40, 2, 2)
        assert stats.zty.shape == (40, 2)
        np.testing.assert_allclose(
            np.einsum("nij,njk->nik", stats.ztz_sqrt, stats.ztz_sqrt), stats.ztz, atol=1e-10
        )

    def test_sufficient_statistics_without_random_effects(self, simulated):
        spec = LmmSpec(("1", "t"), (), CovarianceLayout(()))
        stats = compute_sufficient_statistics(spec, simulated)
        assert stats.ztz.shape == (40, 0, 0)
        assert stats.ztx.shape == (40, 0, 2)
        assert stats.zty.shape == (40, 0)
        assert stats.xtx.shape == (40, 2, 2)


class TestFit:
    def test_recovers_simulated_parameters(self, slope_spec, slope_theta, simulated):
        fit = fit_ml(slope_spec, simulated)
        assert fit.converged
        assert fit.n_individuals == 40
        assert fit.loglik >= marginal_loglik(slope_spec, slope_theta, simulated)
        np.testing.assert_allclose(fit.theta_hat.beta, [5.0, 7.0], atol=0.6)
        assert fit.theta_hat.sigma2 == pytest.approx(1.44, rel=0.3)
        assert fit.history[-1] >= fit.history[0]

    def test_gradient_vanishes_at_interior_maximum(self, slope_spec, simulated):
        fit = fit_ml(slope_spec, simulated)
        gradient = loglik_gradient(slope_spec, fit.theta_hat, simulated)
        assert np.max(np.abs(gradient)) < 1e-2

    def test_orthodont_correlated_slope(self, orthodont):
        spec1 = LmmSpec(ORTHODONT_FIXED, ("1", "age"), CovarianceLayout.full(2), "Subject")
        spec0 = LmmSpec(ORTHODONT_FIXED, ("1",), CovarianceLayout.full(1), "Subject")
        fit1 = fit_ml(spec1, orthodont)
        fit0 = fit_ml(spec0, orthodont)
        assert fit1.converged and fit0.converged
        assert 2.0 * (fit1.loglik - fit0.loglik) == pytest.approx(0.8326426, abs=1e-3)

    def test_orthodont_no_random_effects(self, orthodont):
        spec1 = LmmSpec(ORTHODONT_FIXED, ("1", "age"), CovarianceLayout.diagonal(2), "Subject")
        spec0 = LmmSpec(ORTHODONT_FIXED, (), CovarianceLayout(()), "Subject")
        lrt = 2.0 * (fit_ml(spec1, orthodont).loglik - fit_ml(spec0, orthodont).loglik)
        assert lrt == pytest.approx(50.13311, abs=1e-2)

    def test_no_random_effects_is_least_squares(self, orthodont):
        spec = LmmSpec(ORTHODONT_FIXED, (), CovarianceLayout(()), "Subject")
        fit = fit_ml(spec, orthodont)
        assert fit.converged
        X = np.vstack([pair.X for pair in design_matrices(orthodont, ORTHODONT_FIXED, ())])
        y = orthodont.stacked()[0]
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        residuals = y - X @ beta
        np.testing.assert_allclose(fit.theta_hat.beta, beta, rtol=1e-5, atol=1e-6)
        assert fit.theta_hat.sigma2 == pytest.approx(residuals @ residuals / len(y), rel=1e-5)
        assert fit.theta_hat.gamma_blocks == ()

    def test_history_is_monotone(self, slope_spec, simulated):
        fit = fit_ml(slope_spec, simulated)
        history = np.array(fit.history)
        assert np.all(np.diff(history) >= -1e-9 * max(1.0, abs(history[0])))

    def test_converged_gradient_is_small(self, slope_spec, simulated):
        # One start: the gradient tolerance is relative to its log-likelihood
        fit = fit_ml(slope_spec, simulated, opts=FitOptions(restarts=0))
        assert fit.converged
        gtol = FitOptions().tol * max(1.0, abs(fit.history[0]))
        assert fit.gradient_norm <= ACCEPTED_GRADIENT_FACTOR * gtol

    def test_nested_model_never_fits_worse(self, slope_spec, simulated):
        smaller = LmmSpec(("1", "t"), ("1",), CovarianceLayout.full(1))
        larger = fit_ml(slope_spec, simulated)
        assert larger.loglik >= fit_ml(smaller, simulated).loglik - 1e-6

    def test_same_seed_same_fit(self, slope_spec, simulated):
        opts = FitOptions(restarts=2, seed=3)
        first = fit_ml(slope_spec, simulated, opts=opts)
        second = fit_ml(slope_spec, simulated, opts=opts)
        np.testing.assert_array_equal(first.theta_hat.flatten(), second.theta_hat.flatten())

    def test_boundary_variance_snapped_to_zero(self, time_design):
        # Data without any random slope variation
        spec = LmmSpec(("1", "t"), ("1",), CovarianceLayout.full(1))
        truth = ParamVector([1.0, 2.0], (np.zeros((1, 1)),), 1.0)
        ds = simulate(spec, truth, time_design(30, 4), seed=5)
        fit = fit_ml(spec, ds)
        assert fit.theta_hat.gamma_blocks[0][0, 0] >= 0.0


class TestConstrain:
    def test_subblock_keeps_leading_terms(self, slope_spec):
        null = TestStructure(2, (), slope_spec.layout, (BlockTest(0, "subblock", s=1),))
        reduced = constrain(slope_spec, null)
        assert reduced.random_terms == ("1",)
        assert reduced.layout.blocks == (1,)

    def test_covariances_only_splits_block(self, slope_spec):
        null = TestStructure(2, (), slope_spec.layout, (BlockTest(0, "covariances_only"),))
        reduced = constrain(slope_spec, null)
        assert reduced.layout.blocks == (1, 1)
        assert reduced.n_params == slope_spec.n_params - 1

    def test_tested_fixed_dropped(self, slope_spec):
        null = TestStructure(2, (1,), slope_spec.layout, (BlockTest(0, "full"),))
        reduced = constrain(slope_spec, null)
        assert reduced.fixed_terms == ("1",)
        assert reduced.random_terms == ()

    def test_mismatched_structure(self, slope_spec):
        null = TestStructure(3, (), slope_spec.layout, (BlockTest(0, "full"),))
        with pytest.raises(ValidationError):
            constrain(slope_spec, null)


class TestSimulate:
    def test_reproducible(self, slope_spec, slope_theta, time_design):
        design = time_design(5, 3)
        a = simulate(slope_spec, slope_theta, design, seed=7)
        b = simulate(slope_spec, slope_theta, design, seed=7)
        c = simulate(slope_spec, slope_theta, design, seed=8)
        np.testing.assert_array_equal(a.stacked()[0], b.stacked()[0])
        assert not np.array_equal(a.stacked()[0], c.stacked()[0])

    def test_noiseless(self, slope_spec, time_design):
        design = time_design(4, 5)
        theta = ParamVector([5.0, 7.0], (np.zeros((2, 2)),), 0.0)
        y, x = simulate(slope_spec, theta, design, seed=3).stacked()
        np.testing.assert_allclose(y, 5.0 + 7.0 * x[:, 0], atol=1e-12)

    def test_marginal_variance(self, time_design):
        spec = LmmSpec(("1",), ("1",), CovarianceLayout.full(1))
        theta = ParamVector([0.0], (np.array([[0.64]]),), 1.44)
        y, _ = simulate(spec, theta, time_design(10000, 2), seed=4).stacked()
        assert np.var(y) == pytest.approx(0.64 + 1.44, rel=0.05)

    def test_without_random_effects(self, time_design):
        spec = LmmSpec(("1", "t"), (), CovarianceLayout(()))
        theta = ParamVector([1.0, 2.0], (), 0.5)
        sim = simulate(spec, theta, time_design(30, 4), seed=6)
        fit = fit_ml(spec, sim)
        assert fit.converged
        np.testing.assert_allclose(fit.theta_hat.beta, [1.0, 2.0], atol=0.5)

    def test_covariates_untouched(self, slope_spec, slope_theta, time_design):
        design = time_design(5, 3)
        sim = simulate(slope_spec, slope_theta, design, seed=1)
        np.testing.assert_array_equal(sim.stacked()[1], design.stacked()[1])


class TestObservedInformation:
    def test_symmetric_positive_definite(self, slope_spec, simulated):
        fit = fit_ml(slope_spec, simulated)
        info = hessian_fim(fit, simulated)
        assert info.shape == (6, 6)
        np.testing.assert_allclose(info, info.T)
        assert np.linalg.eigvalsh(info)[0] > 0

    def test_beta_block_matches_gls(self, slope_spec, simulated):
        fit = fit_ml(slope_spec, simulated)
        info = hessian_fim(fit, simulated)
        gamma, sigma2 = fit.theta_hat.gamma(), fit.theta_hat.sigma2
        expected = np.zeros((2, 2))
        for ind, pair in zip(
            simulated.individuals, design_matrices(simulated, ("1", "t"), ("1", "t"))
        ):
            V = pair.Z @ gamma @ pair.Z.T + sigma2 * np.eye(ind.n_obs)
            expected += pair.X.T @ np.linalg.solve(V, pair.X)
        np.testing.assert_allclose(info[:2, :2], expected, rtol=1e-4)

    def test_intercept_only_closed_form(self, time_design):
        spec = LmmSpec(("1",), (), CovarianceLayout(()))
        truth = ParamVector([3.0], (), 2.0)
        ds = simulate(spec, truth, time_design(50, 4), seed=15)
        fit = fit_ml(spec, ds)
        info = hessian_fim(fit, ds)
        assert info.shape == (2, 2)
        assert info[0, 0] == pytest.approx(50 * 4 / fit.theta_hat.sigma2, rel=1e-4)

    def test_needs_converged_fit(self, slope_spec, simulated):
        fit = fit_ml(slope_spec, simulated, opts=FitOptions(max_iter=1, restarts=0))
        if fit.converged:
            pytest.skip("converged in one iteration")
        with pytest.raises(ValidationError):
            hessian_fim(fit, simulated)
