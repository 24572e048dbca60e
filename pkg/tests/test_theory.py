import numpy as np
import pytest

from skiplab.theory import (GaussianTriplet, GradientEstimator, PathGradModel, QuadraticProblem,
                            bayes_gap_analytic, bayes_gap_check, bayes_gap_monte_carlo,
                            detach_condition_check, one_step_bound, one_step_check,
                            random_detach_case, second_moment_check)


class TestBayesGap:
    def test_analytic_examples(self):
        assert bayes_gap_analytic(GaussianTriplet(1.0, 0.0)) == 0.0
        assert bayes_gap_analytic(GaussianTriplet(1.0, 2.0)) == 4.0

    def test_correlated_case_by_residual_regression(self):
        # B = 0.5 A + sqrt(0.75) E, so E[Y|A,B] - E[Y|A] = beta * sqrt(0.75) E
        assert bayes_gap_analytic(GaussianTriplet(1.0, 1.0, corr=0.5)) == pytest.approx(0.75)
        assert bayes_gap_check(GaussianTriplet(1.0, 1.0, corr=0.5), n=100_000).passed

    def test_beta_zero(self):
        est = bayes_gap_monte_carlo(GaussianTriplet(1.0, 0.0), 100_000, 0)
        assert est.risk_difference == 0.0 and est.predictor_gap == 0.0

    def test_four(self):
        rep = bayes_gap_check(GaussianTriplet(1.0, 2.0), n=200_000, seed=1)
        assert rep.passed and abs(rep.estimate - 4.0) <= 3 * rep.stderr

    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianTriplet(1.0, 1.0, corr=1.0)
        with pytest.raises(ValueError):
            bayes_gap_monte_carlo(GaussianTriplet(1.0, 1.0), 0, 0)


class TestSecondMoment:
    def test_pure_variance(self):
        m = PathGradModel(np.zeros(2), np.zeros(2), np.eye(2), np.eye(2), np.zeros((2, 2)))
        assert m.second_moment_full() == 4.0
        assert second_moment_check(m).passed

    def test_means(self):
        m = PathGradModel([1.0, 0.0], [0.0, 1.0], np.eye(2), np.eye(2), np.zeros((2, 2)))
        assert m.second_moment_full() == 6.0
        assert second_moment_check(m, seed=3).passed

    def test_anti_correlation_cancels_variance(self):
        m = PathGradModel([1.0, 2.0], [0.5, -1.0], np.eye(2), np.eye(2), -np.eye(2))
        assert m.second_moment_full() == pytest.approx(1.5**2 + 1.0**2)
        rep = second_moment_check(m, n=1000)
        assert rep.passed and rep.stderr < 1e-9

    def test_not_psd(self):
        with pytest.raises(ValueError):
            PathGradModel(np.zeros(1), np.zeros(1), [[1.0]], [[1.0]], [[2.0]])


class TestOneStep:
    def test_gamma_zero(self):
        p = QuadraticProblem(1.0, (1.0, 1.0))
        e = GradientEstimator(cov=np.eye(2))
        assert one_step_bound(p, e, 0.0) == p.loss(p.theta)
        assert one_step_check(p, e, 0.0, n=1000).estimate == p.loss(p.theta)

    def test_exact_gradient_factor(self):
        p = QuadraticProblem(1.0, (1.0, 1.0))
        rep = one_step_check(p, GradientEstimator(), 0.1, n=10)
        assert abs(rep.target - 0.81) < 1e-12 and abs(rep.estimate - 0.81) < 1e-12 and rep.passed

    def test_noisy(self):
        p = QuadraticProblem(1.0, (1.0, -0.5))
        assert one_step_check(p, GradientEstimator(cov=np.eye(2)), 0.3, n=100_000).passed

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            one_step_check(QuadraticProblem(1.0, (1.0,)), GradientEstimator(), -0.1)


class TestDetach:
    def test_zero_skip_mean_favours_detach(self):
        p = QuadraticProblem(1.0, (1.0, 1.0))
        m = PathGradModel(p.grad(), np.zeros(2), 0.1 * np.eye(2), np.eye(2), np.zeros((2, 2)))
        d = detach_condition_check(p, m, 0.5)
        assert d.lhs == 0.0 and d.rhs > 0 and d.predicted_winner == "detach" and d.agree

    def test_aligned_skip_favours_full(self):
        p = QuadraticProblem(1.0, (1.0, 1.0))
        m = PathGradModel(p.grad(), 5 * p.grad(), 0.01 * np.eye(2), 0.01 * np.eye(2),
                          np.zeros((2, 2)))
        d = detach_condition_check(p, m, 0.05)
        assert not d.condition_holds and d.predicted_winner == "full" and d.agree

    def test_biased_main_rejected(self):
        p = QuadraticProblem(1.0, (1.0,))
        m = PathGradModel([0.0], [0.0], [[1.0]], [[1.0]], [[0.0]])
        with pytest.raises(ValueError):
            detach_condition_check(p, m, 0.1)

    def test_anisotropic_hessian_rejected(self):
        p, m, g = random_detach_case(np.random.default_rng(0), 2)
        with pytest.raises(ValueError):
            detach_condition_check(p, m, g, hessian=np.diag([1.0, 2.0]))
