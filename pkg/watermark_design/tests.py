import numpy as np
from django.test import SimpleTestCase

from plant_management.exceptions import DegenerateCovarianceError
from plant_management.plant import PlantModel, markov_parameter
from plant_management.utils import generate_random_system

from .design import (
    LqgWeights,
    build_P,
    build_X,
    design_watermark,
    expected_kl,
    kl_bounds,
    lqg_cost,
    noise_output_cov,
    optimal_watermark,
    resolve_budget,
    watermark_output_cov,
)


class ScalarDesignTests(SimpleTestCase):
    """a = 0.5, b = c = 1, Q = R = 1, X = I, delta = 1."""

    def setUp(self):
        self.model = PlantModel.scalar(0.5)
        self.weights = LqgWeights.identity(1, 1)
        self.design = design_watermark(self.model, self.weights, 1.0)

    def test_noise_covariance(self):
        self.assertAlmostEqual(self.design.W_cal[0, 0], 7.0 / 3.0, places=12)

    def test_design_matrices(self):
        self.assertAlmostEqual(self.design.P_mat[0, 0], 4.0 / 7.0, places=12)
        self.assertAlmostEqual(self.design.X_mat[0, 0], 7.0 / 3.0, places=12)

    def test_optimal_covariance(self):
        self.assertAlmostEqual(self.design.U_star[0, 0], 3.0 / 7.0, places=12)
        self.assertAlmostEqual(self.design.U_cal[0, 0], 4.0 / 7.0, places=12)
        self.assertFalse(self.design.degenerate)

    def test_lqg_cost(self):
        cost = lqg_cost(self.model, self.weights, self.design.U_star, self.design.W_cal)
        self.assertAlmostEqual(cost.J0, 7.0 / 3.0, places=12)
        self.assertAlmostEqual(cost.delta_J, 1.0, places=10)


class OptimalWatermarkTests(SimpleTestCase):
    def setUp(self):
        self.model = generate_random_system(3, 5, 3, 2, 0.9)
        self.weights = LqgWeights.identity(3, 2)
        self.design = design_watermark(self.model, self.weights, 0.7)

    def test_rank_one_and_budget(self):
        singular_values = np.linalg.svd(self.design.U_star, compute_uv=False)
        self.assertLess(singular_values[1], 1e-10 * singular_values[0])
        budget = np.trace(self.design.U_star @ self.design.X_mat)
        self.assertAlmostEqual(budget, 0.7, delta=1e-8 * 0.7)

    def test_beats_every_direction(self):
        best = np.trace(self.design.U_star @ self.design.P_mat)
        for angle in np.linspace(0.0, np.pi, 721):
            z = np.array([np.cos(angle), np.sin(angle)])
            z *= np.sqrt(0.7 / (z @ self.design.X_mat @ z))
            self.assertLessEqual(z @ self.design.P_mat @ z, best * (1 + 1e-9))

    def test_largest_entry_is_positive(self):
        z = self.design.z
        self.assertGreater(z[np.argmax(np.abs(z))], 0.0)

    def test_isotropic_problem_uses_first_axis(self):
        optimum = optimal_watermark(np.eye(2), np.eye(2), 1.0)
        self.assertTrue(optimum.degenerate)
        np.testing.assert_allclose(optimum.U_star, [[1.0, 0.0], [0.0, 0.0]], atol=1e-12)

    def test_zero_objective_still_spends_budget(self):
        X = np.array([[2.0, 0.0], [0.0, 1.0]])
        optimum = optimal_watermark(np.zeros((2, 2)), X, 1.0)
        self.assertAlmostEqual(np.trace(optimum.U_star @ X), 1.0, places=12)
        self.assertEqual(optimum.lambda_max, 0.0)

    def test_zero_objective_picks_first_axis(self):
        X = np.array([[2.0, 1.0], [1.0, 2.0]])
        optimum = optimal_watermark(np.zeros((2, 2)), X, 3.0)
        np.testing.assert_allclose(optimum.U_star, [[1.5, 0.0], [0.0, 0.0]], atol=1e-12)

    def test_scaling_the_budget_scales_the_optimum(self):
        design = optimal_watermark(self.design.P_mat, self.design.X_mat, 0.7)
        for factor in (0.01, 3.0, 250.0):
            scaled = optimal_watermark(self.design.P_mat, self.design.X_mat, 0.7 * factor)
            np.testing.assert_allclose(scaled.U_star, factor * design.U_star, rtol=1e-10, atol=1e-14 * factor)
            self.assertAlmostEqual(scaled.lambda_max, design.lambda_max, places=12)

    def test_nonpositive_budget(self):
        with self.assertRaises(ValueError):
            optimal_watermark(np.eye(2), np.eye(2), 0.0)

    def test_indefinite_weight(self):
        with self.assertRaises(DegenerateCovarianceError):
            optimal_watermark(np.eye(2), np.diag([1.0, -1.0]), 1.0)


class RandomSystemDesignTests(SimpleTestCase):
    def test_optimum_over_random_systems(self):
        rng = np.random.default_rng(2024)
        for seed in range(100):
            n, m, p = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
            delta = float(rng.uniform(0.1, 10.0))
            model = generate_random_system(seed, n, m, p, 0.9)
            design = design_watermark(model, LqgWeights.identity(m, p), delta)
            with self.subTest(seed=seed, n=n, m=m, p=p):
                singular_values = np.linalg.svd(design.U_star, compute_uv=False)
                if p > 1:
                    self.assertLessEqual(singular_values[1], 1e-8 * singular_values[0])
                self.assertAlmostEqual(np.trace(design.U_star @ design.X_mat), delta, delta=1e-8 * delta)

                factors = rng.standard_normal((1000, p, p))
                candidates = np.einsum('kij,klj->kil', factors, factors)
                candidates *= (delta / np.einsum('kij,ji->k', candidates, design.X_mat))[:, None, None]
                objectives = np.einsum('kij,ji->k', candidates, design.P_mat)
                best = np.trace(design.U_star @ design.P_mat)
                self.assertLessEqual(objectives.max(), best * (1 + 1e-9))


class SeriesTests(SimpleTestCase):
    def setUp(self):
        self.model = generate_random_system(8, 4, 2, 2, 0.8)

    def test_design_matrix_matches_truncated_series(self):
        W = noise_output_cov(self.model)
        W_inv = np.linalg.inv(W)
        series = sum(
            markov_parameter(self.model, tau).T @ W_inv @ markov_parameter(self.model, tau)
            for tau in range(400)
        )
        np.testing.assert_allclose(build_P(self.model, W), series, rtol=1e-8, atol=1e-10)

    def test_output_covariance_matches_truncated_series(self):
        U = np.array([[1.0, 0.2], [0.2, 0.5]])
        series = sum(
            markov_parameter(self.model, tau) @ U @ markov_parameter(self.model, tau).T
            for tau in range(400)
        )
        np.testing.assert_allclose(watermark_output_cov(self.model, U), series, rtol=1e-8, atol=1e-10)

    def test_weight_matrix_includes_cross_terms(self):
        X = np.eye(4)
        X[0, 2] = X[2, 0] = 0.3
        weights = LqgWeights.from_matrix(X, 2)
        H0 = markov_parameter(self.model, 0)
        series = sum(
            markov_parameter(self.model, tau).T @ markov_parameter(self.model, tau)
            for tau in range(400)
        ) + H0.T @ weights.X_yphi + weights.X_phiy @ H0 + weights.X_phiphi
        np.testing.assert_allclose(build_X(self.model, weights), series, rtol=1e-8, atol=1e-10)

    def test_singular_noise_covariance(self):
        model = PlantModel(A=[[0.5]], B=[[1.0]], C=[[1.0], [2.0]], Q=[[1.0]], R=np.zeros((2, 2)))
        with self.assertRaisesMessage(DegenerateCovarianceError, "degenerate noise covariance"):
            noise_output_cov(model)


class BudgetAndKlTests(SimpleTestCase):
    def setUp(self):
        self.model = generate_random_system(5, 5, 3, 2, 0.9)
        self.weights = LqgWeights.identity(3, 2)

    def test_fractional_budget(self):
        delta = resolve_budget(self.model, self.weights, delta_frac=0.1)
        design = design_watermark(self.model, self.weights, delta)
        cost = lqg_cost(self.model, self.weights, design.U_star, design.W_cal)
        self.assertAlmostEqual(cost.delta_J, 0.1 * cost.J0, delta=1e-10 * max(1.0, cost.J0))

    def test_budget_needs_exactly_one_mode(self):
        with self.assertRaises(ValueError):
            resolve_budget(self.model, self.weights)
        with self.assertRaises(ValueError):
            resolve_budget(self.model, self.weights, delta=1.0, delta_frac=0.1)
        with self.assertRaises(ValueError):
            resolve_budget(self.model, self.weights, delta_frac=1.5)

    def test_kl_within_bounds(self):
        design = design_watermark(self.model, self.weights, 0.5)
        kl = expected_kl(design.U_cal, design.W_cal)
        lower, upper = kl_bounds(design.U_cal, design.W_cal)
        self.assertLessEqual(lower, kl + 1e-12)
        self.assertLessEqual(kl, upper + 1e-12)

    def test_kl_within_bounds_on_random_covariances(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            m = int(rng.integers(1, 6))
            rank = int(rng.integers(1, m + 1))
            root = rng.standard_normal((m, m))
            W = root @ root.T + 0.1 * np.eye(m)
            factor = rng.uniform(0.01, 5.0) * rng.standard_normal((m, rank))
            U_cal = factor @ factor.T
            kl = expected_kl(U_cal, W)
            lower, upper = kl_bounds(U_cal, W)
            slack = 1e-10 * max(1.0, upper)
            self.assertLessEqual(lower, kl + slack)
            self.assertLessEqual(kl, upper + slack)
            if rank == 1:
                self.assertAlmostEqual(kl, upper, delta=slack)

    def test_kl_of_zero_watermark(self):
        W = np.eye(2)
        self.assertEqual(expected_kl(np.zeros((2, 2)), W), 0.0)
        self.assertEqual(kl_bounds(np.zeros((2, 2)), W), (0.0, 0.0))


class LqgWeightsTests(SimpleTestCase):
    def test_blocks_of_assembled_matrix(self):
        X = np.diag([1.0, 2.0, 3.0])
        weights = LqgWeights.from_matrix(X, 2)
        self.assertEqual((weights.m, weights.p), (2, 1))
        np.testing.assert_array_equal(weights.X, X)

    def test_weight_must_be_positive_definite(self):
        with self.assertRaises(DegenerateCovarianceError):
            LqgWeights.from_matrix(np.diag([1.0, 0.0]), 1)
