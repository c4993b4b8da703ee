import tempfile
from pathlib import Path
from unittest import mock, skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, tag

from plant_management.exceptions import ClusteredRootsError, IllConditionedFitError
from plant_management.plant import PlantModel, SimState, step
from plant_management.utils import generate_random_system
from replay_detection.detector import DetectorContext
from watermark_design.design import LqgWeights, design_watermark

from . import learner
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_from_document, state_to_document

slow_test = skipUnless(getattr(settings, 'WATERMARK_SLOW_TESTS', False), "set WATERMARK_SLOW_TESTS=True")


def geometric_bank(lambdas, omegas, size):
    """H_tau = sum_i lambda_i^tau Omega_i for tau < size."""
    lambdas = np.asarray(lambdas, dtype=complex)
    bank = np.einsum('ti,iab->tab', lambdas[None, :] ** np.arange(size)[:, None], np.asarray(omegas, dtype=complex))
    return bank.real


def run_steps(state, model, sim, steps, detector=None):
    """Drive a learner for ``steps`` steps; returns (g, g_hat) lists."""
    g, g_hat = [], []
    for _ in range(steps):
        phi = learner.next_watermark(state)
        y = step(sim, model, phi)
        if detector is not None:
            g.append(detector.observe(y, phi))
        g_hat.append(learner.observe(state, y).g_hat)
    return g, g_hat


class InitTests(SimpleTestCase):
    def test_initial_estimates(self):
        weights = LqgWeights.from_matrix(np.diag([1.0, 2.0, 3.0]), 1)
        state = learner.init(2, 1.0 / 3.0, 1.0, weights)
        np.testing.assert_array_equal(state.P_k, np.eye(2))
        np.testing.assert_array_equal(state.X_k, np.diag([2.0, 3.0]))
        self.assertEqual(state.k, 0)
        self.assertEqual(state.H_bank.shape, (5, 1, 2))
        np.testing.assert_array_equal(state.H_bank, 0.0)

    def test_isotropic_start_uses_first_axis(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 2))
        np.testing.assert_allclose(state.U_star, [[1.0, 0.0], [0.0, 0.0]], atol=1e-12)

    def test_first_covariance_adds_full_exploration(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 2), rng=np.random.default_rng(0))
        learner.next_watermark(state)
        np.testing.assert_allclose(state.U_k, state.U_star + np.eye(2))

    def test_decay_exponent_range(self):
        weights = LqgWeights.identity(1, 1)
        for beta in (-0.1, 0.0, 1.0):
            with self.assertRaises(ValueError):
                learner.init(1, beta, 1.0, weights)

    def test_constant_exploration_needs_opt_in(self):
        state = learner.init(1, 0.0, 1.0, LqgWeights.identity(1, 1), allow_constant_exploration=True)
        state.k = 50
        self.assertEqual(state.exploration(), 1.0)

    def test_invalid_budget_and_order(self):
        weights = LqgWeights.identity(1, 1)
        with self.assertRaises(ValueError):
            learner.init(1, 0.3, 0.0, weights)
        with self.assertRaises(ValueError):
            learner.init(0, 0.3, 1.0, weights)


class WatermarkDrawTests(SimpleTestCase):
    def test_decayed_exploration(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 2), rng=np.random.default_rng(5))
        state.U_star = np.zeros((2, 2))
        state.k = 7
        phi = learner.next_watermark(state)
        np.testing.assert_allclose(state.U_k, 0.5 * np.eye(2), atol=1e-12)
        zeta = np.random.default_rng(5).standard_normal(2)
        np.testing.assert_allclose(phi, zeta / np.sqrt(2.0), atol=1e-12)

    def test_sample_covariance(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 2), rng=np.random.default_rng(8))
        state.U_star = np.array([[1.0, 0.4], [0.4, 0.5]])
        state.k = 10
        draws = np.array([learner.next_watermark(state) for _ in range(100000)])
        U_k = state.U_k
        error = np.linalg.norm(np.cov(draws, rowvar=False) - U_k) / np.linalg.norm(U_k)
        self.assertLess(error, 0.05)


class MarkovEstimateTests(SimpleTestCase):
    def test_first_step_is_single_sample(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(2, 2), rng=np.random.default_rng(1))
        phi = learner.next_watermark(state)
        y = np.array([0.3, -1.2])
        learner.update_markov(state, y, phi)
        np.testing.assert_allclose(state.H_bank[0], np.outer(y, phi) @ np.linalg.inv(state.U_k), atol=1e-12)
        np.testing.assert_array_equal(state.H_bank[1:], 0.0)

    def test_noiseless_scalar_identification(self):
        model = PlantModel(A=[[0.5]], B=[[1.0]], C=[[1.0]], Q=[[0.0]], R=[[0.0]])
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 1), rng=np.random.default_rng(2))
        sim = SimState.from_seed(model, 3)
        run_steps(state, model, sim, 10000)
        for tau in range(2):
            self.assertAlmostEqual(state.H_bank[tau, 0, 0], 0.5 ** tau, delta=0.05)
        self.assertAlmostEqual(state.lambdas[0].real, 0.5, delta=0.05)


class PolynomialFitTests(SimpleTestCase):
    def test_single_mode(self):
        bank = geometric_bank([0.5], [[[1.0]]], 2)
        fit = learner.fit_minimal_polynomial(bank, 1)
        np.testing.assert_allclose(fit.alpha, [-0.5], atol=1e-12)

    def test_two_modes(self):
        bank = geometric_bank([0.5, -0.25], [[[1.0]], [[2.0]]], 5)
        fit = learner.fit_minimal_polynomial(bank, 2)
        np.testing.assert_allclose(fit.alpha, [-0.125, -0.25], atol=1e-10)

    def test_zero_bank_is_ill_conditioned(self):
        with self.assertRaises(IllConditionedFitError):
            learner.fit_minimal_polynomial(np.zeros((5, 2, 2)), 2)


class RootTests(SimpleTestCase):
    def test_stable_roots(self):
        roots = learner.roots_and_stability([-0.125, -0.25])
        np.testing.assert_allclose(np.sort(roots.lambdas.real), [-0.25, 0.5], atol=1e-12)
        self.assertTrue(roots.schur_stable)

    def test_root_outside_unit_circle(self):
        roots = learner.roots_and_stability([-1.21, 0.0])
        self.assertAlmostEqual(np.max(np.abs(roots.lambdas)), 1.1)
        self.assertFalse(roots.schur_stable)

    def test_zero_polynomial(self):
        roots = learner.roots_and_stability([0.0, 0.0, 0.0])
        np.testing.assert_allclose(roots.lambdas, 0.0)
        self.assertTrue(roots.schur_stable)


class ModeRecoveryTests(SimpleTestCase):
    def test_exact_real_modes(self):
        bank = geometric_bank([0.5, -0.25], [[[1.0]], [[2.0]]], 5)
        lambdas, omegas = learner.recover_modes(bank, [0.5, -0.25])
        np.testing.assert_allclose(omegas[:, 0, 0], [1.0, 2.0], atol=1e-10)
        np.testing.assert_allclose(lambdas, [0.5, -0.25])

    def test_single_zero_root_gives_first_parameter(self):
        bank = np.array([[[0.7, -0.2]], [[0.0, 0.0]]])
        _, omegas = learner.recover_modes(bank, [0.0])
        np.testing.assert_allclose(omegas[0], bank[0], atol=1e-12)

    def test_complex_pair(self):
        lam = 0.5 * np.exp(1j * np.pi / 4)
        omega = np.array([[1.0 + 0.5j]])
        bank = geometric_bank([lam, np.conj(lam)], [omega, np.conj(omega)], 5)
        lambdas, omegas = learner.recover_modes(bank, [lam, np.conj(lam)])
        np.testing.assert_allclose(omegas[0], np.conj(omegas[1]), atol=1e-12)
        for tau in range(8):
            series = np.einsum('i,iab->ab', lambdas ** tau, omegas)
            self.assertLess(abs(series.imag).max(), 1e-12)

    def test_four_modes_with_complex_pair(self):
        rng = np.random.default_rng(12)
        lambdas = np.array([0.8, -0.5, 0.6j, -0.6j])
        residue = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        omegas = np.concatenate([rng.standard_normal((2, 2, 2)), residue[None], np.conj(residue)[None]])
        bank = geometric_bank(lambdas, omegas, 11)

        roots = learner.roots_and_stability(learner.fit_minimal_polynomial(bank, 4).alpha)
        self.assertTrue(roots.schur_stable)
        estimated, residues = learner.recover_modes(bank, roots.lambdas)
        for value, omega in zip(lambdas, omegas):
            match = np.argmin(np.abs(estimated - value))
            self.assertLess(abs(estimated[match] - value), 1e-8)
            np.testing.assert_allclose(residues[match], omega, atol=1e-8)

    def test_clustered_roots(self):
        with self.assertRaises(ClusteredRootsError):
            learner.recover_modes(np.zeros((5, 1, 1)), [0.5, 0.5 + 1e-12])


class DesignEstimateTests(SimpleTestCase):
    def scalar_state(self, omega):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 1))
        state.lambdas = np.array([0.5 + 0.0j])
        state.omegas = np.array([[[omega]]], dtype=complex)
        state.W_cal = np.array([[7.0 / 3.0]])
        return state

    def test_scalar_estimates(self):
        state = self.scalar_state(1.0)
        self.assertTrue(learner.update_design_estimates(state))
        self.assertAlmostEqual(state.P_k[0, 0], 4.0 / 7.0, places=12)
        self.assertAlmostEqual(state.X_k[0, 0], 7.0 / 3.0, places=12)

    def test_zero_residues(self):
        state = self.scalar_state(0.0)
        learner.update_design_estimates(state)
        self.assertEqual(state.P_k[0, 0], 0.0)
        self.assertEqual(state.X_k[0, 0], 1.0)

    def test_products_near_unit_circle_keep_previous(self):
        state = self.scalar_state(1.0)
        state.lambdas = np.array([1.0 - 1e-12 + 0.0j])
        self.assertFalse(learner.update_design_estimates(state))
        np.testing.assert_array_equal(state.P_k, np.eye(1))

    def test_scalar_optimum(self):
        state = self.scalar_state(1.0)
        learner.update_design_estimates(state)
        learner.update_optimum(state)
        self.assertAlmostEqual(state.U_star[0, 0], 3.0 / 7.0, places=12)

    def test_statistic_with_matching_covariances(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 1))
        state.fitted = True
        state.lambdas = np.zeros(1, dtype=complex)
        state.omegas = np.ones((1, 1, 1), dtype=complex)
        state.U_star = np.array([[2.0]])
        state.W_cal = np.array([[2.0]])
        state.phi_hat = np.array([3.0])
        self.assertAlmostEqual(learner.estimate_np_statistic(state, np.array([3.0])), -9.0 / 4.0, places=12)

    def test_statistic_before_first_fit(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 1))
        state.W_cal = np.array([[4.0]])
        state.phi_hat = np.array([1.0])
        self.assertAlmostEqual(learner.estimate_np_statistic(state, np.array([3.0])), 1.0, places=12)


class SeededLearnerTests(SimpleTestCase):
    def test_design_matrices_match_offline_design(self):
        for seed in range(5):
            model = generate_random_system(seed, 4, 2, 2, 0.9)
            weights = LqgWeights.identity(2, 2)
            design = design_watermark(model, weights, 0.5)
            state = learner.seed_learner_with_truth(model, weights, 0.5)
            self.assertTrue(learner.update_design_estimates(state))
            np.testing.assert_allclose(state.P_k, design.P_mat, rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(state.X_k, design.X_mat, rtol=1e-8, atol=1e-10)

    def test_statistic_equals_detector(self):
        for seed in range(5):
            model = generate_random_system(seed, 4, 3, 2, 0.9)
            weights = LqgWeights.identity(3, 2)
            design = design_watermark(model, weights, 0.5)
            state = learner.seed_learner_with_truth(model, weights, 0.5, rng=np.random.default_rng(seed))
            detector = DetectorContext.from_design(model, design)
            g, g_hat = run_steps(state, model, SimState.from_seed(model, seed), 300, detector)
            np.testing.assert_allclose(g_hat, g, rtol=0.0, atol=1e-10 * max(1.0, np.abs(g).max()))

    def test_scalar_optimum_at_truth(self):
        state = learner.seed_learner_with_truth(PlantModel.scalar(0.5), LqgWeights.identity(1, 1), 2.0)
        self.assertAlmostEqual(state.U_star[0, 0], 6.0 / 7.0, places=10)

    @tag('slow')
    @slow_test
    def test_statistic_equals_detector_on_many_systems(self):
        for seed in range(20):
            n = 2 + seed % 5
            model = generate_random_system(100 + seed, n, 2, 2, 0.9)
            weights = LqgWeights.identity(2, 2)
            design = design_watermark(model, weights, 0.5)
            state = learner.seed_learner_with_truth(model, weights, 0.5, rng=np.random.default_rng(seed))
            detector = DetectorContext.from_design(model, design)
            g, g_hat = run_steps(state, model, SimState.from_seed(model, seed), 1000, detector)
            np.testing.assert_allclose(g_hat, g, rtol=0.0, atol=1e-10 * max(1.0, np.abs(g).max()))


class OnlineRunTests(SimpleTestCase):
    def setUp(self):
        self.model = generate_random_system(11, 3, 2, 2, 0.8)
        self.weights = LqgWeights.identity(2, 2)
        self.state = learner.init(3, 1.0 / 3.0, 0.5, self.weights, rng=np.random.default_rng(4))
        self.sim = SimState.from_seed(self.model, 4)

    def test_covariance_bounds_and_budget(self):
        upper = 0.5 * (np.linalg.inv(self.weights.schur_complement()) + np.eye(2))
        for _ in range(300):
            learner.next_watermark(self.state)
            eigenvalues = np.linalg.eigvalsh(self.state.U_k)
            self.assertGreaterEqual(eigenvalues[0], self.state.exploration() - 1e-10)
            self.assertLessEqual(eigenvalues[-1], np.linalg.eigvalsh(upper)[-1] + 1e-10)
            learner.observe(self.state, step(self.sim, self.model, self.state.last_phi))
            budget = np.trace(self.state.U_star @ self.state.X_k)
            self.assertAlmostEqual(budget, 0.5, delta=1e-8 * 0.5)

    def test_accepted_fits_are_conjugate_closed(self):
        accepted = 0
        for _ in range(1500):
            learner.next_watermark(self.state)
            result = learner.observe(self.state, step(self.sim, self.model, self.state.last_phi))
            if result.gate:
                accepted += 1
                lambdas = self.state.lambdas
                for value in lambdas:
                    self.assertLess(np.min(np.abs(lambdas - np.conj(value))), 1e-9)
                np.testing.assert_allclose(self.state.P_k, self.state.P_k.T)
        self.assertGreater(accepted, 0)

    def test_observe_needs_a_watermark(self):
        with self.assertRaises(ValueError):
            learner.observe(self.state, np.zeros(2))

    def test_rejected_fit_keeps_estimates(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 1), rng=np.random.default_rng(0))
        state.k = 1000
        state.H_bank = np.array([[[1e6]], [[1.1e6]]])
        P_before = state.P_k.copy()
        learner.next_watermark(state)
        result = learner.observe(state, np.array([0.1]))
        self.assertFalse(result.gate)
        self.assertFalse(state.last_valid)
        self.assertEqual(state.gate_failures, 1)
        np.testing.assert_array_equal(state.P_k, P_before)

    def test_rejected_design_estimates_keep_previous_modes(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 1), rng=np.random.default_rng(0))
        state.k = 1000
        state.H_bank = geometric_bank([0.5], [[[1.0]]], 2)
        state.W_acc = np.full((1, 1), 1000.0)
        state.W_cal = np.ones((1, 1))
        learner.next_watermark(state)
        with mock.patch.object(learner, 'update_design_estimates', return_value=False):
            result = learner.observe(state, np.array([0.1]))
        self.assertFalse(result.gate)
        self.assertTrue(state.last_valid)
        self.assertFalse(state.fitted)
        self.assertEqual(state.gate_failures, 1)
        np.testing.assert_array_equal(state.lambdas, np.zeros(1))
        np.testing.assert_array_equal(result.phi_hat, np.zeros(1))
        self.assertAlmostEqual(state.W_cal[0, 0], 1000.01 / 1001, places=12)

    def test_accepted_fit_commits_modes(self):
        state = learner.init(1, 1.0 / 3.0, 1.0, LqgWeights.identity(1, 1), rng=np.random.default_rng(0))
        state.k = 1000
        state.H_bank = geometric_bank([0.5], [[[1.0]]], 2)
        learner.next_watermark(state)
        result = learner.observe(state, np.array([0.1]))
        self.assertTrue(result.gate)
        self.assertTrue(state.fitted)
        self.assertAlmostEqual(state.lambdas[0].real, 0.5, delta=1e-2)

    @tag('slow')
    @slow_test
    def test_statistic_tracks_detector(self):
        model = generate_random_system(0, 5, 3, 2, 0.9)
        weights = LqgWeights.identity(3, 2)
        design = design_watermark(model, weights, 0.5)
        state = learner.init(5, 1.0 / 3.0, 0.5, weights, rng=np.random.default_rng(1))
        detector = DetectorContext.from_design(model, design)
        g, g_hat = run_steps(state, model, SimState.from_seed(model, 1), 11000, detector)
        g, g_hat = np.array(g[10000:]), np.array(g_hat[10000:])
        self.assertLess(np.sqrt(np.mean((g_hat - g) ** 2)) / np.std(g), 0.1)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.model = generate_random_system(6, 3, 2, 2, 0.8)
        self.state = learner.init(3, 1.0 / 3.0, 0.5, LqgWeights.identity(2, 2), rng=np.random.default_rng(3))
        self.sim = SimState.from_seed(self.model, 3)
        run_steps(self.state, self.model, self.sim, 60)

    def test_resumed_run_continues_identically(self):
        with tempfile.TemporaryDirectory() as directory:
            path = save_checkpoint(self.state, Path(directory) / 'learner.json')
            resumed = load_checkpoint(path)
        sim_copy = SimState(
            x=self.sim.x.copy(),
            process_rng=np.random.default_rng(10),
            measurement_rng=np.random.default_rng(11),
        )
        self.sim.process_rng, self.sim.measurement_rng = np.random.default_rng(10), np.random.default_rng(11)
        _, original = run_steps(self.state, self.model, self.sim, 20)
        _, continued = run_steps(resumed, self.model, sim_copy, 20)
        self.assertEqual(resumed.k, self.state.k)
        np.testing.assert_array_equal(continued, original)

    def test_unknown_version(self):
        document = state_to_document(self.state)
        document['version'] = 99
        with self.assertRaisesMessage(CheckpointError, "version"):
            state_from_document(document)

    def test_checkpoint_between_draw_and_observe(self):
        learner.next_watermark(self.state)
        with self.assertRaises(CheckpointError):
            state_to_document(self.state)
