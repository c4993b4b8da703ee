import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy import linalg

from .exceptions import (
    DimensionMismatchError,
    ModelInvariantError,
    UnstableClosedLoopError,
    UnstableSystemError,
)
from .plant import (
    PlantModel,
    SimState,
    closed_loop_augment,
    lyapunov_solve,
    markov_parameter,
    modal_decomposition,
    step,
)
from .utils import (
    dump_model_file,
    generate_random_system,
    load_model_file,
    model_to_document,
    parse_model_document,
)


def two_state_plant():
    return PlantModel(
        A=[[0.5, 0.2], [0.0, -0.3]],
        B=[[1.0], [0.5]],
        C=[[1.0, 0.0], [0.0, 1.0]],
        Q=np.eye(2),
        R=0.5 * np.eye(2),
    )


class LyapunovTests(SimpleTestCase):
    def test_scalar_closed_form(self):
        sigma = lyapunov_solve(np.array([[0.5]]), np.array([[1.0]]))
        self.assertAlmostEqual(sigma[0, 0], 4.0 / 3.0, places=12)

    def test_matches_scipy_solver(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            A = rng.standard_normal((4, 4))
            A *= 0.8 / np.max(np.abs(np.linalg.eigvals(A)))
            F = rng.standard_normal((4, 4))
            Q = F @ F.T
            expected = linalg.solve_discrete_lyapunov(A, Q)
            np.testing.assert_allclose(lyapunov_solve(A, Q), expected, rtol=1e-9, atol=1e-10)

    def test_zero_matrix_returns_q(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(lyapunov_solve(np.zeros((2, 2)), Q), Q)

    def test_unstable_matrix_is_rejected(self):
        with self.assertRaisesMessage(UnstableSystemError, "unstable system"):
            lyapunov_solve(np.array([[1.0]]), np.array([[1.0]]))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            lyapunov_solve(np.eye(2), np.eye(3))


class PlantModelTests(SimpleTestCase):
    def test_dimensions(self):
        model = two_state_plant()
        self.assertEqual((model.n, model.m, model.p), (2, 2, 1))

    def test_arrays_are_read_only(self):
        model = two_state_plant()
        with self.assertRaises(ValueError):
            model.A[0, 0] = 2.0

    def test_shape_mismatch_is_rejected(self):
        with self.assertRaises(DimensionMismatchError):
            PlantModel(A=np.eye(2), B=np.ones((3, 1)), C=np.eye(2), Q=np.eye(2), R=np.eye(2))

    def test_validate_accepts_scalar_example(self):
        self.assertIsNotNone(PlantModel.scalar(0.5).validate())

    def test_validate_rejects_unstable(self):
        with self.assertRaisesMessage(ModelInvariantError, "stable"):
            PlantModel.scalar(1.2).validate()

    def test_validate_rejects_unobservable(self):
        model = PlantModel(
            A=np.diag([0.5, 0.3]), B=np.ones((2, 1)), C=[[1.0, 0.0]], Q=np.eye(2), R=np.eye(1),
        )
        with self.assertRaisesMessage(ModelInvariantError, "observable"):
            model.validate()

    def test_validate_rejects_uncontrollable(self):
        model = PlantModel(
            A=np.diag([0.5, 0.3]), B=[[1.0], [0.0]], C=[[1.0, 1.0]], Q=np.eye(2), R=np.eye(1),
        )
        with self.assertRaisesMessage(ModelInvariantError, "controllable"):
            model.validate()

    def test_validate_rejects_indefinite_noise(self):
        model = PlantModel.scalar(0.5, q=-1.0)
        with self.assertRaisesMessage(ModelInvariantError, "Q"):
            model.validate()

    def test_markov_parameters(self):
        model = PlantModel.scalar(0.5)
        self.assertAlmostEqual(markov_parameter(model, 0)[0, 0], 1.0)
        self.assertAlmostEqual(markov_parameter(model, 3)[0, 0], 0.125)


class SimulationTests(SimpleTestCase):
    def test_same_seed_same_outputs(self):
        model = two_state_plant()
        first, second = SimState.from_seed(model, 11), SimState.from_seed(model, 11)
        for _ in range(20):
            np.testing.assert_array_equal(step(first, model, [0.3]), step(second, model, [0.3]))

    def test_noiseless_response_is_markov_convolution(self):
        model = PlantModel(
            A=[[0.5, 0.2], [0.0, -0.3]], B=[[1.0], [0.5]], C=[[1.0, 0.0], [0.0, 1.0]],
            Q=np.zeros((2, 2)), R=np.zeros((2, 2)),
        )
        state = SimState(x=np.zeros(2), process_rng=np.random.default_rng(0),
                         measurement_rng=np.random.default_rng(1))
        phis = [np.array([1.0]), np.array([-2.0]), np.array([0.5])]
        outputs = [step(state, model, phi) for phi in phis]
        expected = sum(markov_parameter(model, tau) @ phis[2 - tau] for tau in range(3))
        np.testing.assert_allclose(outputs[-1], expected, atol=1e-12)

    def test_wrong_watermark_dimension(self):
        model = two_state_plant()
        state = SimState.from_seed(model, 0)
        with self.assertRaises(DimensionMismatchError):
            step(state, model, [1.0, 2.0])

    def test_stationary_output_covariance(self):
        model = PlantModel.scalar(0.5)
        state = SimState.from_seed(model, 5)
        outputs = np.array([step(state, model, [0.0])[0] for _ in range(20000)])
        self.assertAlmostEqual(np.var(outputs), 7.0 / 3.0, delta=0.15)


class ClosedLoopTests(SimpleTestCase):
    def test_augmented_dimensions(self):
        model = two_state_plant()
        augmented = closed_loop_augment(model, K=0.1 * np.ones((2, 2)), L=np.zeros((1, 2)))
        self.assertEqual((augmented.n, augmented.m, augmented.p), (4, 3, 1))
        np.testing.assert_allclose(augmented.R[2:, 2:], 0.0)
        np.testing.assert_allclose(augmented.Q, augmented.Q.T)

    def test_scalar_estimator_feedback(self):
        augmented = closed_loop_augment(PlantModel.scalar(0.5), K=[[0.5]], L=[[0.0]])
        np.testing.assert_allclose(augmented.A, [[0.5, 0.0], [0.25, 0.25]])
        np.testing.assert_allclose(augmented.B, [[1.0], [0.5]])
        np.testing.assert_allclose(augmented.C, [[1.0, 0.0], [0.0, 0.0]])

    def test_zero_gains_embed_the_plant_twice(self):
        model = two_state_plant()
        augmented = closed_loop_augment(model, K=np.zeros((2, 2)), L=np.zeros((1, 2)))
        np.testing.assert_allclose(augmented.A, linalg.block_diag(model.A, model.A))
        np.testing.assert_allclose(augmented.B, np.vstack([model.B, np.zeros((2, 1))]))
        np.testing.assert_allclose(augmented.C[:2], np.hstack([model.C, np.zeros((2, 2))]))
        np.testing.assert_allclose(augmented.C[2:], 0.0)
        np.testing.assert_allclose(augmented.Q, linalg.block_diag(model.Q, np.zeros((2, 2))))
        for tau in range(4):
            np.testing.assert_allclose(markov_parameter(augmented, tau)[:2], markov_parameter(model, tau), atol=1e-12)

    def test_unstable_feedback_is_rejected(self):
        model = PlantModel.scalar(0.5)
        with self.assertRaisesMessage(UnstableClosedLoopError, "unstable closed loop"):
            closed_loop_augment(model, K=[[1.0]], L=[[5.0]])


class ModalDecompositionTests(SimpleTestCase):
    def test_reproduces_markov_parameters(self):
        model = generate_random_system(4, 4, 2, 2, 0.9)
        lambdas, omegas = modal_decomposition(model)
        for tau in range(6):
            series = np.einsum('i,iab->ab', lambdas ** tau, omegas)
            np.testing.assert_allclose(series.imag, 0.0, atol=1e-10)
            np.testing.assert_allclose(series.real, markov_parameter(model, tau), atol=1e-9)

    def test_complex_pair_is_conjugate(self):
        angle = np.pi / 4
        rotation = 0.5 * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        model = PlantModel(A=rotation, B=[[1.0], [0.0]], C=[[1.0, 1.0]], Q=np.eye(2), R=np.eye(1))
        lambdas, omegas = modal_decomposition(model)
        self.assertAlmostEqual(lambdas[0], np.conj(lambdas[1]))
        np.testing.assert_allclose(omegas[0], np.conj(omegas[1]))


class RandomSystemTests(SimpleTestCase):
    def test_same_seed_same_system(self):
        first = generate_random_system(7, 5, 3, 2, 0.9)
        second = generate_random_system(7, 5, 3, 2, 0.9)
        for name in ('A', 'B', 'C', 'Q', 'R'):
            np.testing.assert_array_equal(getattr(first, name), getattr(second, name))

    def test_spectral_radius_is_target(self):
        model = generate_random_system(1, 5, 3, 2, 0.9)
        self.assertAlmostEqual(np.max(np.abs(np.linalg.eigvals(model.A))), 0.9, places=10)

    def test_generated_system_is_valid(self):
        model = generate_random_system(2, 5, 3, 2, 0.9)
        model.validate()
        np.testing.assert_array_equal(model.Q, np.eye(5))
        np.testing.assert_array_equal(model.R, np.eye(3))

    def test_target_outside_unit_interval(self):
        with self.assertRaises(ValueError):
            generate_random_system(0, 3, 1, 1, 1.0)


class ModelFileTests(SimpleTestCase):
    def test_file_round_trip(self):
        model = two_state_plant()
        with tempfile.TemporaryDirectory() as directory:
            path = dump_model_file(model, Path(directory) / 'plant.json')
            loaded, weights = load_model_file(path)
        self.assertIsNone(weights)
        np.testing.assert_array_equal(loaded.A, model.A)
        np.testing.assert_array_equal(loaded.R, model.R)

    def test_optional_weight_matrix(self):
        document = model_to_document(PlantModel.scalar(0.5))
        document['X'] = [[2.0, 0.0], [0.0, 1.0]]
        _, weights = parse_model_document(document)
        self.assertEqual(weights.X_yy[0, 0], 2.0)

    def test_wrong_shape_names_the_matrix(self):
        document = model_to_document(two_state_plant())
        document['C'] = [[1.0, 0.0]]
        with self.assertRaisesMessage(ModelInvariantError, "C"):
            parse_model_document(document)

    def test_non_finite_entry_is_rejected(self):
        document = model_to_document(PlantModel.scalar(0.5))
        document['A'] = [["nan"]]
        with self.assertRaises(ModelInvariantError):
            parse_model_document(document)

    def test_unstable_model_file(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'plant.json'
            path.write_text(json.dumps(model_to_document(PlantModel.scalar(1.5))))
            with self.assertRaisesMessage(ModelInvariantError, "stable"):
                load_model_file(path)

    def test_invalid_json(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'plant.json'
            path.write_text("{not json")
            with self.assertRaises(ModelInvariantError):
                load_model_file(path)
