import numpy as np
from django.test import SimpleTestCase

from plant_management.exceptions import ScheduleError
from plant_management.plant import PlantModel, SimState, markov_parameter, step
from plant_management.utils import generate_random_system
from watermark_design.design import LqgWeights, design_watermark, expected_kl

from .attack import ReplayChannel, ReplaySchedule
from .detector import DetectorContext, calibrate_threshold, decide, np_statistic, watermark_response
from .utils import covariance_two_sample_test


def batch_standard_error(samples, batches):
    means = np.asarray(samples).reshape(batches, -1).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(batches)


def white_noise_plant():
    """Outputs are i.i.d. N(0, 2 I) when no watermark is applied."""
    return PlantModel(A=np.zeros((2, 2)), B=np.eye(2), C=np.eye(2), Q=np.eye(2), R=np.eye(2))


class StatisticTests(SimpleTestCase):
    def test_scalar_statistic(self):
        ctx = DetectorContext.from_covariances(np.array([[1.0]]), np.array([[1.0]]))
        self.assertAlmostEqual(np_statistic([1.0], [1.0], ctx), -0.5)
        self.assertAlmostEqual(np_statistic([2.0], [0.0], ctx), 4.0 - 2.0)

    def test_threshold_is_inclusive(self):
        self.assertTrue(decide(1.0, 1.0))
        self.assertFalse(decide(0.999, 1.0))

    def test_threshold_must_be_finite(self):
        with self.assertRaises(ValueError):
            DetectorContext.from_covariances(np.eye(1), np.eye(1), eta=np.inf)

    def test_watermark_response_is_convolution(self):
        model = PlantModel(A=[[0.5, 0.1], [0.0, 0.2]], B=[[1.0], [1.0]], C=[[1.0, -1.0]],
                           Q=np.eye(2), R=np.eye(1))
        phis = [np.array([value]) for value in (1.0, -0.5, 2.0, 0.25)]
        expected = sum(markov_parameter(model, tau) @ phis[-1 - tau] for tau in range(len(phis)))
        np.testing.assert_allclose(watermark_response(model, phis), expected, atol=1e-12)

    def test_context_without_model_cannot_observe(self):
        ctx = DetectorContext.from_covariances(np.eye(1), np.eye(1))
        with self.assertRaises(ValueError):
            ctx.observe([0.0], [0.0])


class StatisticDistributionTests(SimpleTestCase):
    def test_residual_form_is_chi_square_without_attack(self):
        model = generate_random_system(3, 3, 2, 2, 0.8)
        design = design_watermark(model, LqgWeights.identity(2, 2), 1.0)
        ctx = DetectorContext.from_design(model, design)
        state = SimState.from_seed(model, 5)
        rng = np.random.default_rng(6)
        forms = np.empty(100000)
        for k in range(forms.size):
            phi = design.z * rng.standard_normal()
            residual = step(state, model, phi) - ctx.response.update(phi)
            forms[k] = residual @ ctx.W_inv @ residual
        self.assertLessEqual(abs(forms.mean() - 2.0), 3 * batch_standard_error(forms, 100))

    def test_replay_shifts_the_statistic_by_the_divergence(self):
        model = PlantModel.scalar(0.5)
        design = design_watermark(model, LqgWeights.identity(1, 1), 1.0)
        live, recorded = SimState.from_seed(model, 8), SimState.from_seed(model, 9)
        honest, attacked = DetectorContext.from_design(model, design), DetectorContext.from_design(model, design)
        rng, recorded_rng = np.random.default_rng(10), np.random.default_rng(11)
        gap = np.empty(40000)
        for k in range(gap.size):
            phi = design.z * rng.standard_normal()
            y_live = step(live, model, phi)
            y_recorded = step(recorded, model, design.z * recorded_rng.standard_normal())
            gap[k] = attacked.observe(y_recorded, phi) - honest.observe(y_live, phi)
        error = batch_standard_error(gap, 40)
        self.assertGreaterEqual(gap.mean(), 2 * expected_kl(design.U_cal, design.W_cal) - 3 * error)
        self.assertAlmostEqual(gap.mean(), 2 * np.trace(design.U_cal @ np.linalg.inv(design.W_cal)), delta=4 * error)


class CalibrationTests(SimpleTestCase):
    def setUp(self):
        self.model = PlantModel.scalar(0.5)
        self.design = design_watermark(self.model, LqgWeights.identity(1, 1), 1.0)

    def test_rate_must_be_a_probability(self):
        with self.assertRaises(ValueError):
            calibrate_threshold(self.model, self.design, 0.0, 1000)
        with self.assertRaises(ValueError):
            calibrate_threshold(self.model, self.design, 1.0, 1000)

    def test_needs_enough_samples(self):
        with self.assertRaises(ValueError):
            calibrate_threshold(self.model, self.design, 0.05, 999)

    def test_deterministic_given_seed(self):
        first = calibrate_threshold(self.model, self.design, 0.05, 2000, seed=4)
        second = calibrate_threshold(self.model, self.design, 0.05, 2000, seed=4)
        self.assertEqual(first, second)

    def test_empirical_false_alarm_rate(self):
        eta = calibrate_threshold(self.model, self.design, 0.05, 10000, seed=1)
        state = SimState.from_seed(self.model, 99)
        ctx = DetectorContext.from_design(self.model, self.design, eta=eta)
        rng = np.random.default_rng(7)
        factor = np.sqrt(self.design.U_star)
        alarms = 0
        for _ in range(20000):
            phi = factor @ rng.standard_normal(1)
            alarms += decide(ctx.observe(step(state, self.model, phi), phi), eta)
        self.assertAlmostEqual(alarms / 20000, 0.05, delta=0.015)


class ReplayScheduleTests(SimpleTestCase):
    def test_derived_quantities(self):
        schedule = ReplaySchedule.from_lengths(10001, 100, 10101)
        self.assertEqual(schedule.window, 99)
        self.assertEqual(schedule.delta_k, 100)
        self.assertEqual(schedule.replay_end, 10200)

    def test_replay_before_recording_completes(self):
        with self.assertRaises(ScheduleError):
            ReplaySchedule(record_start=10, window=5, replay_start=14)

    def test_window_at_least_one(self):
        with self.assertRaises(ScheduleError):
            ReplaySchedule(record_start=0, window=0, replay_start=5)

    def test_reference_window_precedes_recording(self):
        schedule = ReplaySchedule.from_lengths(10001, 100, 10101)
        self.assertEqual(schedule.reference_start, 9901)
        self.assertTrue(schedule.is_reference(9901))
        self.assertTrue(schedule.is_reference(10000))
        self.assertFalse(schedule.is_reference(9900))
        self.assertFalse(schedule.is_reference(10001))

    def test_reference_window_starts_at_zero(self):
        self.assertEqual(ReplaySchedule.from_lengths(30, 100, 200).reference_start, 0)


class ReplayChannelTests(SimpleTestCase):
    def test_passthrough_without_schedule(self):
        channel = ReplayChannel()
        np.testing.assert_array_equal(channel.transmit(0, [1.5]), [1.5])

    def test_outside_windows_is_passthrough(self):
        channel = ReplayChannel(ReplaySchedule(record_start=2, window=1, replay_start=5))
        np.testing.assert_array_equal(channel.transmit(0, [3.0]), [3.0])

    def test_replay_start_delivers_first_recording(self):
        channel = ReplayChannel(ReplaySchedule(record_start=2, window=2, replay_start=6))
        delivered = [channel.transmit(k, [float(k)])[0] for k in range(10)]
        self.assertEqual(delivered, [0, 1, 2, 3, 4, 5, 2, 3, 4, 9])

    def test_replay_protocol_window(self):
        schedule = ReplaySchedule.from_lengths(10001, 100, 10101)
        channel = ReplayChannel(schedule)
        rng = np.random.default_rng(0)
        recorded, replayed = [], []
        for k in range(10000, 10300):
            y = rng.standard_normal(3)
            delivered = channel.transmit(k, y)
            if schedule.is_recording(k):
                recorded.append(y.tobytes())
            if schedule.is_replaying(k):
                replayed.append(delivered.tobytes())
        self.assertEqual(len(recorded), 100)
        self.assertEqual(recorded, replayed)
        self.assertLessEqual(len(channel.buffer), schedule.window + 1)

    def test_steps_out_of_order(self):
        channel = ReplayChannel(ReplaySchedule(record_start=2, window=1, replay_start=5))
        channel.transmit(0, [0.0])
        with self.assertRaises(ScheduleError):
            channel.transmit(2, [0.0])


class StealthTests(SimpleTestCase):
    def test_replay_is_stealthy_without_watermark(self):
        model = white_noise_plant()
        schedule = ReplaySchedule.from_lengths(100, 100, 200)
        passed = 0
        for seed in range(40):
            channel = ReplayChannel(schedule)
            state = SimState.from_seed(model, seed)
            reference, replayed = [], []
            for k in range(schedule.replay_end + 1):
                delivered = channel.transmit(k, step(state, model, np.zeros(2)))
                if schedule.is_reference(k):
                    reference.append(delivered)
                if schedule.is_replaying(k):
                    replayed.append(delivered)
            self.assertEqual(len(replayed), 100)
            _, p_value = covariance_two_sample_test(np.array(reference), np.array(replayed))
            passed += p_value > 0.05
        self.assertGreaterEqual(passed, 34)

    def test_detects_different_covariances(self):
        rng = np.random.default_rng(3)
        _, p_value = covariance_two_sample_test(rng.standard_normal((500, 2)), 2.0 * rng.standard_normal((500, 2)))
        self.assertLess(p_value, 1e-6)

    def test_needs_more_samples_than_dimensions(self):
        with self.assertRaises(ValueError):
            covariance_two_sample_test(np.ones((2, 2)), np.ones((10, 2)))
