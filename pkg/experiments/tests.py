import json
import math
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock, skipUnless

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings, tag
from django.urls import reverse
from rest_framework import status
from rest_framework.test import APIClient

from online_learning.checkpoint import load_checkpoint
from plant_management.exceptions import TraceParseError
from plant_management.plant import PlantModel
from plant_management.utils import dump_model_file

from .metrics import (
    TRACE_COLUMNS,
    TraceRecord,
    evaluate_path,
    evaluate_trace,
    json_safe,
    loglog_slope,
    merge_summaries,
    read_trace,
)
from .management.commands.watermark import ATTACK_DEMO_DEFAULTS
from .models import ExperimentRun
from .runner import ConfigError, ExperimentConfig, run_offline_design, run_online_experiment, stealth_report
from .tasks import run_experiment_task

slow_test = skipUnless(getattr(settings, 'WATERMARK_SLOW_TESTS', False), "set WATERMARK_SLOW_TESTS=True")


def write_trace(path, records):
    lines = [','.join(TRACE_COLUMNS)] + [','.join(TraceRecord(*record).to_row()) for record in records]
    path.write_text('\n'.join(lines) + '\n')
    return path


def small_run_options(directory, **overrides):
    options = dict(
        random=True, n=2, m=1, p=1, rho=0.7, steps=60,
        calibration_samples=1000, burn_in=10, slope_start=10, out=str(directory),
    )
    options.update(overrides)
    return options


class TraceParsingTests(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def test_reads_columns(self):
        path = write_trace(self.root / 'trace.csv', [(0, 1.0, 0.5, 0, 0.2, 1.0, 0), (1, -1.0, -0.5, 1, 0.1, 1.0, 1)])
        trace = read_trace(path)
        np.testing.assert_array_equal(trace['k'], [0, 1])
        np.testing.assert_array_equal(trace['g_hat'], [0.5, -0.5])
        self.assertEqual(trace['gate'].dtype.kind, 'i')

    def test_empty_file(self):
        path = self.root / 'trace.csv'
        path.write_text('')
        with self.assertRaisesMessage(TraceParseError, "empty trace file"):
            read_trace(path)

    def test_bad_field_reports_line(self):
        path = write_trace(self.root / 'trace.csv', [(0, 1.0, 0.5, 0, 0.2, 1.0, 0)])
        with path.open('a') as handle:
            handle.write('1,abc,0.5,0,0.2,1.0,0\n')
        with self.assertRaises(TraceParseError) as context:
            read_trace(path)
        self.assertEqual(context.exception.line_number, 3)

    def test_wrong_header(self):
        path = self.root / 'trace.csv'
        path.write_text('k,g\n0,1.0\n')
        with self.assertRaises(TraceParseError) as context:
            read_trace(path)
        self.assertEqual(context.exception.line_number, 1)

    def test_steps_must_be_consecutive(self):
        path = write_trace(self.root / 'trace.csv', [(0, 1.0, 0.5, 0, 0.2, 1.0, 0), (2, 1.0, 0.5, 0, 0.2, 1.0, 0)])
        with self.assertRaises(TraceParseError):
            read_trace(path)

    def test_header_only_trace(self):
        path = write_trace(self.root / 'trace.csv', [])
        summary = evaluate_trace(path, {'nbar': 1})
        self.assertEqual(summary['steps'], 0)
        self.assertTrue(math.isnan(summary['final_rel_err_U']))
        self.assertTrue(math.isnan(summary['detection_power']))


class MetricTests(SimpleTestCase):
    def test_slope_of_power_law(self):
        k = np.arange(1, 5001)
        self.assertAlmostEqual(loglog_slope(k, 3.0 * k ** -0.5, start=100), -0.5, places=10)

    def test_slope_needs_two_points(self):
        self.assertTrue(math.isnan(loglog_slope([1, 2], [0.0, 0.0])))

    def test_attack_windows(self):
        records = []
        for k in range(20):
            attacked = 12 <= k <= 14
            records.append((k, 5.0 if attacked else 0.0, 4.0 if attacked else 0.1, int(attacked), 0.1, 1.0, 0))
        with tempfile.TemporaryDirectory() as directory:
            path = write_trace(Path(directory) / 'trace.csv', records)
            summary = evaluate_trace(path, {
                'threshold': 1.0, 'burn_in': 2, 'nbar': 1,
                'schedule': {'record_start': 8, 'window': 2, 'replay_start': 12},
            })
        self.assertEqual(summary['detection_power'], 1.0)
        self.assertEqual(summary['false_alarm_rate'], 0.0)
        self.assertEqual(summary['oracle_detection_power'], 1.0)
        self.assertAlmostEqual(summary['mean_g_hat_replay'], 4.0)

    def test_merge(self):
        aggregate = merge_summaries([
            {'loglog_slope': -0.4, 'final_rel_err_U': 0.1, 'detection_power': 1.0, 'false_alarm_rate': 0.0},
            {'loglog_slope': 0.0, 'final_rel_err_U': 0.3, 'detection_power': math.nan, 'false_alarm_rate': 0.1},
        ])
        self.assertEqual(aggregate['runs'], 2)
        self.assertEqual(aggregate['runs_with_decay'], 1)
        self.assertAlmostEqual(aggregate['median_final_rel_err_U'], 0.2)
        self.assertEqual(aggregate['mean_detection_power'], 1.0)

    def test_json_safe(self):
        self.assertEqual(json_safe({'a': [math.nan, 1.0], 'b': math.inf}), {'a': [None, 1.0], 'b': None})


class OfflineDesignRunTests(SimpleTestCase):
    def test_scalar_report(self):
        with tempfile.TemporaryDirectory() as directory:
            model_path = dump_model_file(PlantModel.scalar(0.5), Path(directory) / 'plant.json')
            config = ExperimentConfig.from_options(kind='design', model_path=str(model_path), delta=1.0, out=directory)
            report = run_offline_design(config)
            self.assertTrue((Path(directory) / 'design.json').exists())
        self.assertAlmostEqual(report['U_star'][0][0], 3.0 / 7.0, places=10)
        self.assertAlmostEqual(report['J0'], 7.0 / 3.0, places=10)
        self.assertAlmostEqual(report['delta_J'], 1.0, places=8)

    def test_model_source_is_required(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_options(kind='design', delta=1.0)

    def test_invalid_decay_exponent(self):
        with self.assertRaisesMessage(ConfigError, "beta"):
            ExperimentConfig.from_options(random=True, beta=1.5)

    def test_attack_needs_schedule(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_options(kind='attack-demo', random=True)

    def test_default_budget_fraction(self):
        report = run_offline_design(ExperimentConfig.from_options(kind='design', random=True))
        self.assertAlmostEqual(report['delta'] / report['J0'], 0.1, places=10)

    def test_large_plant_defaults_to_smaller_budget(self):
        report = run_offline_design(ExperimentConfig.from_options(kind='design', random=True, n=8, m=10, p=4))
        self.assertAlmostEqual(report['delta'] / report['J0'], 0.05, places=10)

    @override_settings(WATERMARK={'LARGE_MODEL_SIZE': 1000})
    def test_large_model_size_comes_from_settings(self):
        report = run_offline_design(ExperimentConfig.from_options(kind='design', random=True, n=8, m=10, p=4))
        self.assertAlmostEqual(report['delta'] / report['J0'], 0.1, places=10)


class OnlineRunTests(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def test_zero_steps(self):
        summary = run_online_experiment(ExperimentConfig.from_options(**small_run_options(self.root, steps=0)))
        self.assertEqual(summary['steps'], 0)
        self.assertEqual((self.root / 'trace.csv').read_text().strip(), ','.join(TRACE_COLUMNS))

    def test_same_seed_same_trace(self):
        first = run_online_experiment(ExperimentConfig.from_options(**small_run_options(self.root / 'a')))
        run_online_experiment(ExperimentConfig.from_options(**small_run_options(self.root / 'b')))
        self.assertEqual((self.root / 'a' / 'trace.csv').read_bytes(), (self.root / 'b' / 'trace.csv').read_bytes())
        self.assertEqual(first['steps'], 60)

    def test_summary_is_reproducible_from_trace(self):
        summary = run_online_experiment(ExperimentConfig.from_options(**small_run_options(self.root)))
        stored = json.loads((self.root / 'summary.json').read_text())
        self.assertEqual(json_safe(evaluate_path(self.root)), json_safe(stored))
        self.assertEqual(json_safe(summary), json_safe(stored))

    def test_replay_attack_is_detected(self):
        model_path = dump_model_file(PlantModel.scalar(0.5), self.root / 'plant.json')
        config = ExperimentConfig.from_options(**small_run_options(
            self.root, kind='attack-demo', random=None, model_path=str(model_path), steps=500, delta=50.0, burn_in=100,
            record_start=300, record_len=100, replay_start=400,
        ))
        summary = run_online_experiment(config)
        self.assertGreater(summary['oracle_detection_power'], 0.4)
        self.assertLess(summary['oracle_false_alarm_rate'], 0.2)
        attack = json.loads((self.root / 'attack.json').read_text())
        self.assertEqual(attack['delta_k'], 100)
        self.assertIn('covariance_p_value', attack)

    def test_attack_run_buffers_only_compared_windows(self):
        model_path = dump_model_file(PlantModel.scalar(0.5), self.root / 'plant.json')
        config = ExperimentConfig.from_options(**small_run_options(
            self.root, kind='attack-demo', random=None, model_path=str(model_path), steps=500,
            record_start=300, record_len=100, replay_start=400,
        ))
        with mock.patch('experiments.runner.stealth_report', wraps=stealth_report) as report:
            run_online_experiment(config)
        schedule, delivered = report.call_args.args
        self.assertEqual(schedule.reference_start, 200)
        self.assertEqual(sorted(delivered), list(range(200, 300)) + list(range(400, 500)))

    def test_checkpoint_and_resume(self):
        run_online_experiment(ExperimentConfig.from_options(**small_run_options(self.root / 'first', checkpoint_every=25)))
        saved = self.root / 'first' / 'learner.json'
        self.assertEqual(load_checkpoint(saved).k, 60)

        summary = run_online_experiment(ExperimentConfig.from_options(**small_run_options(
            self.root / 'resumed', steps=20, resume=str(saved), checkpoint_every=20,
        )))
        self.assertEqual(load_checkpoint(self.root / 'resumed' / 'learner.json').k, 80)
        stored = json.loads((self.root / 'resumed' / 'config.json').read_text())
        self.assertEqual(stored['learner_start'], 60)
        self.assertEqual(summary['accepted_fits'] + summary['gate_failures'], 20)

    def test_resume_needs_matching_dimensions(self):
        run_online_experiment(ExperimentConfig.from_options(**small_run_options(self.root / 'first', checkpoint_every=60)))
        config = ExperimentConfig.from_options(**small_run_options(
            self.root / 'other', m=2, resume=str(self.root / 'first' / 'learner.json'),
        ))
        with self.assertRaisesMessage(ConfigError, "checkpoint"):
            run_online_experiment(config)

    def attack_protocol_config(self, seed, **overrides):
        options = dict(ATTACK_DEMO_DEFAULTS, kind='attack-demo', random=True, seed=seed, out=str(self.root / f'seed-{seed}'))
        options.update(overrides)
        return ExperimentConfig.from_options(**options)

    @tag('slow')
    @slow_test
    def test_replay_protocol_at_tenth_of_cost(self):
        summaries = [run_online_experiment(self.attack_protocol_config(seed, delta_frac=0.1)) for seed in range(3)]
        for summary in summaries:
            self.assertLess(summary['false_alarm_rate'], 0.1)
            self.assertLess(summary['oracle_false_alarm_rate'], 0.1)
            self.assertGreater(summary['detection_power'], summary['false_alarm_rate'])
        aggregate = merge_summaries(summaries)
        self.assertGreater(aggregate['mean_detection_power'], 2 * aggregate['mean_false_alarm_rate'])

    @tag('slow')
    @slow_test
    def test_replay_protocol_separates_with_larger_budget(self):
        for seed in range(3):
            J0 = run_offline_design(ExperimentConfig.from_options(kind='design', random=True, seed=seed, delta_frac=1.0))['J0']
            summary = run_online_experiment(self.attack_protocol_config(seed, delta=10.0 * J0))
            self.assertGreater(summary['mean_g_hat_replay'], summary['p99_g_hat_pre_attack'])
            self.assertGreater(summary['oracle_detection_power'], 0.5)
            self.assertLess(summary['oracle_false_alarm_rate'], 0.1)

    @tag('slow')
    @slow_test
    def test_large_plant_keeps_refitting(self):
        out = self.root / 'large'
        config = ExperimentConfig.from_options(
            kind='attack-demo', random=True, n=8, m=10, p=4, nbar=5, steps=5300,
            record_start=5001, record_len=100, replay_start=5101, out=str(out),
        )
        summary = run_online_experiment(config)
        J0 = run_offline_design(ExperimentConfig.from_options(kind='design', random=True, n=8, m=10, p=4))['J0']
        self.assertAlmostEqual(json.loads((out / 'config.json').read_text())['delta'] / J0, 0.05, places=10)
        self.assertGreater(read_trace(out / 'trace.csv')['gate'][-1000:].sum(), 0)
        self.assertGreater(summary['accepted_fits'], 10 * summary['gate_failures'])
        self.assertLess(summary['oracle_false_alarm_rate'], 0.1)
        self.assertLess(summary['false_alarm_rate'], 0.15)

    @tag('slow')
    @slow_test
    def test_design_error_decays_over_seeds(self):
        summaries, early = [], []
        for seed in range(5):
            out = self.root / f'seed-{seed}'
            config = ExperimentConfig.from_options(
                random=True, seed=seed, steps=100000, calibration_samples=10000, out=str(out),
            )
            summaries.append(run_online_experiment(config))
            early.append(read_trace(out / 'trace.csv')['rel_err_U'][1000])
        aggregate = merge_summaries(summaries)
        self.assertLess(aggregate['median_final_rel_err_U'], np.median(early))
        self.assertGreaterEqual(aggregate['runs_with_decay'], 4)


class ExperimentTaskTests(TestCase):
    def test_completed_run(self):
        with tempfile.TemporaryDirectory() as directory:
            config = ExperimentConfig.from_options(**small_run_options(directory, steps=20))
            run = ExperimentRun.objects.create(kind=config.kind, seed=0, config=config.to_dict(), out_dir=directory)
            summary = run_experiment_task.apply(args=(run.pk,)).get()
        run.refresh_from_db()
        self.assertEqual(run.status, ExperimentRun.Status.COMPLETED)
        self.assertEqual(run.summary, summary)
        self.assertEqual(summary['steps'], 20)

    def test_failed_run(self):
        run = ExperimentRun.objects.create(
            kind=ExperimentRun.Kind.DESIGN, config={'kind': 'design', 'model_path': '/nonexistent/plant.json'},
        )
        with self.assertRaises(FileNotFoundError):
            run_experiment_task.apply(args=(run.pk,)).get()
        run.refresh_from_db()
        self.assertEqual(run.status, ExperimentRun.Status.FAILED)
        self.assertIn('plant.json', run.error)


class WatermarkCommandTests(TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def call(self, *args):
        out = StringIO()
        call_command('watermark', *args, stdout=out)
        return json.loads(out.getvalue())

    def test_design(self):
        model_path = dump_model_file(PlantModel.scalar(0.5), self.root / 'plant.json')
        report = self.call('design', '--model', str(model_path), '--delta', '1.0')
        self.assertAlmostEqual(report['U_star'][0][0], 3.0 / 7.0, places=10)
        run = ExperimentRun.objects.get()
        self.assertEqual(run.status, ExperimentRun.Status.COMPLETED)
        self.assertAlmostEqual(run.summary['delta_J'], 1.0, places=8)

    def test_simulate_and_eval(self):
        out = self.root / 'sim'
        summary = self.call(
            'simulate', '--random', '--n', '2', '--m', '1', '--p', '1', '--steps', '40',
            '--calibration-samples', '1000', '--burn-in', '10', '--out', str(out),
        )
        self.assertEqual(summary['steps'], 40)
        self.assertEqual(self.call('eval', str(out / 'trace.csv')), summary)

    def test_multiple_seeds(self):
        out = self.root / 'sweep'
        result = self.call(
            'simulate', '--random', '--n', '2', '--m', '1', '--p', '1', '--steps', '30',
            '--calibration-samples', '1000', '--runs', '2', '--out', str(out),
        )
        self.assertEqual(result['aggregate']['runs'], 2)
        self.assertTrue((out / 'seed-0' / 'trace.csv').exists())
        self.assertTrue((out / 'seed-1' / 'trace.csv').exists())
        self.assertEqual(ExperimentRun.objects.filter(status=ExperimentRun.Status.COMPLETED).count(), 2)
        evaluated = self.call('eval', str(out))
        self.assertEqual(evaluated['aggregate'], result['aggregate'])

    def test_simulate_with_checkpoint(self):
        out = self.root / 'sim'
        self.call(
            'simulate', '--random', '--n', '2', '--m', '1', '--p', '1', '--steps', '30',
            '--calibration-samples', '1000', '--checkpoint-every', '10', '--out', str(out),
        )
        self.assertEqual(load_checkpoint(out / 'learner.json').k, 30)

    def test_resume_from_missing_checkpoint(self):
        with self.assertRaises(CommandError):
            call_command(
                'watermark', 'simulate', '--random', '--steps', '10', '--calibration-samples', '1000',
                '--resume', str(self.root / 'missing.json'), '--out', str(self.root / 'sim'), stdout=StringIO(),
            )

    def test_invalid_option(self):
        with self.assertRaisesMessage(CommandError, "beta"):
            call_command('watermark', 'simulate', '--random', '--beta', '1.5', stdout=StringIO())

    def test_missing_trace(self):
        with self.assertRaises(CommandError):
            call_command('watermark', 'eval', str(self.root / 'missing.csv'), stdout=StringIO())


class ExperimentRunApiTests(TestCase):
    def setUp(self):
        self.client = APIClient()
        self.design = ExperimentRun.objects.create(kind=ExperimentRun.Kind.DESIGN, seed=1)
        self.simulation = ExperimentRun.objects.create(
            kind=ExperimentRun.Kind.SIMULATE, seed=2, status=ExperimentRun.Status.COMPLETED,
            summary={'steps': 10},
        )

    def test_list_newest_first(self):
        response = self.client.get(reverse('run-list'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data['count'], 2)
        self.assertEqual(response.data['results'][0]['id'], self.simulation.id)

    def test_filter_by_kind(self):
        response = self.client.get(reverse('run-list'), {'kind': 'design'})
        self.assertEqual([run['id'] for run in response.data['results']], [self.design.id])

    def test_filter_by_status(self):
        response = self.client.get(reverse('run-list'), {'status': 'COMPLETED'})
        self.assertEqual(response.data['count'], 1)

    def test_detail(self):
        response = self.client.get(reverse('run-detail', kwargs={'pk': self.simulation.id}))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data['summary'], {'steps': 10})

    def test_missing_run(self):
        response = self.client.get(reverse('run-detail', kwargs={'pk': 9999}))
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)
