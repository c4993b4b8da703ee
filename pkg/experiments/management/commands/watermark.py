"""
``python manage.py watermark <design|simulate|attack-demo|eval> [options]``
"""

import json
import logging

from celery import group
from django.core.management.base import BaseCommand, CommandError

from experiments.metrics import evaluate_path, json_safe, merge_summaries
from experiments.models import ExperimentRun
from experiments.runner import ExperimentConfig, run_offline_design
from experiments.tasks import run_experiment_task
from plant_management.exceptions import WatermarkError

logger = logging.getLogger(__name__)

# Replay protocol of the attack demo: record 100 samples from step 10001 and
# replay them from step 10101.
ATTACK_DEMO_DEFAULTS = {
    'steps': 10300,
    'record_start': 10001,
    'record_len': 100,
    'replay_start': 10101,
}

RUN_OPTIONS = (
    'seed', 'steps', 'nbar', 'beta', 'allow_beta_zero', 'delta', 'delta_frac',
    'model_path', 'random', 'n', 'm', 'p', 'rho', 'record_start', 'record_len',
    'replay_start', 'far', 'fit_every', 'calibration_samples', 'burn_in',
    'slope_start', 'out', 'checkpoint_every', 'resume',
)


def _add_system_arguments(parser):
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument('--model', dest='model_path', help="JSON model file")
    source.add_argument('--random', action='store_true', help="generate a random stable system")
    parser.add_argument('--n', type=int, help="state dimension of the random system")
    parser.add_argument('--m', type=int, help="output dimension of the random system")
    parser.add_argument('--p', type=int, help="input dimension of the random system")
    parser.add_argument('--rho', type=float, help="spectral radius of the random system")
    parser.add_argument('--seed', type=int, default=0)
    budget = parser.add_mutually_exclusive_group()
    budget.add_argument('--delta', type=float, help="absolute LQG budget")
    budget.add_argument('--delta-frac', type=float, help="LQG budget as a fraction of J0 (default 0.1, or 0.05 when n*m >= 64)")
    parser.add_argument('--out', help="output directory")


def _add_run_arguments(parser):
    _add_system_arguments(parser)
    parser.add_argument('--steps', type=int)
    parser.add_argument('--nbar', type=int, help="number of distinct eigenvalues assumed by the learner")
    parser.add_argument('--beta', type=float, help="exploration decay exponent")
    parser.add_argument('--allow-beta-zero', action='store_true', help="accept constant exploration (beta = 0)")
    parser.add_argument('--record-start', type=int)
    parser.add_argument('--record-len', type=int)
    parser.add_argument('--replay-start', type=int)
    parser.add_argument('--far', type=float, help="target false-alarm rate")
    parser.add_argument('--fit-every', type=int, help="refit the eigenstructure every F steps")
    parser.add_argument('--calibration-samples', type=int)
    parser.add_argument('--burn-in', type=int)
    parser.add_argument('--slope-start', type=int)
    parser.add_argument('--checkpoint-every', type=int, help="save the learner to learner.json every N steps and at the end")
    parser.add_argument('--resume', help="continue learning from a saved learner.json")
    parser.add_argument('--runs', type=int, default=1, help="number of seeds, starting at --seed")
    parser.add_argument('--parallel', type=int, default=1, help="dispatch runs as a Celery group")


class Command(BaseCommand):
    help = "Watermark design, online learning and replay-attack experiments."

    def add_arguments(self, parser):
        subcommands = parser.add_subparsers(dest='subcommand', required=True)
        _add_system_arguments(subcommands.add_parser('design', help="offline design for a known plant"))
        _add_run_arguments(subcommands.add_parser('simulate', help="online learning run"))
        _add_run_arguments(subcommands.add_parser('attack-demo', help="online run under a replay attack"))
        evaluate = subcommands.add_parser('eval', help="recompute metrics from stored traces")
        evaluate.add_argument('path', help="trace CSV or directory of runs")

    def handle(self, *args, **options):
        subcommand = options['subcommand']
        try:
            if subcommand == 'eval':
                result = evaluate_path(options['path'])
            elif subcommand == 'design':
                result = self.design(options)
            else:
                result = self.run(subcommand, options)
        except WatermarkError as e:
            raise CommandError(str(e)) from e
        except FileNotFoundError as e:
            raise CommandError(f"file not found: {e.filename}") from e

        self.stdout.write(json.dumps(json_safe(result), indent=2))

    def _config(self, kind, options):
        values = {name: options.get(name) for name in RUN_OPTIONS}
        if kind == ExperimentRun.Kind.ATTACK_DEMO:
            for name, default in ATTACK_DEMO_DEFAULTS.items():
                if values[name] is None:
                    values[name] = default
        return ExperimentConfig.from_options(kind=kind, **values)

    def design(self, options):
        config = self._config(ExperimentRun.Kind.DESIGN, options)
        run = ExperimentRun.objects.create(
            kind=config.kind, seed=config.seed, config=config.to_dict(), out_dir=config.out or '',
        )
        run.mark_running()
        try:
            report = run_offline_design(config)
        except WatermarkError as e:
            run.mark_failed(e)
            raise
        run.mark_completed(json_safe({
            key: report[key] for key in ('lambda_max', 'J0', 'delta_J', 'expected_kl', 'degenerate')
        }))
        return report

    def run(self, kind, options):
        config = self._config(kind, options)
        runs, parallel = options['runs'], options['parallel']
        if runs < 1 or parallel < 1:
            raise CommandError("--runs and --parallel must be at least 1")

        base = config.output_dir
        if runs == 1:
            configs = [config.for_seed(config.seed, base)]
        else:
            configs = [config.for_seed(config.seed + i, base / f'seed-{config.seed + i}') for i in range(runs)]

        records = [
            ExperimentRun.objects.create(kind=kind, seed=c.seed, config=c.to_dict(), out_dir=c.out)
            for c in configs
        ]
        if parallel > 1:
            logger.info("Dispatching %d runs as a Celery group", runs)
            result = group(run_experiment_task.s(record.pk) for record in records).apply_async()
            summaries = result.get()
        else:
            summaries = [run_experiment_task.apply(args=(record.pk,)).get() for record in records]

        if runs == 1:
            return summaries[0]
        logger.info("%d runs written under %s", runs, base)
        aggregate = merge_summaries(summaries)
        return {'aggregate': aggregate, 'runs': {record.out_dir: summary for record, summary in zip(records, summaries)}}
