"""
Experiment orchestration: offline design reports and online runs that wire
plant, replay channel, learner and detector together.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from online_learning import learner
from online_learning.checkpoint import load_checkpoint, save_checkpoint
from plant_management.exceptions import WatermarkError
from plant_management.plant import SimState, step
from plant_management.utils import (
    default_delta_fraction,
    first_error_message,
    generate_random_system,
    load_model_file,
    watermark_setting,
)
from replay_detection.attack import ReplayChannel, ReplaySchedule
from replay_detection.detector import DetectorContext, calibrate_threshold, decide
from replay_detection.utils import covariance_two_sample_test
from watermark_design.design import (
    LqgWeights,
    design_watermark,
    expected_kl,
    kl_bounds,
    lqg_cost,
    resolve_budget,
)

from .metrics import CONFIG_FILE, SUMMARY_FILE, TRACE_COLUMNS, TRACE_FILE, TraceRecord, evaluate_trace

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = 'learner.json'


class ConfigError(WatermarkError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated knobs of one run; built from CLI options or a stored run."""

    kind: str = 'simulate'
    seed: int = 0
    steps: int = 10000
    nbar: int = None
    beta: float = 1.0 / 3.0
    allow_beta_zero: bool = False
    delta: float = None
    delta_frac: float = None
    model_path: str = None
    random: bool = False
    n: int = 5
    m: int = 3
    p: int = 2
    rho: float = 0.9
    record_start: int = None
    record_len: int = None
    replay_start: int = None
    far: float = 0.05
    fit_every: int = 1
    calibration_samples: int = 10000
    burn_in: int = 1000
    slope_start: int = 1000
    out: str = None
    checkpoint_every: int = 0
    resume: str = None
    schedule: ReplaySchedule = field(default=None, compare=False)

    @classmethod
    def from_options(cls, **options):
        """
        Validate options with ExperimentConfigSerializer.

        Raises:
            ConfigError: naming the first invalid option.
        """
        from api.serializers import ExperimentConfigSerializer

        options = {key: value for key, value in options.items() if value is not None}
        serializer = ExperimentConfigSerializer(data=options)
        if not serializer.is_valid():
            raise ConfigError(first_error_message(serializer.errors))
        data = dict(serializer.validated_data)

        if data['record_start'] is not None:
            data['schedule'] = ReplaySchedule.from_lengths(
                data['record_start'], data['record_len'], data['replay_start']
            )
        return cls(**data)

    def to_dict(self):
        data = asdict(self)
        data.pop('schedule')
        return data

    def for_seed(self, seed, out):
        return replace(self, seed=seed, out=str(out))

    @property
    def output_dir(self):
        if self.out:
            return Path(self.out)
        return Path(watermark_setting('OUTPUT_DIR', 'runs')) / self.kind / f'seed-{self.seed}'


def load_system(config):
    """Plant and LQG weights named by the config (X = I unless the file gives one)."""
    if config.model_path:
        model, weights = load_model_file(config.model_path)
    else:
        model, weights = generate_random_system(config.seed, config.n, config.m, config.p, config.rho), None
    if weights is None:
        weights = LqgWeights.identity(model.m, model.p)
    return model, weights


def budget_for(model, weights, delta=None, delta_frac=None):
    """Absolute budget; without delta or delta_frac, the default fraction for the plant size."""
    if delta is None and delta_frac is None:
        delta_frac = default_delta_fraction(model)
    return resolve_budget(model, weights, delta=delta, delta_frac=delta_frac)


def design_report(model, weights, delta):
    """Offline design of ``model`` with LQG cost and KL figures, as plain JSON data."""
    design = design_watermark(model, weights, delta)
    cost = lqg_cost(model, weights, design.U_star, design.W_cal)
    lower, upper = kl_bounds(design.U_cal, design.W_cal)
    return {
        'n': model.n,
        'm': model.m,
        'p': model.p,
        'delta': design.delta,
        'W': design.W_cal.tolist(),
        'P': design.P_mat.tolist(),
        'X': design.X_mat.tolist(),
        'U_star': design.U_star.tolist(),
        'z': design.z.tolist(),
        'lambda_max': design.lambda_max,
        'degenerate': design.degenerate,
        'U_cal': design.U_cal.tolist(),
        'J0': cost.J0,
        'delta_J': cost.delta_J,
        'expected_kl': expected_kl(design.U_cal, design.W_cal),
        'kl_lower_bound': lower,
        'kl_upper_bound': upper,
    }


def _write_json(path, document):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2))


def run_offline_design(config):
    model, weights = load_system(config)
    delta = budget_for(model, weights, config.delta, config.delta_frac)
    report = design_report(model, weights, delta)
    if config.out:
        _write_json(Path(config.out) / 'design.json', report)
    logger.info(
        "Offline design: lambda_max=%.6g J0=%.6g delta_J=%.6g",
        report['lambda_max'], report['J0'], report['delta_J'],
    )
    return report


def start_learner(config, model, weights, nbar, delta, watermark_seed):
    """
    Fresh learner, or the one saved at ``config.resume``.

    A resumed learner keeps its own step counter, budget and random stream;
    the plant and channel restart from a fresh stationary draw.

    Raises:
        ConfigError: if the checkpoint was saved for other dimensions.
    """
    if config.resume:
        state = load_checkpoint(config.resume)
        if (state.m, state.p) != (model.m, model.p):
            raise ConfigError(
                f"checkpoint {config.resume} is for m={state.m}, p={state.p}; the plant has m={model.m}, p={model.p}"
            )
        logger.info("Resuming learner from %s at step %d", config.resume, state.k)
        return state
    return learner.init(
        nbar, config.beta, delta, weights,
        rng=np.random.default_rng(watermark_seed),
        fit_every=config.fit_every,
        allow_constant_exploration=config.allow_beta_zero,
    )


def _stream_seeds(seed):
    """Independent seeds for process noise, measurement noise, watermark and calibration."""
    process, measurement, watermark, calibration = np.random.SeedSequence(seed).spawn(4)
    return process, measurement, watermark, int(calibration.generate_state(1)[0])


def run_online_experiment(config):
    """
    Run the closed loop watermark -> plant -> channel -> learner -> detector.

    Writes config.json, trace.csv (one row per step, flushed on failure) and
    summary.json into the run directory.

    Returns:
        dict: the summary metrics.
    """
    model, weights = load_system(config)
    nbar = config.nbar or model.n
    delta = budget_for(model, weights, config.delta, config.delta_frac)
    design = design_watermark(model, weights, delta)
    U_true_norm = np.linalg.norm(design.U_star)

    process_seed, measurement_seed, watermark_seed, calibration_seed = _stream_seeds(config.seed)
    eta = calibrate_threshold(model, design, config.far, config.calibration_samples, seed=calibration_seed)

    state = start_learner(config, model, weights, nbar, delta, watermark_seed)
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    context = dict(
        config.to_dict(),
        nbar=state.nbar,
        fit_every=state.fit_every,
        learner_start=state.k,
        delta=delta,
        threshold=eta,
        schedule=config.schedule.to_dict() if config.schedule else None,
    )
    _write_json(out_dir / CONFIG_FILE, context)

    sim = SimState.initialize(model, np.random.default_rng(process_seed), np.random.default_rng(measurement_seed))
    detector = DetectorContext.from_design(model, design, eta=eta)
    schedule = config.schedule
    channel = ReplayChannel(schedule)
    delivered_outputs = {}

    logger.info(
        "Starting %s run: seed=%s steps=%d nbar=%d beta=%.4g delta=%.6g eta=%.6g",
        config.kind, config.seed, config.steps, state.nbar, state.beta, delta, eta,
    )
    trace_path = out_dir / TRACE_FILE
    with trace_path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(TRACE_COLUMNS)
        try:
            for k in range(config.steps):
                U_star = state.U_star
                phi = learner.next_watermark(state)
                y = channel.transmit(k, step(sim, model, phi))
                g = detector.observe(y, phi)
                result = learner.observe(state, y)
                if schedule is not None and (schedule.is_reference(k) or schedule.is_replaying(k)):
                    delivered_outputs[k] = y
                writer.writerow(TraceRecord(
                    k=k,
                    g=g,
                    g_hat=result.g_hat,
                    alarm=int(decide(result.g_hat, eta)),
                    rel_err_U=float(np.linalg.norm(U_star - design.U_star) / U_true_norm),
                    delta_j=float(np.trace(state.U_k @ design.X_mat)),
                    gate=int(result.gate),
                ).to_row())
                if config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
                    save_checkpoint(state, out_dir / CHECKPOINT_FILE)
        except Exception:
            handle.flush()
            logger.error("Run failed at step %d, partial trace flushed to %s", k, trace_path, exc_info=True)
            raise

    if config.checkpoint_every and config.steps % config.checkpoint_every:
        save_checkpoint(state, out_dir / CHECKPOINT_FILE)
    logger.info("Learner rejected %d of its fits", state.gate_failures)
    summary = evaluate_trace(trace_path, context)
    _write_json(out_dir / SUMMARY_FILE, summary)
    if config.schedule is not None:
        _write_json(out_dir / 'attack.json', stealth_report(config.schedule, delivered_outputs))
    logger.info("Finished run in %s: %s", out_dir, summary)
    return summary


def stealth_report(schedule, delivered_outputs):
    """
    Compare the covariance of the replayed outputs with the outputs delivered
    just before recording began.
    """
    replayed = [delivered_outputs[k] for k in range(schedule.replay_start, schedule.replay_end + 1) if k in delivered_outputs]
    reference = [delivered_outputs[k] for k in range(schedule.reference_start, schedule.record_start) if k in delivered_outputs]
    report = {'schedule': schedule.to_dict(), 'delta_k': schedule.delta_k}
    try:
        statistic, p_value = covariance_two_sample_test(np.array(reference), np.array(replayed))
    except (ValueError, IndexError) as e:
        logger.warning("Stealth check skipped: %s", e)
        return report
    report.update(covariance_statistic=statistic, covariance_p_value=p_value)
    return report
