"""
Trace files and the metrics computed from them.

A run's summary is always produced by ``evaluate_trace`` on the trace it
just wrote, so re-evaluating a stored trace reproduces it exactly.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np

from plant_management.exceptions import TraceParseError
from plant_management.utils import watermark_setting

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ('k', 'g', 'g_hat', 'alarm', 'rel_err_U', 'delta_j', 'gate')
TRACE_FILE = 'trace.csv'
CONFIG_FILE = 'config.json'
SUMMARY_FILE = 'summary.json'
DECAY_SLOPE = -0.1


class TraceRecord(NamedTuple):
    k: int
    g: float
    g_hat: float
    alarm: int
    rel_err_U: float
    delta_j: float
    gate: int

    def to_row(self):
        return [
            str(self.k),
            repr(float(self.g)),
            repr(float(self.g_hat)),
            str(int(self.alarm)),
            repr(float(self.rel_err_U)),
            repr(float(self.delta_j)),
            str(int(self.gate)),
        ]


def read_trace(path):
    """
    Parse a trace CSV into a dict of column arrays.

    Raises:
        TraceParseError: with the offending line number.
    """
    path = Path(path)
    with path.open(newline='') as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise TraceParseError("empty trace file", line_number=1)
        if tuple(header) != TRACE_COLUMNS:
            raise TraceParseError(
                f"expected header {','.join(TRACE_COLUMNS)}, got {','.join(header)}", line_number=1
            )

        rows = []
        for row in reader:
            line = reader.line_num
            if len(row) != len(TRACE_COLUMNS):
                raise TraceParseError(f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}", line_number=line)
            try:
                record = TraceRecord(
                    k=int(row[0]),
                    g=float(row[1]),
                    g_hat=float(row[2]),
                    alarm=int(row[3]),
                    rel_err_U=float(row[4]),
                    delta_j=float(row[5]),
                    gate=int(row[6]),
                )
            except ValueError as e:
                raise TraceParseError(str(e), line_number=line) from e
            if record.k != len(rows):
                raise TraceParseError(f"expected step {len(rows)}, got {record.k}", line_number=line)
            if record.alarm not in (0, 1) or record.gate not in (0, 1):
                raise TraceParseError("alarm and gate must be 0 or 1", line_number=line)
            if record.rel_err_U < 0:
                raise TraceParseError("rel_err_U must be non-negative", line_number=line)
            rows.append(record)

    columns = {name: np.array([getattr(record, name) for record in rows]) for name in TRACE_COLUMNS}
    for name in ('k', 'alarm', 'gate'):
        columns[name] = columns[name].astype(int)
    for name in ('g', 'g_hat', 'rel_err_U', 'delta_j'):
        columns[name] = columns[name].astype(float)
    return columns


def _mean(values):
    return float(np.mean(values)) if len(values) else math.nan


def loglog_slope(k, errors, start=1):
    """Least-squares slope of log(error) against log(k) over k >= start, error > 0."""
    k = np.asarray(k, dtype=float)
    errors = np.asarray(errors, dtype=float)
    mask = (k >= max(start, 1)) & (errors > 0) & np.isfinite(errors)
    if np.count_nonzero(mask) < 2:
        return math.nan
    slope, _ = np.polyfit(np.log(k[mask]), np.log(errors[mask]), 1)
    return float(slope)


def attempted_fits(steps, nbar, fit_every, start=0):
    """Number of steps at which the learner refits its eigenstructure; ``start`` is its first step."""
    first = max(3 * nbar - 2, start)
    return sum(1 for k in range(first, start + steps) if k % fit_every == 0)


def summarize(trace, context):
    """
    Summary metrics of a trace.

    ``context`` holds the run's threshold, schedule, burn-in, slope start,
    nbar and fit cadence (the content of config.json).
    """
    k = trace['k']
    steps = int(k.size)
    burn_in = context.get('burn_in', watermark_setting('DEFAULT_BURN_IN', 1000))
    slope_start = context.get('slope_start', watermark_setting('SLOPE_START', 1000))
    eta = context.get('threshold', math.nan)
    schedule = context.get('schedule')

    if schedule:
        attack_start = schedule['record_start']
        replay = (k >= schedule['replay_start']) & (k <= schedule['replay_start'] + schedule['window'])
    else:
        attack_start = steps
        replay = np.zeros(steps, dtype=bool)
    pre_attack = (k >= burn_in) & (k < attack_start)

    g, g_hat = trace['g'], trace['g_hat']
    tracking = math.nan
    if np.count_nonzero(pre_attack) > 1 and np.std(g[pre_attack]) > 0:
        tracking = float(np.sqrt(np.mean((g_hat[pre_attack] - g[pre_attack]) ** 2)) / np.std(g[pre_attack]))

    accepted = int(trace['gate'].sum())
    nbar, fit_every = context.get('nbar'), context.get('fit_every', 1)
    start = context.get('learner_start', 0)
    failures = attempted_fits(steps, nbar, fit_every, start) - accepted if nbar else math.nan

    return {
        'steps': steps,
        'threshold': eta,
        'final_rel_err_U': float(trace['rel_err_U'][-1]) if steps else math.nan,
        'loglog_slope': loglog_slope(k, trace['rel_err_U'], slope_start),
        'detection_power': _mean(trace['alarm'][replay]),
        'false_alarm_rate': _mean(trace['alarm'][pre_attack]),
        'oracle_detection_power': _mean((g[replay] >= eta).astype(float)),
        'oracle_false_alarm_rate': _mean((g[pre_attack] >= eta).astype(float)),
        'mean_g_hat_replay': _mean(g_hat[replay]),
        'p99_g_hat_pre_attack': float(np.percentile(g_hat[pre_attack], 99)) if pre_attack.any() else math.nan,
        'tracking_rms': tracking,
        'mean_delta_j': _mean(trace['delta_j']),
        'accepted_fits': accepted,
        'gate_failures': failures,
    }


def load_run_config(trace_path):
    config_path = Path(trace_path).with_name(CONFIG_FILE)
    if not config_path.exists():
        logger.warning("No %s next to %s, using default metric settings", CONFIG_FILE, trace_path)
        return {}
    return json.loads(config_path.read_text())


def evaluate_trace(path, context=None):
    """Recompute the summary metrics of a stored trace."""
    trace = read_trace(path)
    return summarize(trace, context if context is not None else load_run_config(path))


def merge_summaries(summaries):
    """Aggregate per-run summaries of a multi-seed experiment."""
    summaries = list(summaries)
    slopes = np.array([summary['loglog_slope'] for summary in summaries], dtype=float)
    errors = np.array([summary['final_rel_err_U'] for summary in summaries], dtype=float)
    return {
        'runs': len(summaries),
        'median_final_rel_err_U': float(np.nanmedian(errors)) if np.isfinite(errors).any() else math.nan,
        'runs_with_decay': int(np.count_nonzero(slopes <= DECAY_SLOPE)),
        'mean_detection_power': _nanmean([summary['detection_power'] for summary in summaries]),
        'mean_false_alarm_rate': _nanmean([summary['false_alarm_rate'] for summary in summaries]),
    }


def _nanmean(values):
    values = np.array(values, dtype=float)
    return float(np.nanmean(values)) if np.isfinite(values).any() else math.nan


def evaluate_path(path):
    """
    Metrics of one trace file, or of a directory of runs.

    A directory is searched for run subdirectories holding a trace; their
    summaries are returned together with the aggregate.
    """
    path = Path(path)
    if path.is_dir():
        if (path / TRACE_FILE).exists():
            return evaluate_trace(path / TRACE_FILE)
        traces = sorted(path.glob(f'*/{TRACE_FILE}'))
        if not traces:
            raise TraceParseError(f"no {TRACE_FILE} found under {path}")
        runs = {trace.parent.name: evaluate_trace(trace) for trace in traces}
        return {'aggregate': merge_summaries(runs.values()), 'runs': runs}
    return evaluate_trace(path)


def json_safe(value):
    """Replace non-finite floats by None for strict JSON consumers."""
    if isinstance(value, dict):
        return {key: json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(item) for item in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value
