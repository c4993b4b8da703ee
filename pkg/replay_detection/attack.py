"""
Module: attack

Replay adversary: records the delivered sensor outputs over
[record_start, record_start + window] and substitutes them, in order, over
[replay_start, replay_start + window], i.e. y'_k = y_{k - delta_k}.
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from plant_management.exceptions import ScheduleError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplaySchedule:
    """
    Attributes:
        record_start (k1): first recorded step.
        window (T): the record and replay windows span T + 1 steps.
        replay_start (k2): first replayed step, k2 >= k1 + T.
    """

    record_start: int
    window: int
    replay_start: int

    def __post_init__(self):
        if self.window < 1:
            raise ScheduleError(f"replay window must be at least 1, got {self.window}")
        if self.record_start < 0:
            raise ScheduleError(f"record start must be nonnegative, got {self.record_start}")
        if self.replay_start < self.record_end:
            raise ScheduleError(
                f"replay starts at {self.replay_start} before recording completes at {self.record_end}"
            )

    @classmethod
    def from_lengths(cls, record_start, record_len, replay_start):
        """Schedule recording ``record_len`` samples (window T = record_len - 1)."""
        return cls(record_start=record_start, window=record_len - 1, replay_start=replay_start)

    @property
    def delta_k(self):
        return self.replay_start - self.record_start

    @property
    def record_end(self):
        return self.record_start + self.window

    @property
    def replay_end(self):
        return self.replay_start + self.window

    @property
    def reference_start(self):
        """First of the T + 1 delivered steps just before recording starts."""
        return max(self.record_start - (self.window + 1), 0)

    def is_reference(self, k):
        return self.reference_start <= k < self.record_start

    def is_recording(self, k):
        return self.record_start <= k <= self.record_end

    def is_replaying(self, k):
        return self.replay_start <= k <= self.replay_end

    def to_dict(self):
        return {
            'record_start': self.record_start,
            'window': self.window,
            'replay_start': self.replay_start,
        }


class ReplayChannel:
    """
    Sensor channel under the attacker's control.

    Without a schedule the channel is a passthrough. Steps must be fed
    consecutively.
    """

    def __init__(self, schedule=None):
        self.schedule = schedule
        self.buffer = deque(maxlen=schedule.window + 1) if schedule else deque(maxlen=0)
        self._last_k = None

    def transmit(self, k, y_true):
        """Return the output delivered to the operator at step k."""
        if self._last_k is not None and k != self._last_k + 1:
            raise ScheduleError(f"step {k} received after step {self._last_k}")
        self._last_k = k

        y_true = np.asarray(y_true, dtype=float)
        if self.schedule is None:
            return y_true

        if self.schedule.is_recording(k):
            self.buffer.append(y_true.copy())
            if k == self.schedule.record_end:
                logger.debug("Replay buffer complete with %d samples", len(self.buffer))
        if self.schedule.is_replaying(k):
            index = k - self.schedule.replay_start
            if index >= len(self.buffer):
                raise ScheduleError(f"replay at step {k} requested before recording completed")
            return self.buffer[index].copy()
        return y_true

    def is_replaying(self, k):
        return self.schedule is not None and self.schedule.is_replaying(k)
