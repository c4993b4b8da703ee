"""
Module: detector

Neyman-Pearson test between the authentic output distribution
N(phi_k, W) and the replayed one N(0, W + U_cal):

    g_k = (y_k - phi_k)^T W^{-1} (y_k - phi_k) - y_k^T (W + U_cal)^{-1} y_k

An alarm is raised when g_k >= eta. The detector uses the current sample
only and a constant threshold calibrated by Monte-Carlo.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from plant_management.plant import SimState, psd_factor, step
from watermark_design.design import spd_inverse

logger = logging.getLogger(__name__)

MIN_CALIBRATION_SAMPLES = 1000


class WatermarkResponse:
    """
    Running value of phi_k = sum_tau H_tau phi_{k-tau}.

    Keeps the watermark-only state s_k = A s_{k-1} + B phi_k, so that
    phi_k = C s_k without storing the watermark history.
    """

    def __init__(self, model):
        self.model = model
        self.s = np.zeros(model.n)

    def update(self, phi):
        self.s = self.model.A @ self.s + self.model.B @ np.atleast_1d(phi)
        return self.model.C @ self.s


def watermark_response(model, phi_history):
    """phi_k for the last entry of ``phi_history`` (which starts at k = 0)."""
    response = WatermarkResponse(model)
    value = np.zeros(model.m)
    for phi in phi_history:
        value = response.update(phi)
    return value


@dataclass(eq=False)
class DetectorContext:
    """
    Attributes:
        W_inv: inverse output noise covariance.
        UW_inv: inverse of (W + U_cal).
        eta: alarm threshold.
        response: running watermark response, or None when the caller
            supplies phi_k itself.
    """

    W_inv: np.ndarray
    UW_inv: np.ndarray
    eta: float = 0.0
    response: WatermarkResponse = field(default=None, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.eta):
            raise ValueError(f"threshold must be finite, got {self.eta}")

    @classmethod
    def from_covariances(cls, W, U_cal, eta=0.0, model=None):
        return cls(
            W_inv=spd_inverse(W, 'noise covariance W'),
            UW_inv=spd_inverse(np.asarray(W) + np.asarray(U_cal), 'W + U_cal'),
            eta=eta,
            response=WatermarkResponse(model) if model is not None else None,
        )

    @classmethod
    def from_design(cls, model, design, eta=0.0):
        return cls.from_covariances(design.W_cal, design.U_cal, eta=eta, model=model)

    def observe(self, y, phi):
        """Feed the watermark applied at this step and return g_k for y_k."""
        if self.response is None:
            raise ValueError("detector context was built without a plant model")
        return np_statistic(y, self.response.update(phi), self)


def np_statistic(y, phi, ctx):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    residual = y - np.atleast_1d(phi)
    return float(residual @ ctx.W_inv @ residual - y @ ctx.UW_inv @ y)


def decide(g, eta):
    """Alarm flag: reject the no-attack hypothesis when g >= eta."""
    return bool(g >= eta)


def calibrate_threshold(model, design, target_far, samples, seed=0):
    """
    Constant threshold with empirical false-alarm rate ``target_far``.

    Simulates the attack-free plant driven by the optimal watermark for
    ``samples`` steps and returns the (1 - target_far) quantile of g.
    """
    if not 0.0 < target_far < 1.0:
        raise ValueError(f"target false-alarm rate must lie in (0, 1), got {target_far}")
    if samples < MIN_CALIBRATION_SAMPLES:
        raise ValueError(f"calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {samples}")

    process_seed, measurement_seed, watermark_seed = np.random.SeedSequence(seed).spawn(3)
    state = SimState.initialize(
        model,
        np.random.default_rng(process_seed),
        np.random.default_rng(measurement_seed),
    )
    watermark_rng = np.random.default_rng(watermark_seed)
    factor = psd_factor(design.U_star, 'U*')
    ctx = DetectorContext.from_design(model, design)

    statistics = np.empty(samples)
    for k in range(samples):
        phi = factor @ watermark_rng.standard_normal(model.p)
        statistics[k] = ctx.observe(step(state, model, phi), phi)

    eta = float(np.quantile(statistics, 1.0 - target_far))
    logger.info(
        "Calibrated threshold eta=%.6g for false-alarm rate %.4g over %d samples",
        eta, target_far, samples,
    )
    return eta
