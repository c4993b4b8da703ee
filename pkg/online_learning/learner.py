"""
Module: learner

Online watermark design for a plant with unknown parameters.

Each step injects phi_k ~ N(0, U_k) with U_k = U_{k,*} + delta (k+1)^{-beta} I
and learns, from the delivered outputs alone:

    H_{k,tau}   running estimate of the Markov parameter H_tau
    alpha_k     minimal-polynomial coefficients fitted to the H bank
    lambda_k    roots of that polynomial (the distinct eigenvalues of A)
    Omega_k     modal residues, H_tau ~ sum_i lambda_i^tau Omega_i
    W_k         covariance of the watermark-free part of the output

From those it rebuilds the design matrices P_k and X_k, the next optimum
U_{k+1,*} and the detector statistic g_hat_k.
"""

import copy
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from plant_management.exceptions import (
    ClusteredRootsError,
    DegenerateCovarianceError,
    DimensionMismatchError,
    IllConditionedFitError,
)
from plant_management.plant import modal_decomposition, pair_conjugates, symmetrize
from watermark_design.design import (
    cholesky_lower,
    design_watermark,
    optimal_watermark,
    spd_inverse,
)

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
STABILITY_MARGIN = 1e-6
ROOT_GAP = 1e-9
PINV_CUTOFF = 1e-10
PRODUCT_MARGIN = 1e-9
W_REGULARIZATION = 1e-9
IMAGINARY_RESIDUE = 1e-8


class PolynomialFit(NamedTuple):
    alpha: np.ndarray
    condition: float


class RootEstimate(NamedTuple):
    lambdas: np.ndarray
    schur_stable: bool


class StepResult(NamedTuple):
    phi_hat: np.ndarray
    g_hat: float
    gate: bool


@dataclass(eq=False)
class LearnerState:
    """
    Everything the online design carries from one step to the next.

    ``k`` is the index of the current step: next_watermark draws phi_k and
    observe consumes y_k, then advances k.
    """

    nbar: int
    beta: float
    delta: float
    weights: object
    rng: np.random.Generator
    fit_every: int = 1
    k: int = 0
    H_bank: np.ndarray = None
    alpha: np.ndarray = None
    lambdas: np.ndarray = None
    omegas: np.ndarray = None
    phi_modes: np.ndarray = None
    W_acc: np.ndarray = None
    W_cal: np.ndarray = None
    P_k: np.ndarray = None
    X_k: np.ndarray = None
    U_cal: np.ndarray = None
    U_star: np.ndarray = None
    U_k: np.ndarray = None
    last_phi: np.ndarray = None
    phi_hat: np.ndarray = None
    last_valid: bool = False
    fitted: bool = False
    frozen: bool = False
    degenerate: bool = False
    gate_failures: int = 0
    weighted_history: deque = field(default=None, repr=False)

    @property
    def m(self):
        return self.weights.m

    @property
    def p(self):
        return self.weights.p

    @property
    def bank_size(self):
        return 3 * self.nbar - 1

    def exploration(self, k=None):
        k = self.k if k is None else k
        return self.delta * (k + 1) ** (-self.beta)


def _validate_hyperparameters(nbar, beta, delta, allow_constant_exploration):
    if int(nbar) != nbar or nbar < 1:
        raise ValueError(f"nbar must be a positive integer, got {nbar}")
    if beta == 0.0 and allow_constant_exploration:
        logger.warning("Constant exploration (beta=0): convergence of U_k,* is not guaranteed")
    elif not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")


def init(nbar, beta, delta, weights, rng=None, fit_every=1, allow_constant_exploration=False):
    """
    Fresh learner with P_{-1} = I and X_{-1} = X_phiphi.

    Raises:
        ValueError: on nbar < 1, delta <= 0, fit_every < 1, or beta outside
            (0, 1) (beta = 0 is accepted with allow_constant_exploration).
    """
    _validate_hyperparameters(nbar, beta, delta, allow_constant_exploration)
    if fit_every < 1:
        raise ValueError(f"fit_every must be at least 1, got {fit_every}")

    m, p = weights.m, weights.p
    nbar = int(nbar)
    state = LearnerState(
        nbar=nbar,
        beta=float(beta),
        delta=float(delta),
        weights=weights,
        rng=rng if rng is not None else np.random.default_rng(),
        fit_every=int(fit_every),
        H_bank=np.zeros((3 * nbar - 1, m, p)),
        alpha=np.zeros(nbar),
        lambdas=np.zeros(nbar, dtype=complex),
        omegas=np.zeros((nbar, m, p), dtype=complex),
        phi_modes=np.zeros((nbar, m), dtype=complex),
        W_acc=np.zeros((m, m)),
        W_cal=np.zeros((m, m)),
        P_k=np.eye(p),
        X_k=np.array(weights.X_phiphi, dtype=float),
        U_cal=np.zeros((m, m)),
        U_star=np.zeros((p, p)),
        weighted_history=deque(maxlen=3 * nbar - 1),
    )
    update_optimum(state)
    return state


def seed_learner_with_truth(model, weights, delta, beta=1.0 / 3.0, rng=None):
    """
    Learner frozen at the exact parameters of ``model``.

    Identification is switched off: lambda, Omega come from the modal
    decomposition of A, W is the true output noise covariance and P, X are
    the offline design matrices. With these, g_hat_k equals the detector's
    g_k.
    """
    lambdas, omegas = modal_decomposition(model)
    state = init(len(lambdas), beta, delta, weights, rng=rng)
    design = design_watermark(model, weights, delta)
    state.lambdas = lambdas
    state.omegas = omegas
    state.W_cal = design.W_cal
    state.P_k = design.P_mat
    state.X_k = design.X_mat
    state.fitted = state.last_valid = state.frozen = True
    update_optimum(state)
    return state


def square_root(U):
    """Symmetric PSD square root, negative rounding clamped to zero."""
    eigenvalues, vectors = linalg.eigh(symmetrize(U))
    return symmetrize((vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T)


def next_watermark(state):
    """Draw phi_k ~ N(0, U_k) with U_k = U_{k,*} + delta (k+1)^{-beta} I."""
    state.U_k = state.U_star + state.exploration() * np.eye(state.p)
    state.last_phi = square_root(state.U_k) @ state.rng.standard_normal(state.p)
    return state.last_phi


def update_markov(state, y, phi):
    """
    Running averages H_{k,tau} += (y_k phi_{k-tau}^T U_{k-tau}^{-1} - H_{k,tau}) / (k-tau+1).

    Entries with tau > k stay at zero.
    """
    state.weighted_history.appendleft(spd_inverse(state.U_k, 'watermark covariance U_k') @ phi)
    count = min(state.k + 1, len(state.weighted_history))
    weighted = np.array(list(state.weighted_history)[:count])
    targets = y[None, :, None] * weighted[:, None, :]
    divisors = (state.k - np.arange(count) + 1).astype(float)
    state.H_bank[:count] += (targets - state.H_bank[:count]) / divisors[:, None, None]
    return state.H_bank


def fit_minimal_polynomial(H_bank, nbar):
    """
    Least-squares fit of p(x) = x^nbar + alpha_{nbar-1} x^{nbar-1} + ... + alpha_0
    annihilating the Markov sequence.

    Stacks the blocks S_i = [H_i; ...; H_{i+2 nbar-2}] for i = 0..nbar and
    solves Xi alpha = -b with Xi_ij = tr(S_i^T S_j) (i, j < nbar) and
    b_i = tr(S_i^T S_nbar).

    Raises:
        IllConditionedFitError: if cond(Xi) exceeds 1e12.
    """
    H_bank = np.asarray(H_bank, dtype=float)
    if H_bank.shape[0] < 3 * nbar - 1:
        raise DimensionMismatchError(
            f"fit needs {3 * nbar - 1} Markov parameters, got {H_bank.shape[0]}"
        )
    blocks = np.array([H_bank[i:i + 2 * nbar - 1].ravel() for i in range(nbar + 1)])
    gram = blocks @ blocks.T
    Xi, rhs = gram[:nbar, :nbar], gram[:nbar, nbar]

    singular_values = linalg.svdvals(Xi)
    condition = singular_values[0] / singular_values[-1] if singular_values[-1] > 0 else np.inf
    if not condition <= CONDITION_LIMIT:
        raise IllConditionedFitError(f"ill-conditioned fit (condition {condition:.3e})", condition)
    alpha = -linalg.solve(Xi, rhs, assume_a='pos')
    return PolynomialFit(alpha=alpha, condition=float(condition))


def roots_and_stability(alpha):
    """Companion-matrix roots of the monic polynomial and the Schur stability flag."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    coefficients = np.concatenate(([1.0], alpha[::-1]))
    if alpha.size == 1:
        lambdas = np.array([-alpha[0]], dtype=complex)
    else:
        lambdas = np.sort_complex(linalg.eigvals(linalg.companion(coefficients)))
    stable = bool(np.max(np.abs(lambdas)) <= 1.0 - STABILITY_MARGIN)
    return RootEstimate(lambdas=lambdas, schur_stable=stable)


def recover_modes(H_bank, lambdas):
    """
    Residues Omega_i minimising sum_tau ||H_tau - sum_i lambda_i^tau Omega_i||.

    Raises:
        ClusteredRootsError: if two roots are within 1e-9 of each other.
    """
    lambdas = np.asarray(lambdas, dtype=complex)
    gaps = np.abs(lambdas[:, None] - lambdas[None, :])
    np.fill_diagonal(gaps, np.inf)
    if lambdas.size > 1 and gaps.min() <= ROOT_GAP:
        raise ClusteredRootsError(f"clustered roots (gap {gaps.min():.3e})")

    H_bank = np.asarray(H_bank, dtype=float)
    size, m, p = H_bank.shape
    vandermonde = np.vander(lambdas, N=size, increasing=True).T
    omegas = linalg.pinv(vandermonde, rtol=PINV_CUTOFF) @ H_bank.reshape(size, -1)
    return pair_conjugates(lambdas, omegas.reshape(lambdas.size, m, p))


def _align_modes(state, lambdas, omegas):
    """Order new roots to follow the previous ones so the phi_hat mode states carry over."""
    cost = np.abs(lambdas[:, None] - state.lambdas[None, :])
    rows, columns = linear_sum_assignment(cost)
    order = np.empty_like(columns)
    order[columns] = rows
    lambdas, omegas = lambdas[order], omegas[order]
    _, state.phi_modes = pair_conjugates(lambdas, state.phi_modes)
    return lambdas, omegas


MODE_FIELDS = ('alpha', 'lambdas', 'omegas', 'phi_modes', 'W_acc', 'W_cal', 'fitted')


def _snapshot_modes(state):
    return {name: copy.copy(getattr(state, name)) for name in MODE_FIELDS}


def _restore_modes(state, snapshot):
    for name, value in snapshot.items():
        setattr(state, name, value)


def _refresh_modes(state):
    """Refit the eigenstructure from the H bank; False when the gate rejects it."""
    try:
        fit = fit_minimal_polynomial(state.H_bank, state.nbar)
        state.alpha = fit.alpha
        roots = roots_and_stability(fit.alpha)
        state.last_valid = roots.schur_stable
        if not roots.schur_stable:
            logger.debug("Step %d: fitted roots not Schur stable", state.k)
            return False
        lambdas, omegas = recover_modes(state.H_bank, roots.lambdas)
    except (IllConditionedFitError, ClusteredRootsError) as e:
        logger.debug("Step %d: %s", state.k, e)
        state.last_valid = False
        return False

    if state.fitted:
        lambdas, omegas = _align_modes(state, lambdas, omegas)
    state.lambdas, state.omegas = lambdas, omegas
    state.fitted = True
    return True


def _real_part(M, name):
    M = np.asarray(M)
    if np.iscomplexobj(M):
        residue = np.abs(M.imag).max(initial=0.0)
        if residue > IMAGINARY_RESIDUE * max(np.abs(M).max(initial=0.0), 1e-300):
            logger.debug("%s has imaginary residue %.3e", name, residue)
        M = M.real
    return M


def update_residual_stats(state, y, phi):
    """
    Advance the per-mode states phi_hat_{k,i} = lambda_i phi_hat_{k-1,i} + Omega_i phi_k
    and the running noise covariance W_k.

    Returns:
        tuple: (phi_hat, residual, W_k)
    """
    state.phi_modes = state.lambdas[:, None] * state.phi_modes + state.omegas @ phi
    state.phi_hat = _real_part(state.phi_modes.sum(axis=0), 'phi_hat')
    residual = y - state.phi_hat
    if not state.frozen:
        state.W_acc += np.outer(residual, residual)
        state.W_cal = state.W_acc / (state.k + 1)
    return state.phi_hat, residual, state.W_cal


def regularized_noise_cov(W):
    """W plus 1e-9 tr(W)/m I when its smallest eigenvalue falls below that floor."""
    m = W.shape[0]
    trace = float(np.trace(W))
    floor = W_REGULARIZATION * (trace / m if trace > 0 else 1.0)
    if linalg.eigvalsh(symmetrize(W))[0] < floor:
        return symmetrize(W) + floor * np.eye(m)
    return W


def _geometric_weights(lambdas):
    products = lambdas[:, None] * lambdas[None, :]
    if np.abs(products).max() >= 1.0 - PRODUCT_MARGIN:
        return None
    return 1.0 / (1.0 - products)


def modal_input_gramian(lambdas, omegas, weight):
    """sum_ij Omega_i^T weight Omega_j / (1 - lambda_i lambda_j), the modal form of sum_tau H_tau^T weight H_tau."""
    G = _geometric_weights(lambdas)
    if G is None:
        raise DegenerateCovarianceError("eigenvalue products too close to the unit circle")
    return symmetrize(_real_part(np.einsum('ij,iap,ab,jbq->pq', G, omegas, weight, omegas), 'modal gramian'))


def modal_output_cov(lambdas, omegas, U):
    """sum_ij Omega_i U Omega_j^T / (1 - lambda_i lambda_j), the modal form of sum_tau H_tau U H_tau^T."""
    G = _geometric_weights(lambdas)
    if G is None:
        raise DegenerateCovarianceError("eigenvalue products too close to the unit circle")
    return symmetrize(_real_part(np.einsum('ij,iap,pq,jbq->ab', G, omegas, U, omegas), 'modal output covariance'))


def update_design_estimates(state):
    """
    Rebuild P_k and X_k from the current modal estimates.

    Returns:
        bool: False (previous P_k, X_k kept) when the estimates fail the gate.
    """
    weights = state.weights
    try:
        W_inv = spd_inverse(regularized_noise_cov(state.W_cal), 'noise covariance estimate')
        P_k = modal_input_gramian(state.lambdas, state.omegas, W_inv)
        H0 = _real_part(state.omegas.sum(axis=0), 'H_0')
        X_k = symmetrize(
            modal_input_gramian(state.lambdas, state.omegas, weights.X_yy)
            + H0.T @ weights.X_yphi
            + weights.X_phiy @ H0
            + weights.X_phiphi
        )
        cholesky_lower(X_k, 'design matrix estimate X_k')
    except DegenerateCovarianceError as e:
        logger.debug("Step %d: design estimates rejected: %s", state.k, e)
        return False
    state.P_k, state.X_k = P_k, X_k
    return True


def update_optimum(state):
    """U_{k,*} from the latest P and X estimates; kept unchanged if X is not PD."""
    try:
        optimum = optimal_watermark(state.P_k, state.X_k, state.delta)
    except DegenerateCovarianceError as e:
        logger.debug("Step %d: optimum not updated: %s", state.k, e)
        return state.U_star
    state.U_star = optimum.U_star
    state.degenerate = optimum.degenerate
    return state.U_star


def estimate_np_statistic(state, y):
    """
    g_hat_k = (y - phi_hat)^T W_k^{-1} (y - phi_hat) - y^T (W_k + U_k)^{-1} y.

    Before the first accepted fit only the first quadratic form is reported.
    """
    W = regularized_noise_cov(state.W_cal)
    residual = y - state.phi_hat
    first = float(residual @ spd_inverse(W, 'noise covariance estimate') @ residual)
    if not state.fitted:
        return first
    try:
        state.U_cal = modal_output_cov(state.lambdas, state.omegas, state.U_star)
    except DegenerateCovarianceError as e:
        logger.debug("Step %d: keeping previous U_cal: %s", state.k, e)
    return first - float(y @ spd_inverse(W + state.U_cal, 'W_k + U_k') @ y)


def observe(state, y):
    """
    Consume the delivered output y_k for the watermark drawn by next_watermark.

    Returns:
        StepResult: (phi_hat_k, g_hat_k, gate) where gate is True when a fit
        was attempted at this step and accepted.
    """
    if state.last_phi is None:
        raise ValueError("next_watermark must be called before observe")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (state.m,):
        raise DimensionMismatchError(f"y has shape {y.shape}, expected ({state.m},)")
    phi = state.last_phi

    gate = False
    snapshot = None
    if not state.frozen:
        update_markov(state, y, phi)
        if state.k >= state.bank_size - 1 and state.k % state.fit_every == 0:
            snapshot = _snapshot_modes(state)
            gate = _refresh_modes(state)
            if not gate:
                state.gate_failures += 1

    update_residual_stats(state, y, phi)
    if gate and not update_design_estimates(state):
        # Rejected candidate: back to the previous modes, phi_hat and W_k redone with them.
        _restore_modes(state, snapshot)
        update_residual_stats(state, y, phi)
        gate = False
        state.gate_failures += 1
    g_hat = estimate_np_statistic(state, y)

    state.k += 1
    state.last_phi = None
    update_optimum(state)
    return StepResult(phi_hat=state.phi_hat, g_hat=g_hat, gate=gate)
