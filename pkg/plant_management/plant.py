"""
Module: plant

Discrete-time linear time-invariant plant driven by a watermark input:

    x_k = A x_{k-1} + B phi_k + w_k,   w_k ~ N(0, Q)
    y_k = C x_k + v_k,                 v_k ~ N(0, R)

Besides simulation this module provides the steady-state statistics every
other part of the project is built on: the Lyapunov solution Sigma, the
Markov parameters H_tau = C A^tau B and the modal expansion
H_tau = sum_i lambda_i^tau Omega_i.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from .exceptions import (
    DimensionMismatchError,
    ModelInvariantError,
    UnstableClosedLoopError,
    UnstableSystemError,
)

logger = logging.getLogger(__name__)

LYAPUNOV_TOLERANCE = 1e-12
LYAPUNOV_MAX_ITERATIONS = 1_000_000
LYAPUNOV_RESIDUAL_BOUND = 1e-10
RANK_TOLERANCE = 1e-8
PSD_TOLERANCE = 1e-12
EIGENVALUE_MERGE_TOLERANCE = 1e-8


def symmetrize(M):
    """Return the symmetric part of a square matrix."""
    M = np.asarray(M)
    return (M + M.T) / 2


def spectral_radius(A):
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(linalg.eigvals(A))))


def numerical_rank(M):
    """Rank with singular values below 1e-8 * sigma_max treated as zero."""
    singular_values = linalg.svdvals(np.asarray(M, dtype=float))
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return 0
    return int(np.sum(singular_values > RANK_TOLERANCE * singular_values[0]))


def psd_factor(M, name='matrix'):
    """
    Return F with F @ F.T == M for a symmetric PSD matrix.

    Eigenvalues in [-1e-12 * trace, 0) are rounding noise and clamped to zero;
    anything more negative is rejected.
    """
    M = symmetrize(np.asarray(M, dtype=float))
    eigenvalues, vectors = linalg.eigh(M)
    floor = -PSD_TOLERANCE * max(float(np.trace(M)), 0.0)
    if eigenvalues.size and eigenvalues[0] < floor:
        raise ModelInvariantError(
            f"{name} is not positive semidefinite "
            f"(smallest eigenvalue {eigenvalues[0]:.3e})"
        )
    return vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def lyapunov_solve(A, Q):
    """
    Solve Sigma = A Sigma A^T + Q for a strictly stable A.

    Fixed-point iteration in doubling form: after j rounds the iterate is the
    partial sum of A^t Q (A^T)^t over t < 2**j. Stops once the increment is
    below 1e-12 relative to Sigma.

    Raises:
        UnstableSystemError: if the spectral radius of A is not below one or
            the iteration does not settle.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or Q.shape != A.shape:
        raise DimensionMismatchError(
            f"Lyapunov equation needs square A and Q of equal size, "
            f"got {A.shape} and {Q.shape}"
        )

    rho = spectral_radius(A)
    if rho >= 1.0:
        raise UnstableSystemError(f"unstable system: spectral radius {rho:.6g} >= 1")

    sigma = symmetrize(Q)
    power = A.copy()
    for _ in range(LYAPUNOV_MAX_ITERATIONS):
        increment = power @ sigma @ power.T
        sigma = sigma + increment
        power = power @ power
        if np.linalg.norm(increment) <= LYAPUNOV_TOLERANCE * max(1.0, np.linalg.norm(sigma)):
            break
    else:
        raise UnstableSystemError("unstable system: Lyapunov iteration did not converge")

    sigma = symmetrize(sigma)
    residual = np.linalg.norm(sigma - A @ sigma @ A.T - Q)
    if residual > LYAPUNOV_RESIDUAL_BOUND * max(1.0, np.linalg.norm(sigma)):
        raise UnstableSystemError(
            f"unstable system: Lyapunov residual {residual:.3e} too large "
            f"(spectral radius {rho:.6g})"
        )
    return sigma


def _as_matrix(value, name):
    matrix = np.array(value, dtype=float)
    if matrix.ndim == 0:
        matrix = matrix.reshape(1, 1)
    if matrix.ndim != 2:
        raise DimensionMismatchError(f"{name} must be a matrix, got shape {matrix.shape}")
    matrix.setflags(write=False)
    return matrix


@dataclass(frozen=True, eq=False)
class PlantModel:
    """
    The true plant (A, B, C, Q, R).

    Attributes:
        A (n x n): state transition.
        B (n x p): watermark input matrix.
        C (m x n): output matrix.
        Q (n x n): process-noise covariance.
        R (m x m): measurement-noise covariance.

    Construction only checks shapes; ``validate()`` checks stability, noise
    covariances and observability/controllability, so intermediate models
    (e.g. a closed-loop augmentation) can exist without being identifiable.
    Arrays are read-only and the instance can be shared between runs.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ('A', 'B', 'C', 'Q', 'R'):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))

        n = self.A.shape[0]
        expected = {
            'A': (n, n),
            'B': (n, self.B.shape[1]),
            'C': (self.C.shape[0], n),
            'Q': (n, n),
            'R': (self.C.shape[0], self.C.shape[0]),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatchError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if min(self.n, self.m, self.p) < 1:
            raise DimensionMismatchError("dimensions n, m, p must be positive")

    @classmethod
    def scalar(cls, a, b=1.0, c=1.0, q=1.0, r=1.0):
        """Single-state, single-input, single-output plant."""
        return cls(A=[[a]], B=[[b]], C=[[c]], Q=[[q]], R=[[r]])

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.C.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    def __repr__(self):
        return f'PlantModel(n={self.n}, m={self.m}, p={self.p}, rho={self.spectral_radius:.4f})'

    @cached_property
    def spectral_radius(self):
        return spectral_radius(self.A)

    @cached_property
    def steady_state_cov(self):
        """Sigma solving Sigma = A Sigma A^T + Q."""
        return lyapunov_solve(self.A, self.Q)

    @cached_property
    def steady_state_factor(self):
        return psd_factor(self.steady_state_cov, 'Sigma')

    @cached_property
    def process_noise_factor(self):
        return psd_factor(self.Q, 'Q')

    @cached_property
    def measurement_noise_factor(self):
        return psd_factor(self.R, 'R')

    def observability_matrix(self):
        blocks = [self.C]
        for _ in range(self.n - 1):
            blocks.append(blocks[-1] @ self.A)
        return np.vstack(blocks)

    def controllability_matrix(self):
        blocks = [self.B]
        for _ in range(self.n - 1):
            blocks.append(self.A @ blocks[-1])
        return np.hstack(blocks)

    def is_observable(self):
        return numerical_rank(self.observability_matrix()) == self.n

    def is_controllable(self):
        return numerical_rank(self.controllability_matrix()) == self.n

    def validate(self):
        """
        Check the model invariants in order and report the first violation.

        Raises:
            ModelInvariantError: naming the violated invariant.
        """
        if self.spectral_radius >= 1.0:
            raise ModelInvariantError(
                f"A is not strictly stable (spectral radius {self.spectral_radius:.6g})"
            )
        for name in ('Q', 'R'):
            matrix = getattr(self, name)
            if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(matrix).max())):
                raise ModelInvariantError(f"{name} is not symmetric")
            psd_factor(matrix, name)
        if not self.is_observable():
            raise ModelInvariantError("(A, C) is not observable")
        if not self.is_controllable():
            raise ModelInvariantError("(A, B) is not controllable")
        return self


def markov_parameter(model, tau):
    """H_tau = C A^tau B."""
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    return model.C @ np.linalg.matrix_power(model.A, tau) @ model.B


@dataclass
class SimState:
    """
    Single-owner simulation state.

    ``x`` holds the most recent state x_{k-1}; ``k`` counts the steps taken.
    Process and measurement noise come from their own generators so each
    role's draws are independent of the other.
    """

    x: np.ndarray
    process_rng: np.random.Generator
    measurement_rng: np.random.Generator
    k: int = 0

    @classmethod
    def initialize(cls, model, process_rng, measurement_rng=None):
        """Start in steady state: x_{-1} ~ N(0, Sigma)."""
        if measurement_rng is None:
            measurement_rng = process_rng
        x = model.steady_state_factor @ process_rng.standard_normal(model.n)
        return cls(x=x, process_rng=process_rng, measurement_rng=measurement_rng)

    @classmethod
    def from_seed(cls, model, seed):
        process_seed, measurement_seed = np.random.SeedSequence(seed).spawn(2)
        return cls.initialize(
            model,
            np.random.default_rng(process_seed),
            np.random.default_rng(measurement_seed),
        )


def step(state, model, phi):
    """
    Advance the plant one step with watermark ``phi`` and return y_k.

    Noise is drawn even when Q or R is zero so that the random streams stay
    aligned across configurations.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if phi.shape != (model.p,):
        raise DimensionMismatchError(f"watermark has shape {phi.shape}, expected ({model.p},)")
    if state.x.shape != (model.n,):
        raise DimensionMismatchError(f"state has shape {state.x.shape}, expected ({model.n},)")

    w = model.process_noise_factor @ state.process_rng.standard_normal(model.n)
    state.x = model.A @ state.x + model.B @ phi + w
    v = model.measurement_noise_factor @ state.measurement_rng.standard_normal(model.m)
    state.k += 1
    return model.C @ state.x + v


def closed_loop_augment(model, K, L):
    """
    Rewrite a plant under estimator/controller feedback as an open-loop model.

    With u_k = L xhat_k and xhat_{k+1} = A xhat_k + K (y_{k+1} - C A xhat_k)
    (no B u term, as in the source formulation), the augmented state is
    [x; xhat] and the augmented output is [y; u]. The estimator's noise terms
    K C w and K v enter the augmented process noise; the correlation between
    K v_{k+1} and the output noise v_{k+1} is not representable in a
    PlantModel and is dropped.

    Args:
        model: plant supplying A, B, C, Q, R.
        K: n x m estimator gain.
        L: p x n controller gain.

    Raises:
        UnstableClosedLoopError: if the augmented transition matrix is not
            strictly stable.
    """
    A, B, C, Q, R = model.A, model.B, model.C, model.Q, model.R
    n, m, p = model.n, model.m, model.p
    K = np.asarray(K, dtype=float).reshape(n, m)
    L = np.asarray(L, dtype=float).reshape(p, n)

    KC = K @ C
    A_aug = np.block([
        [A, B @ L],
        [KC @ A, A - KC @ A + KC @ B @ L],
    ])
    rho = spectral_radius(A_aug)
    if rho >= 1.0:
        raise UnstableClosedLoopError(f"unstable closed loop: spectral radius {rho:.6g} >= 1")

    B_aug = np.vstack([B, KC @ B])
    C_aug = np.block([
        [C, np.zeros((m, n))],
        [np.zeros((p, n)), L],
    ])
    Q_aug = np.block([
        [Q, Q @ KC.T],
        [KC @ Q, KC @ Q @ KC.T + K @ R @ K.T],
    ])
    R_aug = np.block([
        [R, np.zeros((m, p))],
        [np.zeros((p, m)), np.zeros((p, p))],
    ])
    logger.debug("Closed-loop augmentation has spectral radius %.6g", rho)
    return PlantModel(A=A_aug, B=B_aug, C=C_aug, Q=symmetrize(Q_aug), R=R_aug)


def pair_conjugates(lambdas, omegas):
    """
    Make a modal expansion closed under complex conjugation.

    Real eigenvalues get real residues; each complex eigenvalue is averaged
    with the conjugate of its partner so that sum_i lambda_i^tau Omega_i is
    real for every tau.
    """
    lambdas = np.asarray(lambdas, dtype=complex).copy()
    omegas = np.asarray(omegas, dtype=complex).copy()
    scale = max(1.0, float(np.max(np.abs(lambdas)))) if lambdas.size else 1.0
    done = np.zeros(lambdas.size, dtype=bool)
    for i in range(lambdas.size):
        if done[i]:
            continue
        if abs(lambdas[i].imag) <= 1e-12 * scale:
            lambdas[i] = lambdas[i].real
            omegas[i] = omegas[i].real
            done[i] = True
            continue
        distances = np.abs(lambdas - np.conj(lambdas[i]))
        distances[done] = np.inf
        distances[i] = np.inf
        j = int(np.argmin(distances))
        lam = (lambdas[i] + np.conj(lambdas[j])) / 2
        omega = (omegas[i] + np.conj(omegas[j])) / 2
        lambdas[i], lambdas[j] = lam, np.conj(lam)
        omegas[i], omegas[j] = omega, np.conj(omega)
        done[i] = done[j] = True
    return lambdas, omegas


def modal_decomposition(model):
    """
    Distinct eigenvalues lambda_i of A and residues Omega_i = C P_i B, where
    P_i is the spectral projector of lambda_i, so that
    H_tau = sum_i lambda_i^tau Omega_i.

    Returns:
        tuple: (lambdas, omegas) with shapes (n_distinct,) and
        (n_distinct, m, p), sorted with conjugate pairs adjacent.

    Raises:
        ModelInvariantError: if A is not diagonalizable.
    """
    eigenvalues, right = linalg.eig(model.A)
    if np.linalg.cond(right) > 1e12:
        raise ModelInvariantError("A is not diagonalizable")
    left = linalg.inv(right)

    order = np.lexsort((eigenvalues.imag, eigenvalues.real))
    groups = []
    for index in order:
        value = eigenvalues[index]
        for group in groups:
            if abs(eigenvalues[group[0]] - value) <= EIGENVALUE_MERGE_TOLERANCE * max(1.0, abs(value)):
                group.append(index)
                break
        else:
            groups.append([index])

    lambdas = np.array([eigenvalues[group].mean() for group in groups])
    omegas = np.array([
        model.C @ right[:, group] @ left[group, :] @ model.B for group in groups
    ])
    return pair_conjugates(lambdas, omegas)
