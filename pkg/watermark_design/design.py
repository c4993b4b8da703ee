"""
Module: design

Offline watermark design for a plant whose parameters are known.

The optimal watermark covariance maximises tr(U P) subject to the LQG budget
tr(U X) <= delta, where

    W = C Sigma C^T + R                        (output noise covariance)
    P = sum_tau H_tau^T W^{-1} H_tau
    X = sum_tau H_tau^T X_yy H_tau + H_0^T X_yphi + X_phiy H_0 + X_phiphi

The optimum is rank one, U* = z z^T, with z the top generalized eigenvector
of (P, X) scaled to z^T X z = delta.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg

from plant_management.exceptions import DegenerateCovarianceError, DimensionMismatchError
from plant_management.plant import lyapunov_solve, markov_parameter, symmetrize

logger = logging.getLogger(__name__)

DEGENERACY_GAP = 1e-9
BUDGET_TOLERANCE = 1e-8
CONSISTENCY_TOLERANCE = 1e-10
SINGULARITY_TOLERANCE = 1e-12


def cholesky_lower(M, name):
    """Lower Cholesky factor, or DegenerateCovarianceError if M is not PD."""
    try:
        return linalg.cholesky(symmetrize(M), lower=True)
    except linalg.LinAlgError as e:
        raise DegenerateCovarianceError(f"{name} is not positive definite") from e


def spd_inverse(M, name):
    """Inverse of a symmetric positive definite matrix, symmetrized."""
    factor = cholesky_lower(M, name)
    inverse = linalg.cho_solve((factor, True), np.eye(factor.shape[0]))
    return symmetrize(inverse)


@dataclass(frozen=True, eq=False)
class LqgWeights:
    """
    Blocks of the LQG weight matrix X over the stacked vector [y; phi].

    Attributes:
        X_yy (m x m), X_yphi (m x p), X_phiy (p x m), X_phiphi (p x p).
    """

    X_yy: np.ndarray
    X_yphi: np.ndarray
    X_phiy: np.ndarray
    X_phiphi: np.ndarray

    def __post_init__(self):
        for name in ('X_yy', 'X_yphi', 'X_phiy', 'X_phiphi'):
            value = np.array(getattr(self, name), dtype=float)
            if value.ndim == 0:
                value = value.reshape(1, 1)
            value.setflags(write=False)
            object.__setattr__(self, name, value)

        m, p = self.X_yy.shape[0], self.X_phiphi.shape[0]
        if self.X_yy.shape != (m, m) or self.X_phiphi.shape != (p, p):
            raise DimensionMismatchError("X_yy and X_phiphi must be square")
        if self.X_yphi.shape != (m, p) or self.X_phiy.shape != (p, m):
            raise DimensionMismatchError(
                f"cross weights must be {m}x{p} and {p}x{m}, "
                f"got {self.X_yphi.shape} and {self.X_phiy.shape}"
            )
        if not np.allclose(self.X_phiy, self.X_yphi.T, rtol=0.0, atol=1e-12):
            raise DegenerateCovarianceError("X_phiy must equal X_yphi transposed")
        cholesky_lower(self.X, 'LQG weight matrix X')

    @classmethod
    def identity(cls, m, p):
        return cls(
            X_yy=np.eye(m),
            X_yphi=np.zeros((m, p)),
            X_phiy=np.zeros((p, m)),
            X_phiphi=np.eye(p),
        )

    @classmethod
    def from_matrix(cls, X, m):
        """Split an assembled (m+p) x (m+p) weight matrix."""
        X = np.asarray(X, dtype=float)
        return cls(X_yy=X[:m, :m], X_yphi=X[:m, m:], X_phiy=X[m:, :m], X_phiphi=X[m:, m:])

    @property
    def m(self):
        return self.X_yy.shape[0]

    @property
    def p(self):
        return self.X_phiphi.shape[0]

    @property
    def X(self):
        return np.block([[self.X_yy, self.X_yphi], [self.X_phiy, self.X_phiphi]])

    def schur_complement(self):
        """X_phiphi - X_phiy X_yy^{-1} X_yphi, a lower bound on the design matrix X."""
        return symmetrize(self.X_phiphi - self.X_phiy @ linalg.solve(self.X_yy, self.X_yphi, assume_a='pos'))


class OptimalWatermark(NamedTuple):
    U_star: np.ndarray
    z: np.ndarray
    lambda_max: float
    degenerate: bool


class LqgCost(NamedTuple):
    J0: float
    delta_J: float


@dataclass(frozen=True, eq=False)
class WatermarkDesign:
    """
    Complete offline design for one plant, weight matrix and budget.

    Attributes:
        U_star: optimal watermark covariance (p x p, rank one).
        z: optimal direction, U_star = z z^T.
        lambda_max: top generalized eigenvalue of (P_mat, X_mat).
        P_mat, X_mat: the design matrices (p x p).
        U_cal: output covariance caused by U_star (m x m).
        W_cal: output noise covariance (m x m).
        delta: LQG budget.
        degenerate: the top eigenvalue was not unique.
    """

    U_star: np.ndarray
    z: np.ndarray
    lambda_max: float
    P_mat: np.ndarray
    X_mat: np.ndarray
    U_cal: np.ndarray
    W_cal: np.ndarray
    delta: float
    degenerate: bool = False


def noise_output_cov(model):
    """
    W = C Sigma C^T + R, the covariance of the watermark-free output.

    Raises:
        DegenerateCovarianceError: if W is singular.
    """
    W = symmetrize(model.C @ model.steady_state_cov @ model.C.T + model.R)
    eigenvalues = linalg.eigvalsh(W)
    if eigenvalues[0] <= SINGULARITY_TOLERANCE * max(1.0, eigenvalues[-1]):
        raise DegenerateCovarianceError(
            f"degenerate noise covariance: smallest eigenvalue {eigenvalues[0]:.3e}"
        )
    return W


def watermark_output_cov(model, U):
    """U_cal = sum_tau H_tau U H_tau^T, via C (sum_tau A^tau B U B^T A^tau^T) C^T."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape != (model.p, model.p):
        raise DimensionMismatchError(f"U has shape {U.shape}, expected ({model.p}, {model.p})")
    state_cov = lyapunov_solve(model.A, model.B @ U @ model.B.T)
    return symmetrize(model.C @ state_cov @ model.C.T)


def _output_gramian_sum(model, weight):
    """sum_tau H_tau^T weight H_tau, from the recursion S <- A^T S A + C^T weight C."""
    S = lyapunov_solve(model.A.T, model.C.T @ weight @ model.C)
    return symmetrize(model.B.T @ S @ model.B)


def build_P(model, W):
    """P = sum_tau H_tau^T W^{-1} H_tau."""
    return _output_gramian_sum(model, spd_inverse(W, 'noise covariance W'))


def build_X(model, weights):
    """
    X = sum_tau H_tau^T X_yy H_tau + H_0^T X_yphi + X_phiy H_0 + X_phiphi.

    The result is checked against its lower bound X_phiphi - X_phiy X_yy^{-1} X_yphi.
    """
    H0 = markov_parameter(model, 0)
    X_mat = symmetrize(
        _output_gramian_sum(model, weights.X_yy)
        + H0.T @ weights.X_yphi
        + weights.X_phiy @ H0
        + weights.X_phiphi
    )
    gap = linalg.eigvalsh(X_mat - weights.schur_complement())[0]
    if gap < -BUDGET_TOLERANCE * max(1.0, np.abs(X_mat).max()):
        raise DegenerateCovarianceError(
            f"design matrix X falls below its Schur-complement bound (gap {gap:.3e})"
        )
    return X_mat


def _tie_break_direction(X_mat, basis):
    """
    Canonical vector in a degenerate top eigenspace.

    ``basis`` holds X-orthonormal columns spanning the eigenspace. The result
    is the X-orthogonal projection of the first coordinate axis with a
    non-negligible component, so e.g. P = 0 yields the direction e_1.
    """
    projector = basis @ basis.T @ X_mat
    for column in projector.T:
        if np.linalg.norm(column) > 1e-8:
            return column
    return basis[:, 0]


def optimal_watermark(P_mat, X_mat, delta):
    """
    Maximise tr(U P) subject to tr(U X) <= delta over PSD U.

    The generalized eigenproblem P z = lambda X z is reduced with X = L L^T to
    the symmetric problem L^{-1} P L^{-T}. The sign of z makes its largest
    magnitude entry positive. A top eigenvalue that is not unique (relative
    gap 1e-9) is resolved by a deterministic tie-break and flagged.

    Returns:
        OptimalWatermark: (U_star, z, lambda_max, degenerate).

    Raises:
        ValueError: if delta is not positive.
        DegenerateCovarianceError: if X is not positive definite.
    """
    if not delta > 0:
        raise ValueError(f"budget delta must be positive, got {delta}")
    P_mat = symmetrize(np.atleast_2d(np.asarray(P_mat, dtype=float)))
    X_mat = symmetrize(np.atleast_2d(np.asarray(X_mat, dtype=float)))
    if P_mat.shape != X_mat.shape:
        raise DimensionMismatchError(f"P has shape {P_mat.shape} but X has {X_mat.shape}")

    factor = cholesky_lower(X_mat, 'design matrix X')
    reduced = linalg.solve_triangular(factor, linalg.solve_triangular(factor, P_mat, lower=True).T, lower=True)
    eigenvalues, vectors = linalg.eigh(symmetrize(reduced))
    lambda_max = float(eigenvalues[-1])

    top = eigenvalues >= lambda_max - DEGENERACY_GAP * abs(lambda_max)
    # back-transform: columns are X-orthonormal generalized eigenvectors
    basis = linalg.solve_triangular(factor, vectors[:, top], lower=True, trans='T')
    degenerate = bool(np.count_nonzero(top) > 1)
    if degenerate:
        logger.warning(
            "Degenerate optimum: top generalized eigenvalue %.6g has multiplicity %d",
            lambda_max, np.count_nonzero(top),
        )
        direction = _tie_break_direction(X_mat, basis)
    else:
        direction = basis[:, 0]

    z = direction * np.sqrt(delta / float(direction @ X_mat @ direction))
    if z[np.argmax(np.abs(z))] < 0:
        z = -z
    return OptimalWatermark(U_star=np.outer(z, z), z=z, lambda_max=lambda_max, degenerate=degenerate)


def expected_kl(U_cal, W):
    """
    Expected KL divergence between the replayed and the authentic output
    distributions: tr(U W^{-1}) - 1/2 logdet(I + U W^{-1}).
    """
    trace, logdet = _whitened_trace_logdet(U_cal, W)
    return trace - 0.5 * logdet


def kl_bounds(U_cal, W):
    """
    Lower and upper bounds of the expected KL divergence:
    1/2 t <= KL <= t - 1/2 log(1 + t) with t = tr(U W^{-1}).
    """
    trace, _ = _whitened_trace_logdet(U_cal, W)
    return 0.5 * trace, trace - 0.5 * np.log1p(trace)


def _whitened_trace_logdet(U_cal, W):
    factor = cholesky_lower(W, 'noise covariance W')
    whitened = linalg.solve_triangular(
        factor, linalg.solve_triangular(factor, np.atleast_2d(U_cal), lower=True).T, lower=True
    )
    eigenvalues = np.clip(linalg.eigvalsh(symmetrize(whitened)), 0.0, None)
    return float(np.sum(eigenvalues)), float(np.sum(np.log1p(eigenvalues)))


def lqg_cost(model, weights, U, W):
    """
    Stationary LQG cost split into J0 = tr(X_yy W) and the watermark's
    increase delta_J = tr(X S), S = [[U_cal, H_0 U], [U H_0^T, U]].

    delta_J is cross-checked against tr(U X_mat).
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    H0 = markov_parameter(model, 0)
    S = np.block([
        [watermark_output_cov(model, U), H0 @ U],
        [U @ H0.T, U],
    ])
    J0 = float(np.trace(weights.X_yy @ W))
    delta_J = float(np.trace(weights.X @ S))

    via_design = float(np.trace(U @ build_X(model, weights)))
    if abs(delta_J - via_design) > CONSISTENCY_TOLERANCE * max(1.0, abs(delta_J)):
        logger.warning(
            "LQG increase %.12g disagrees with tr(U X) = %.12g", delta_J, via_design
        )
    return LqgCost(J0=J0, delta_J=delta_J)


def resolve_budget(model, weights, delta=None, delta_frac=None):
    """
    Absolute budget from either ``delta`` or a fraction of the optimal cost J0.
    """
    if (delta is None) == (delta_frac is None):
        raise ValueError("exactly one of delta and delta_frac must be given")
    if delta is not None:
        if not delta > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        return float(delta)
    if not 0.0 < delta_frac <= 1.0:
        raise ValueError(f"delta_frac must lie in (0, 1], got {delta_frac}")
    J0 = float(np.trace(weights.X_yy @ noise_output_cov(model)))
    return delta_frac * J0


def design_watermark(model, weights, delta):
    """Run the full offline pipeline and return a WatermarkDesign."""
    W = noise_output_cov(model)
    P_mat = build_P(model, W)
    X_mat = build_X(model, weights)
    optimum = optimal_watermark(P_mat, X_mat, delta)
    U_cal = watermark_output_cov(model, optimum.U_star)
    logger.debug("Offline design: lambda_max=%.6g delta=%.6g", optimum.lambda_max, delta)
    return WatermarkDesign(
        U_star=optimum.U_star,
        z=optimum.z,
        lambda_max=optimum.lambda_max,
        P_mat=P_mat,
        X_mat=X_mat,
        U_cal=U_cal,
        W_cal=W,
        delta=float(delta),
        degenerate=optimum.degenerate,
    )
