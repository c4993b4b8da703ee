import numpy as np
from scipy.stats import chi2


def covariance_two_sample_test(first, second):
    """
    Box's M test for equality of two covariance matrices.

    Args:
        first, second: samples with one observation per row.

    Returns:
        tuple: (statistic, p_value) with the chi-square approximation.
    """
    groups = [np.atleast_2d(np.asarray(sample, dtype=float)) for sample in (first, second)]
    dimension = groups[0].shape[1]
    if any(group.shape[1] != dimension for group in groups):
        raise ValueError("samples must have the same dimension")
    if any(group.shape[0] <= dimension for group in groups):
        raise ValueError("each sample needs more observations than dimensions")

    dofs = np.array([group.shape[0] - 1 for group in groups], dtype=float)
    covariances = [np.atleast_2d(np.cov(group, rowvar=False)) for group in groups]
    pooled = sum(dof * cov for dof, cov in zip(dofs, covariances)) / dofs.sum()

    logdets = [np.linalg.slogdet(cov)[1] for cov in covariances]
    M = dofs.sum() * np.linalg.slogdet(pooled)[1] - float(np.dot(dofs, logdets))
    correction = (
        (2 * dimension**2 + 3 * dimension - 1) / (6.0 * (dimension + 1))
        * (np.sum(1.0 / dofs) - 1.0 / dofs.sum())
    )
    statistic = M * (1.0 - correction)
    degrees = dimension * (dimension + 1) / 2
    return float(statistic), float(chi2.sf(statistic, degrees))
