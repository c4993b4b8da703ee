import json
import logging
from pathlib import Path

import numpy as np
from scipy import linalg

from .exceptions import ModelInvariantError
from .plant import PlantModel

logger = logging.getLogger(__name__)

RANDOM_SYSTEM_RETRIES = 100
EIGENVALUE_GAP = 1e-6


def first_error_message(errors):
    """
    Flatten DRF serializer errors into the first human-readable message,
    prefixed by the offending field.
    """
    if isinstance(errors, dict):
        for field, value in errors.items():
            message = first_error_message(value)
            if field == 'non_field_errors':
                return message
            return f"{field}: {message}"
    if isinstance(errors, (list, tuple)) and errors:
        return first_error_message(errors[0])
    return str(errors)


def parse_model_document(document):
    """
    Validate a model document (dict) and build the plant and LQG weights.

    Returns:
        tuple: (PlantModel, LqgWeights or None)

    Raises:
        ModelInvariantError: describing the first violated check.
    """
    from api.serializers import PlantModelSerializer

    serializer = PlantModelSerializer(data=document)
    if not serializer.is_valid():
        message = first_error_message(serializer.errors)
        logger.error("Rejected model document: %s", message)
        raise ModelInvariantError(message)
    return serializer.save()


def load_model_file(path):
    """
    Load a plant from a JSON model file.

    The document holds the integers n, m, p and the matrices A, B, C, Q, R as
    row-major nested arrays; an optional (m+p) x (m+p) matrix X gives the LQG
    weights.
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelInvariantError(f"{path} is not valid JSON: {e}") from e
    model, weights = parse_model_document(document)
    logger.info("Loaded %r from %s", model, path)
    return model, weights


def model_to_document(model, weights=None):
    document = {
        'n': model.n,
        'm': model.m,
        'p': model.p,
        'A': model.A.tolist(),
        'B': model.B.tolist(),
        'C': model.C.tolist(),
        'Q': model.Q.tolist(),
        'R': model.R.tolist(),
    }
    if weights is not None:
        document['X'] = weights.X.tolist()
    return document


def dump_model_file(model, path, weights=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_document(model, weights), indent=2))
    return path


def _random_system_defect(model):
    """Return why a candidate random system is unusable, or None."""
    try:
        model.validate()
    except ModelInvariantError as e:
        return str(e)

    eigenvalues = linalg.eigvals(model.A)
    for i in range(model.n):
        for j in range(i + 1, model.n):
            if abs(eigenvalues[i] - eigenvalues[j]) <= EIGENVALUE_GAP:
                return "repeated eigenvalues"
            conjugates = abs(eigenvalues[i] - np.conj(eigenvalues[j])) <= EIGENVALUE_GAP
            if not conjugates and abs(abs(eigenvalues[i]) - abs(eigenvalues[j])) <= EIGENVALUE_GAP:
                return "eigenvalues share a modulus"
    return None


def generate_random_system(seed, n, m, p, rho_target, max_retries=RANDOM_SYSTEM_RETRIES):
    """
    Draw a random stable plant with Q = R = I.

    Entries of A, B, C are i.i.d. standard normal and A is rescaled so its
    spectral radius equals ``rho_target``. Candidates that are not observable,
    not controllable, have repeated eigenvalues or non-conjugate eigenvalues
    of equal modulus are redrawn.

    Raises:
        ValueError: if rho_target is outside (0, 1).
        ModelInvariantError: if no admissible system is found in
            ``max_retries`` draws.
    """
    if not 0.0 < rho_target < 1.0:
        raise ValueError(f"rho_target must lie in (0, 1), got {rho_target}")

    rng = np.random.default_rng(seed)
    for attempt in range(1, max_retries + 1):
        A = rng.standard_normal((n, n))
        B = rng.standard_normal((n, p))
        C = rng.standard_normal((m, n))
        radius = np.max(np.abs(linalg.eigvals(A)))
        if radius == 0.0:
            continue
        model = PlantModel(A=A * (rho_target / radius), B=B, C=C, Q=np.eye(n), R=np.eye(m))

        defect = _random_system_defect(model)
        if defect is None:
            logger.info(
                "Generated random system n=%d m=%d p=%d rho=%.4f (seed %s, attempt %d)",
                n, m, p, rho_target, seed, attempt,
            )
            return model
        logger.debug("Random system attempt %d rejected: %s", attempt, defect)

    raise ModelInvariantError(
        f"no admissible random system after {max_retries} attempts "
        f"(n={n}, m={m}, p={p}, rho={rho_target})"
    )


def watermark_setting(name, default):
    """Numerical default from settings.WATERMARK, falling back to ``default``."""
    from django.conf import settings

    return getattr(settings, 'WATERMARK', {}).get(name, default)


def default_delta_fraction(model):
    """
    Budget fraction of J0 for runs that name neither delta nor delta_frac.

    Plants with n * m at or above LARGE_MODEL_SIZE get the smaller
    LARGE_MODEL_DELTA_FRACTION.
    """
    if model.n * model.m >= watermark_setting('LARGE_MODEL_SIZE', 64):
        return watermark_setting('LARGE_MODEL_DELTA_FRACTION', 0.05)
    return watermark_setting('DEFAULT_DELTA_FRACTION', 0.1)
