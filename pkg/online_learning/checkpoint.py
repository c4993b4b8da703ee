"""
Versioned JSON checkpoints of a LearnerState, for resuming long runs.

Matrices are row-major nested lists; complex entries are [re, im] pairs.
"""

import json
import logging
from collections import deque
from pathlib import Path

import numpy as np

from plant_management.exceptions import WatermarkError
from plant_management.utils import first_error_message
from watermark_design.design import LqgWeights

from .learner import LearnerState

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(WatermarkError):
    pass


def encode_complex(array):
    array = np.asarray(array, dtype=complex)
    return np.stack([array.real, array.imag], axis=-1).tolist()


def decode_complex(data):
    pairs = np.asarray(data, dtype=float)
    if pairs.ndim == 0 or pairs.shape[-1] != 2:
        raise CheckpointError("complex arrays must be stored as [re, im] pairs")
    return pairs[..., 0] + 1j * pairs[..., 1]


def state_to_document(state):
    if state.last_phi is not None:
        raise CheckpointError("cannot checkpoint between next_watermark and observe")
    return {
        'version': CHECKPOINT_VERSION,
        'nbar': state.nbar,
        'beta': state.beta,
        'delta': state.delta,
        'fit_every': state.fit_every,
        'k': state.k,
        'weights': state.weights.X.tolist(),
        'm': state.m,
        'H_bank': state.H_bank.tolist(),
        'alpha': np.asarray(state.alpha, dtype=float).tolist(),
        'lambdas': encode_complex(state.lambdas),
        'omegas': encode_complex(state.omegas),
        'phi_modes': encode_complex(state.phi_modes),
        'W_acc': state.W_acc.tolist(),
        'W_cal': np.asarray(state.W_cal).tolist(),
        'P_k': state.P_k.tolist(),
        'X_k': state.X_k.tolist(),
        'U_cal': state.U_cal.tolist(),
        'U_star': state.U_star.tolist(),
        'weighted_history': [vector.tolist() for vector in state.weighted_history],
        'flags': {
            'last_valid': state.last_valid,
            'fitted': state.fitted,
            'frozen': state.frozen,
            'degenerate': state.degenerate,
        },
        'gate_failures': state.gate_failures,
        'rng': state.rng.bit_generator.state,
    }


def _restore_rng(saved):
    try:
        bit_generator = getattr(np.random, saved['bit_generator'])()
        bit_generator.state = saved
    except (AttributeError, TypeError, ValueError, KeyError) as e:
        raise CheckpointError(f"cannot restore random generator: {e}") from e
    return np.random.Generator(bit_generator)


def state_from_document(document):
    """
    Rebuild a LearnerState from a checkpoint document.

    Raises:
        CheckpointError: on version mismatch or malformed content.
    """
    from api.serializers import LearnerCheckpointSerializer

    if document.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {document.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    serializer = LearnerCheckpointSerializer(data=document)
    if not serializer.is_valid():
        raise CheckpointError(first_error_message(serializer.errors))
    data = serializer.validated_data

    nbar, m = data['nbar'], data['m']
    weights = LqgWeights.from_matrix(data['weights'], m)
    p = weights.p
    try:
        H_bank = np.asarray(data['H_bank'], dtype=float).reshape(3 * nbar - 1, m, p)
        lambdas = decode_complex(data['lambdas']).reshape(nbar)
        omegas = decode_complex(data['omegas']).reshape(nbar, m, p)
        phi_modes = decode_complex(data['phi_modes']).reshape(nbar, m)
        history = [np.asarray(vector, dtype=float).reshape(p) for vector in data['weighted_history']]
    except ValueError as e:
        raise CheckpointError(f"checkpoint arrays have inconsistent shapes: {e}") from e

    flags = data['flags']
    return LearnerState(
        nbar=nbar,
        beta=data['beta'],
        delta=data['delta'],
        weights=weights,
        rng=_restore_rng(data['rng']),
        fit_every=data['fit_every'],
        k=data['k'],
        H_bank=H_bank,
        alpha=np.asarray(data['alpha'], dtype=float),
        lambdas=lambdas,
        omegas=omegas,
        phi_modes=phi_modes,
        W_acc=data['W_acc'],
        W_cal=data['W_cal'],
        P_k=data['P_k'],
        X_k=data['X_k'],
        U_cal=data['U_cal'],
        U_star=data['U_star'],
        last_valid=flags.get('last_valid', False),
        fitted=flags.get('fitted', False),
        frozen=flags.get('frozen', False),
        degenerate=flags.get('degenerate', False),
        gate_failures=data['gate_failures'],
        weighted_history=deque(history, maxlen=3 * nbar - 1),
    )


def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state_to_document(state)))
    logger.info("Saved learner checkpoint at step %d to %s", state.k, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not valid JSON: {e}") from e
    state = state_from_document(document)
    logger.info("Loaded learner checkpoint at step %d from %s", state.k, path)
    return state
