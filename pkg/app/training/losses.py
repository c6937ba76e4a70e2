"""
Cross-entropy and the two-branch multi-task loss
"""

import numpy as np

from app.errors import ShapeError, UsageError
from app.tensor import kernels
from app.tensor.tape import Tape, Value


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label] for a single logit vector."""
    row = np.asarray(logits, dtype=kernels.DTYPE)
    if row.ndim != 1:
        raise ShapeError(f"expected a logit vector, got shape {row.shape}")
    return float(kernels.cross_entropy_forward(row[np.newaxis], label))


def combine_losses(tape: Tape, loss_global: Value, loss_fusion: Value, lam: float) -> Value:
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must lie in [0, 1], got {lam}")
    return tape.weighted_sum((loss_global, loss_fusion), (lam, 1.0 - lam))


def multi_task_loss(
    tape: Tape, logits_global: Value, logits_fusion: Value, label: int, lam: float
) -> Value:
    """
    lam * CE(Y_g, label) + (1 - lam) * CE(Y_f, label), recorded on ``tape``.

    Args:
        tape: Tape both logits live on
        logits_global: Global-branch logits, (1, K)
        logits_fusion: Fusion logits, (1, K)
        label: True class
        lam: Weight of the global loss in [0, 1]
    """
    return combine_losses(
        tape,
        tape.cross_entropy(logits_global, label),
        tape.cross_entropy(logits_fusion, label),
        lam,
    )
