"""Reference loss kernels on numpy arrays.

These are the contract implementations used by evaluation and tests; the
training path re-implements them on torch tensors and is checked against
these for equality.
"""

from __future__ import annotations

import numpy as np

from .masks import BinaryMask, ShapeError

DICE_EPS = 1.0
LOGIT_CLAMP = 50.0


def soft_dice(pred: np.ndarray, target: BinaryMask) -> float:
    """Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), eps = 1.

    `pred` holds per-pixel foreground probabilities in [0, 1].
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != target.bits.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target {target.bits.shape}")
    if pred.size and (pred.min() < 0.0 or pred.max() > 1.0):
        raise ValueError("prediction entries must lie in [0, 1]")
    t = target.bits.astype(np.float64)
    num = 2.0 * float((pred * t).sum()) + DICE_EPS
    den = float(pred.sum()) + float(t.sum()) + DICE_EPS
    return 1.0 - num / den


def bce_with_logits(logits: np.ndarray, target: BinaryMask) -> float:
    """Mean per-pixel binary cross-entropy, logits clamped to +/-50."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != target.bits.shape:
        raise ShapeError(f"logit shape {logits.shape} does not match target {target.bits.shape}")
    z = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    t = target.bits.astype(np.float64)
    # stable form: max(z,0) - z*t + log(1+exp(-|z|))
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean())
