"""Loss functions with analytic gradients.

All losses accept a single vector or a column batch and return the sum
over the batch.  ``LossValue.grad`` is the gradient with respect to the
prediction (the first representation for the pairwise losses).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

EPS = 1e-7
MAX_POSITIVE_WEIGHT = 20.0


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def _pair(a, b, what="inputs"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"{what} have mismatched shapes {a.shape} and {b.shape}")
    return a, b


def _weights_for(weights, target):
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != target.shape[0]:
        raise ConfigError(f"{w.shape[0]} positive weights for {target.shape[0]} label dims")
    if np.any(w < 1.0):
        raise ValidationError("positive weights must all be >= 1")
    return w if target.ndim == 1 else w[:, None]


def positive_weights(labels, cap=MAX_POSITIVE_WEIGHT):
    """Smoothed inverse tag frequency ``(zeros + 1) / (ones + 1)`` clipped to ``[1, cap]``.

    ``labels`` is a ``(d_c, n)`` binary matrix.
    """
    labels = np.asarray(labels, dtype=np.float64)
    ones = labels.sum(axis=1)
    zeros = labels.shape[1] - ones
    return np.clip((zeros + 1.0) / (ones + 1.0), 1.0, cap)


def wbce_loss(target, predicted, weights):
    """Weighted binary cross entropy; ``weights`` scales only the positive term.

    Predictions are clamped to ``[EPS, 1 - EPS]`` and the gradient is
    evaluated at the clamped point.
    """
    t, p = _pair(target, predicted, "target and prediction")
    w = _weights_for(weights, t)
    pc = np.clip(p, EPS, 1.0 - EPS)
    value = -np.sum(w * t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    grad = -w * t / pc + (1.0 - t) / (1.0 - pc)
    return LossValue(float(value), grad)


def bce_loss(target, predicted):
    t = np.asarray(target, dtype=np.float64)
    return wbce_loss(target, predicted, np.ones(t.shape[0]))


def _check_one_hot(t):
    cols = t if t.ndim == 2 else t[:, None]
    binary = np.all((cols == 0.0) | (cols == 1.0))
    if not binary or not np.all(cols.sum(axis=0) == 1.0):
        raise ValidationError("cross entropy target must be one-hot")


def ce_loss(target, predicted):
    """Cross entropy against a one-hot target.

    ``grad`` is w.r.t. the probabilities; use :func:`ce_logit_grad` when
    the prediction comes straight out of a softmax.
    """
    t, p = _pair(target, predicted, "target and prediction")
    _check_one_hot(t)
    pc = np.clip(p, EPS, 1.0)
    value = -np.sum(t * np.log(pc))
    return LossValue(float(value), -t / pc)


def ce_logit_grad(target, predicted):
    """Gradient of ``ce_loss(target, softmax(z))`` w.r.t. the logits ``z``."""
    t, p = _pair(target, predicted, "target and prediction")
    return p - t


def l1_loss(target, predicted):
    """Sum of absolute differences; subgradient uses ``sign(0) = 0``."""
    t, p = _pair(target, predicted, "original and reconstruction")
    diff = p - t
    return LossValue(float(np.abs(diff).sum()), np.sign(diff))


def l1_cross_recon_loss(original, reconstructed):
    return l1_loss(original, reconstructed)


def sim_loss(rep_x, rep_y):
    """Squared Euclidean distance; the gradient for ``rep_y`` is ``-grad``."""
    x, y = _pair(rep_x, rep_y, "representations")
    diff = x - y
    return LossValue(float(np.sum(diff * diff)), 2.0 * diff)


def dsim_loss(rep_x, rep_y, margin):
    """Hinge ``max(0, margin - ||x - y||^2)`` per pair; ``-grad`` for ``rep_y``."""
    if not margin > 0:
        raise ConfigError("margin must be positive")
    x, y = _pair(rep_x, rep_y, "representations")
    diff = x - y
    d2 = np.sum(diff * diff, axis=0)
    active = d2 < margin
    value = np.sum(np.where(active, margin - d2, 0.0))
    grad = np.where(active, -2.0 * diff, 0.0)
    return LossValue(float(value), grad)
