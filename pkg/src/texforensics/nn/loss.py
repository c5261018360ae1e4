"""Binary cross-entropy, averaged over the batch."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check(a, y):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.shape != y.shape or a.size == 0:
        raise ShapeMismatch(f"predictions {a.shape} and labels {y.shape} must be equal, non-empty")
    return a, y


def bce_loss(p, y):
    """Mean BCE on probabilities; returns ``(loss, dloss/dp)``.

    Terms whose coefficient is zero are dropped, so ``p == y`` gives 0
    exactly even at the endpoints.
    """
    shape = np.shape(p)
    p, y = _check(p, y)
    n = p.size
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(y > 0, y * np.log(p), 0.0)
        neg = np.where(y < 1, (1 - y) * np.log1p(-p), 0.0)
        loss = -(pos + neg).sum() / n
        grad = (np.where(y > 0, -y / p, 0.0) + np.where(y < 1, (1 - y) / (1 - p), 0.0)) / n
    return float(loss), grad.reshape(shape)


def bce_with_logits(z, y):
    """Mean BCE computed from logits via log-sum-exp; returns ``(loss, dloss/dz)``."""
    shape = np.shape(z)
    z, y = _check(z, y)
    # log(1 + exp(-|z|)) + max(z, 0) - y z
    loss = (np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean()
    grad = (sigmoid(z) - y) / z.size
    return float(loss), grad.reshape(shape)
