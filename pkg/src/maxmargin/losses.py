"""Classification losses over logits: cross entropy, logit margin, soft
logit margin, and the clipped CW variant.

All four accept a single logit vector (K,) with an int label, or a batch
(n, K) with an int label array, returning a float or a (n,) array. The
log-sum-exp forms subtract the max first so PGD-scale logits cannot
overflow.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import DimensionError


class LossKind(enum.Enum):
    CE = "ce"
    LM = "lm"
    SLM = "slm"
    CW = "cw"


def _as_logit_batch(logits, y) -> tuple[np.ndarray, np.ndarray, bool]:
    lg = np.asarray(logits, dtype=np.float64)
    single = lg.ndim == 1
    if single:
        lg = lg[None, :]
    if lg.ndim != 2 or lg.shape[1] < 2:
        raise DimensionError("logits must be (K,) or (n, K) with K >= 2")
    yv = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if yv.shape != (lg.shape[0],):
        raise DimensionError("labels must match the logits batch size")
    if np.any(yv < 0) or np.any(yv >= lg.shape[1]):
        raise IndexError("class index out of range")
    return lg, yv, single


def softmax(logits) -> np.ndarray:
    """Stable softmax along the last axis; entries positive, rows sum to 1."""
    lg = np.asarray(logits, dtype=np.float64)
    shifted = lg - lg.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.exp(a - m).sum(axis=axis))


def _wrong_masked(lg: np.ndarray, yv: np.ndarray) -> np.ndarray:
    masked = lg.copy()
    masked[np.arange(lg.shape[0]), yv] = -np.inf
    return masked


def loss_value(kind: LossKind, logits, y):
    """Scalar loss (or per-example array for a batch).

    LM is negative exactly when y is the strict argmax; CW clips LM above
    at 0; SLM replaces LM's max over wrong logits with log-sum-exp.
    """
    lg, yv, single = _as_logit_batch(logits, y)
    fy = lg[np.arange(lg.shape[0]), yv]
    if kind is LossKind.CE:
        out = _logsumexp(lg) - fy
    elif kind is LossKind.LM:
        out = _wrong_masked(lg, yv).max(axis=1) - fy
    elif kind is LossKind.SLM:
        out = _logsumexp(_wrong_masked(lg, yv)) - fy
    elif kind is LossKind.CW:
        out = np.minimum(_wrong_masked(lg, yv).max(axis=1) - fy, 0.0)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return float(out[0]) if single else out


def loss_grad_logits(kind: LossKind, logits, y) -> np.ndarray:
    """Exact gradient of loss_value w.r.t. the logits.

    LM/CW ties on the maximizing wrong logit break to the lowest index; the
    CW gradient is zero wherever LM >= 0 (the clipped region).
    """
    lg, yv, single = _as_logit_batch(logits, y)
    n, k = lg.shape
    rows = np.arange(n)
    if kind is LossKind.CE:
        grad = softmax(lg)
        grad[rows, yv] -= 1.0
    elif kind in (LossKind.LM, LossKind.CW):
        masked = _wrong_masked(lg, yv)
        jstar = masked.argmax(axis=1)  # argmax takes the first max: lowest index
        grad = np.zeros_like(lg)
        grad[rows, jstar] = 1.0
        grad[rows, yv] = -1.0
        if kind is LossKind.CW:
            lm = masked.max(axis=1) - lg[rows, yv]
            grad[lm >= 0.0] = 0.0
    elif kind is LossKind.SLM:
        masked = _wrong_masked(lg, yv)
        grad = softmax(masked)  # rows of -inf at y exponentiate to 0
        grad[rows, yv] = -1.0
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return grad[0] if single else grad


def ce_slm_ratio(logits, y):
    """The scalar relating the CE and SLM gradients:
    sum of wrong-class softmax mass, computed stably; strictly in (0, 1).
    """
    lg, yv, single = _as_logit_batch(logits, y)
    rows = np.arange(lg.shape[0])
    shifted = lg - lg.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    ey = e[rows, yv].copy()
    e[rows, yv] = 0.0
    wrong = e.sum(axis=1)
    r = wrong / (wrong + ey)  # avoids the cancellation of 1 - softmax_y
    return float(r[0]) if single else r
