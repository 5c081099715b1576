"""Distillation losses over visual positions and the text cross-entropy."""

from __future__ import annotations

import numpy as np

EPS = 1e-8


class LossError(ValueError):
    pass


def _row_weights(shape, rows):
    """Normalised per-row weights; ``rows`` is an optional boolean selector over the token axis."""
    n = int(np.prod(shape[:-1]))
    if rows is None:
        return np.full(shape[:-1], 1.0 / n)
    sel = np.broadcast_to(np.asarray(rows, dtype=float), shape[:-1])
    total = sel.sum()
    if total == 0:
        raise LossError("no rows selected for distillation")
    return sel / total


def distill_loss_forward(v_pred, v_teacher, rows=None, strict: bool = False):
    """Negative mean cosine similarity; each norm gets ``EPS`` added."""
    if v_pred.shape != v_teacher.shape:
        raise LossError(f"shape mismatch {v_pred.shape} vs {v_teacher.shape}")
    na = np.linalg.norm(v_pred, axis=-1)
    nb = np.linalg.norm(v_teacher, axis=-1)
    if strict and ((na == 0).any() or (nb == 0).any()):
        raise LossError("zero-norm row in distillation input")
    dot = (v_pred * v_teacher).sum(axis=-1)
    den = (na + EPS) * (nb + EPS)
    cos = dot / den
    wts = _row_weights(v_pred.shape, rows)
    loss = -float((wts * cos).sum())
    return loss, (v_pred, v_teacher, na, nb, dot, den, wts)


def distill_loss_backward(cache, scale: float = 1.0):
    """Gradient w.r.t. ``v_pred`` only; the teacher never receives gradient."""
    v_pred, v_teacher, na, nb, dot, den, wts = cache
    g = -scale * wts
    inv_na = np.where(na > 0, 1.0 / np.where(na > 0, na, 1.0), 0.0)
    term1 = v_teacher / den[..., None]
    term2 = (dot / (den * (na + EPS)) * inv_na)[..., None] * v_pred
    return g[..., None] * (term1 - term2)


def distill_loss(v_pred, v_teacher, rows=None, strict: bool = False) -> float:
    return distill_loss_forward(v_pred, v_teacher, rows, strict)[0]


def distill_loss_mse_forward(v_pred, v_teacher, rows=None):
    if v_pred.shape != v_teacher.shape:
        raise LossError(f"shape mismatch {v_pred.shape} vs {v_teacher.shape}")
    diff = v_pred - v_teacher
    wts = _row_weights(v_pred.shape, rows) / v_pred.shape[-1]
    loss = float((wts[..., None] * diff * diff).sum())
    return loss, (diff, wts)


def distill_loss_mse_backward(cache, scale: float = 1.0):
    diff, wts = cache
    return 2.0 * scale * wts[..., None] * diff


def distill_loss_mse(v_pred, v_teacher, rows=None) -> float:
    return distill_loss_mse_forward(v_pred, v_teacher, rows)[0]


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def text_loss_forward(logits, targets, weights=None):
    """Mean negative log-likelihood of ``targets`` over tokens with nonzero weight."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise LossError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size == 0:
        raise LossError("text loss needs at least one token")
    if (targets < 0).any() or (targets >= V).any():
        raise LossError(f"target id outside [0, {V})")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise LossError("text loss needs at least one weighted token")
    lp = log_softmax(logits)
    nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = float((w * nll).sum() / total)
    return loss, (lp, targets, w / total)


def text_loss_backward(cache, scale: float = 1.0):
    lp, targets, wn = cache
    g = np.exp(lp)
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], axis=-1) - 1.0, axis=-1)
    return g * (scale * wn)[..., None]


def text_loss(logits, targets, weights=None) -> float:
    return text_loss_forward(logits, targets, weights)[0]
