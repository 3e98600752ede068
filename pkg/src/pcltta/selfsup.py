"""Self-supervised objectives on per-point class probabilities.

Entropy, the batch-mean diversity term, information maximization, the
KL-consistency and entropy-confidence reliability weights, and the weighted
pseudo-label cross-entropy. Each differentiable term has a companion
``*_grad`` returning the gradient with respect to the logits that produced
``p`` (through the softmax). Natural logarithms throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import log_softmax

_TINY = np.finfo(np.float64).tiny
SKIP_THRESHOLD = 1e-12


def _log(p):
    return np.log(np.maximum(p, _TINY))


def _xlogx(p):
    return p * _log(p)


def _check(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("expected a non-empty N x K probability array")
    return p


def _softmax_backward(p, dp):
    """Chain dL/dp through the softmax to dL/dlogits."""
    return p * (dp - np.sum(p * dp, axis=1, keepdims=True))


def point_entropy(p: np.ndarray) -> np.ndarray:
    return -np.sum(_xlogx(np.asarray(p, dtype=np.float64)), axis=1)


def entropy_loss(p: np.ndarray) -> float:
    return float(np.mean(point_entropy(_check(p))))


def entropy_loss_grad(p: np.ndarray) -> np.ndarray:
    p = _check(p)
    h = point_entropy(p)[:, None]
    return -p * (_log(p) + h) / p.shape[0]


def diversity_term(p: np.ndarray, entropy_sign_div: bool = False) -> float:
    """sum_c pbar_c log pbar_c over the batch-mean prediction pbar.

    Minimizing this spreads the mean prediction over classes. With
    ``entropy_sign_div`` the sign flips to the plain entropy of pbar.
    """
    pbar = _check(p).mean(axis=0)
    value = float(np.sum(_xlogx(pbar)))
    return -value if entropy_sign_div else value


def diversity_term_grad(p: np.ndarray, entropy_sign_div: bool = False) -> np.ndarray:
    p = _check(p)
    n = p.shape[0]
    pbar = p.mean(axis=0)
    dp = np.broadcast_to((_log(pbar) + 1.0) / n, p.shape)
    g = _softmax_backward(p, dp)
    return -g if entropy_sign_div else g


def im_loss(p: np.ndarray, entropy_sign_div: bool = False):
    """Return ``(er, div_term, im)`` with ``im = er + div_term``."""
    er = entropy_loss(p)
    div = diversity_term(p, entropy_sign_div)
    return er, div, er + div


def im_loss_grad(p: np.ndarray, entropy_sign_div: bool = False) -> np.ndarray:
    return entropy_loss_grad(p) + diversity_term_grad(p, entropy_sign_div)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis; q is clamped below at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), 1e-12)
    terms = np.where(p > 0, p * (_log(p) - np.log(q)), 0.0)
    out = np.sum(terms, axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class ReliabilityWeights:
    w_con: np.ndarray
    w_ent: np.ndarray
    w: np.ndarray


def reliability_weights(p: np.ndarray, p_aug: np.ndarray) -> ReliabilityWeights:
    """Per-point consistency x confidence weight, computed from the clean branch p."""
    p = _check(p)
    p_aug = np.asarray(p_aug, dtype=np.float64)
    if p.shape != p_aug.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {p_aug.shape}")
    k = p.shape[1]
    w_con = np.exp(-np.maximum(kl_divergence(p, p_aug), 0.0))
    if k > 1:
        w_ent = np.clip(1.0 - point_entropy(p) / np.log(k), 0.0, 1.0)
    else:
        w_ent = np.ones(p.shape[0])
    return ReliabilityWeights(w_con, w_ent, w_con * w_ent)


def make_pseudo_labels(p: np.ndarray) -> np.ndarray:
    return np.argmax(_check(p), axis=1).astype(np.int64)


def _pl_parts(p, labels, w):
    p = _check(p)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    if labels.shape != (p.shape[0],) or w.shape != (p.shape[0],):
        raise ValueError("pseudo-labels and weights must have one entry per point")
    return p, labels, w, float(w.sum())


def pl_loss(p: np.ndarray, labels: np.ndarray, w) -> tuple:
    """Weighted pseudo-label cross-entropy; returns ``(loss, skipped)``."""
    p, labels, w, total = _pl_parts(p, labels, w)
    if total <= SKIP_THRESHOLD:
        return 0.0, True
    picked = _log(p[np.arange(len(labels)), labels])
    return float(-np.sum(w * picked) / total), False


def pl_loss_grad(p: np.ndarray, labels: np.ndarray, w) -> np.ndarray:
    p, labels, w, total = _pl_parts(p, labels, w)
    if total <= SKIP_THRESHOLD:
        return np.zeros_like(p)
    g = p.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g * (w / total)[:, None]


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over labels >= 0 and its logit gradient.

    Returns ``(loss, grad, count)``; rows labeled -1 contribute nothing.
    """
    labels = np.asarray(labels, dtype=np.int64)
    valid = labels >= 0
    count = int(valid.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad, 0
    logp = log_softmax(logits[valid])
    idx = np.arange(count)
    loss = float(-logp[idx, labels[valid]].mean())
    g = np.exp(logp)
    g[idx, labels[valid]] -= 1.0
    grad[valid] = g / count
    return loss, grad, count
