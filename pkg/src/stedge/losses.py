"""Multi-layer weighted cross-entropy teaching and L2 consistency losses.

Every loss is a pixel sum (not a mean) and comes back together with its
gradient with respect to the predicted probabilities, which is what the
network's backward pass consumes.
"""

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-7
PAPER_DELTA = (0.7, 0.7, 1.1, 1.1, 0.3, 0.3, 1.3)


def default_delta(num_blocks):
    """Per-block weights: the 7-block vector, or unit side weights plus the fused weight."""
    if num_blocks == len(PAPER_DELTA):
        return PAPER_DELTA
    return (1.0,) * (num_blocks - 1) + (PAPER_DELTA[-1],)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.1
    delta: tuple = field(default=PAPER_DELTA)
    mu: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if any(d < 0 for d in self.delta):
            raise ValueError("delta entries must be >= 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


@dataclass(frozen=True)
class ClassWeights:
    alpha: float  # weight of background pixels
    beta: float  # weight of edge pixels


def class_weights(label, lam=1.1):
    label = np.asarray(label, dtype=bool)
    pos = int(label.sum())
    total = label.size
    if total == 0:
        return ClassWeights(0.0, 0.0)
    return ClassWeights(lam * pos / total, (total - pos) / total)


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def wce_block(pred, label, weights):
    """Class-balanced binary cross-entropy summed over pixels.

    Returns ``(loss, dloss/dpred)``. Probabilities are clamped to
    ``[EPS, 1 - EPS]`` before taking logs.
    """
    _check_shapes(pred, label)
    p = np.clip(np.asarray(pred, dtype=float), EPS, 1 - EPS)
    y = np.asarray(label, dtype=bool)
    loss = -(weights.alpha * np.log1p(-p[~y]).sum() + weights.beta * np.log(p[y]).sum())
    grad = np.where(y, -weights.beta / p, weights.alpha / (1 - p))
    return float(loss), grad


def _check_delta(n, cfg):
    if n != len(cfg.delta):
        raise ValueError(f"{n} side outputs but {len(cfg.delta)} delta weights")


def wce_multi_layer(preds, label, cfg):
    _check_delta(len(preds), cfg)
    w = class_weights(label, cfg.lam)
    loss, grads = 0.0, []
    for d, p in zip(cfg.delta, preds):
        l, g = wce_block(p, label, w)
        loss += d * l
        grads.append(d * g)
    return loss, grads


def mlc_block(pred, pred_perturbed):
    """Sum of squared differences; returns ``(loss, grad_pred, grad_perturbed)``."""
    _check_shapes(pred, pred_perturbed)
    diff = np.asarray(pred, dtype=float) - np.asarray(pred_perturbed, dtype=float)
    return float((diff**2).sum()), 2 * diff, -2 * diff


def mlc_multi_layer(preds, preds_perturbed, cfg):
    _check_delta(len(preds), cfg)
    _check_delta(len(preds_perturbed), cfg)
    loss, g_clean, g_pert = 0.0, [], []
    for d, p, q in zip(cfg.delta, preds, preds_perturbed):
        l, gp, gq = mlc_block(p, q)
        loss += d * l
        g_clean.append(d * gp)
        g_pert.append(d * gq)
    return loss, g_clean, g_pert


def total_loss(preds, preds_perturbed, label, cfg):
    """Teaching on the clean predictions plus ``mu`` times the consistency term.

    Returns ``(loss, grads_clean, grads_perturbed)``.
    """
    l_wce, g_wce = wce_multi_layer(preds, label, cfg)
    l_mlc, g_clean, g_pert = mlc_multi_layer(preds, preds_perturbed, cfg)
    mu = cfg.mu
    grads_clean = [a + mu * b for a, b in zip(g_wce, g_clean)]
    grads_pert = [mu * b for b in g_pert]
    return l_wce + mu * l_mlc, grads_clean, grads_pert
