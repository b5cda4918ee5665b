"""Expression cross-entropy, self-constrained focal identity loss, joint loss.

The Tensor-level losses take raw logits and fuse the softmax in, working in
float64 internally; the ``*_from_probs`` variants take probabilities and are
plain numpy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, make_op, softmax_array
from .config import LossConfig

PROB_FLOOR = 1e-12
_MAX_NLL = -np.log(PROB_FLOOR)


def _check_labels(labels: np.ndarray, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ValueError(f"got {labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    return labels


def _nll(logits: np.ndarray, labels: np.ndarray):
    z = logits.astype(np.float64)
    p = softmax_array(z)
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    nll = lse - z[np.arange(len(labels)), labels]
    clamped = nll >= _MAX_NLL
    return p, np.minimum(nll, _MAX_NLL), clamped


def modulating_factor(p, alpha: float = 0.1, gamma: float = 15.0):
    """The self-constraint weight ``alpha * (1 - p)**gamma``."""
    return alpha * np.power(1.0 - np.asarray(p, dtype=np.float64), gamma)


def _focal_from_nll(p, nll, clamped, labels, alpha, gamma, dtype):
    b = len(labels)
    pt = np.exp(-nll)
    weight = alpha * np.power(1.0 - pt, gamma)
    out = np.asarray(np.mean(weight * nll))

    def bw(g):
        # d/dnll of alpha (1-p)^gamma nll with p = exp(-nll)
        if gamma == 0:
            dl_dnll = weight
        else:
            one_minus = 1.0 - pt
            safe = np.where(one_minus > 0, one_minus, 1.0)
            dl_dnll = weight + np.where(one_minus > 0, alpha * gamma * safe ** (gamma - 1) * pt * nll, 0.0)
        dl_dnll = np.where(clamped, 0.0, dl_dnll)
        dz = p.copy()
        dz[np.arange(b), labels] -= 1.0
        return ((g * dl_dnll / b)[:, None] * dz).astype(dtype),

    return out, bw


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class under softmax(logits)."""
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    p, nll, clamped = _nll(logits.data, labels)
    b = len(labels)

    def bw(g):
        dz = p.copy()
        dz[np.arange(b), labels] -= 1.0
        dz[clamped] = 0.0
        return ((g / b) * dz).astype(logits.dtype),

    return make_op(np.asarray(np.mean(nll)), (logits,), bw)


def focal_multiclass(logits: Tensor, labels, cfg: LossConfig | None = None, *,
                     alpha: float | None = None, gamma: float | None = None) -> Tensor:
    """Mean of ``alpha (1 - p_true)**gamma * -log p_true`` over the batch."""
    cfg = cfg or LossConfig()
    alpha = cfg.alpha if alpha is None else alpha
    gamma = cfg.gamma if gamma is None else gamma
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    p, nll, clamped = _nll(logits.data, labels)
    out, bw = _focal_from_nll(p, nll, clamped, labels, alpha, gamma, logits.dtype)
    return make_op(out, (logits,), bw)


def cross_entropy_from_probs(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    pt = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(np.mean(-np.log(pt)))


def focal_from_probs(probs, labels, alpha: float = 0.1, gamma: float = 15.0) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    pt = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(np.mean(modulating_factor(pt, alpha, gamma) * -np.log(pt)))


@dataclass
class JointLoss:
    total: Tensor
    l_emo: Tensor
    l_id: Tensor | None

    def values(self) -> tuple[float, float, float]:
        l_id = float(self.l_id.data) if self.l_id is not None else 0.0
        return float(self.total.data), float(self.l_emo.data), l_id


def joint_loss(emo_logits: Tensor, emo_labels, id_logits: Tensor | None = None, id_labels=None,
               cfg: LossConfig | None = None) -> JointLoss:
    """Expression cross-entropy plus the focal identity term when a head exists."""
    cfg = cfg or LossConfig()
    l_emo = cross_entropy(emo_logits, emo_labels)
    if id_logits is None:
        return JointLoss(l_emo, l_emo, None)
    if id_labels is None:
        raise ValueError("identity logits given without identity labels")
    if id_logits.shape[0] != emo_logits.shape[0]:
        raise ValueError(f"batch sizes differ: {emo_logits.shape[0]} vs {id_logits.shape[0]}")
    l_id = focal_multiclass(id_logits, id_labels, cfg)
    return JointLoss(add(l_emo, l_id), l_emo, l_id)


def focal_sweep(logits, labels, alphas, gammas) -> np.ndarray:
    """Focal loss value for every (alpha, gamma) pair; rows follow ``alphas``."""
    logits = Tensor(np.asarray(logits, dtype=np.float64))
    return np.array([[float(focal_multiclass(logits, labels, alpha=a, gamma=g).data) for g in gammas]
                     for a in alphas])
