"""Eigenmap-guided self-training: class centroids, pseudo-labels and losses.

Batch losses are means over the batch of the per-sample terms, except the
diversity term which is defined on the batch-mean prediction. Every loss has a
companion returning its gradient with respect to the logits (or, for the
Chamfer term, the shifted points).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

CLAMP = 1e-12
LabelRule = Literal["argmax_sim", "literal_argmin"]


@dataclass(frozen=True, eq=False)
class BatchDescriptors:
    deep: np.ndarray  # B x D
    spectral: np.ndarray  # B x m
    probabilities: np.ndarray  # B x C


@dataclass(frozen=True, eq=False)
class Centroids:
    deep: np.ndarray  # C x D
    spectral: np.ndarray  # C x m
    support: np.ndarray  # C

    @property
    def empty(self) -> np.ndarray:
        return self.support < CLAMP


@dataclass(frozen=True, eq=False)
class PseudoLabels:
    labels: np.ndarray
    scores: np.ndarray
    zero_norm: int = 0


def compute_centroids(batch: BatchDescriptors) -> Centroids:
    p = np.asarray(batch.probabilities, dtype=np.float64)
    if p.shape[0] < 1:
        raise ValueError("empty batch")
    support = p.sum(axis=0)
    denom = np.where(support < CLAMP, 1.0, support)[:, None]
    deep = (p.T @ batch.deep) / denom
    spectral = (p.T @ batch.spectral) / denom
    empty = support < CLAMP
    deep[empty] = 0.0
    spectral[empty] = 0.0
    return Centroids(deep, spectral, support)


def cosine_matrix(a: np.ndarray, b: np.ndarray):
    """Cosine similarity between rows of ``a`` and rows of ``b``.

    Pairs involving a vector of norm below the clamp get similarity 0; the
    number of such pairs is returned alongside.
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    bad = (na[:, None] < CLAMP) | (nb[None, :] < CLAMP)
    sim = (a @ b.T) / np.where(bad, 1.0, denom)
    sim[bad] = 0.0
    return sim, int(bad.sum())


def pseudo_label(
    batch: BatchDescriptors,
    centroids: Centroids,
    alpha: float,
    rule: LabelRule = "argmax_sim",
) -> PseudoLabels:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    empty = centroids.empty
    if empty.all():
        raise ValueError("every class centroid is empty")
    c = empty.shape[0]
    scores = np.zeros((batch.deep.shape[0], c))
    zero = 0
    # skip a stream entirely at the boundary so its values cannot leak in
    if alpha > 0.0:
        sim_d, bad = cosine_matrix(batch.deep, centroids.deep)
        scores = scores + alpha * sim_d
        zero += bad
    if alpha < 1.0:
        sim_s, bad = cosine_matrix(batch.spectral, centroids.spectral)
        scores = scores + (1.0 - alpha) * sim_s
        zero += bad
    if rule == "argmax_sim":
        labels = np.argmax(np.where(empty[None, :], -np.inf, scores), axis=1)
    elif rule == "literal_argmin":
        labels = np.argmin(np.where(empty[None, :], np.inf, scores), axis=1)
    else:
        raise ValueError(f"unknown label rule {rule!r}")
    return PseudoLabels(labels, scores, zero)


# ----------------------------------------------------------------------------
# Per-sample losses


def _log(p):
    return np.log(np.maximum(p, CLAMP))


def loss_pl(probabilities, label: int) -> float:
    return float(-_log(np.asarray(probabilities)[label]))


def loss_ent(probabilities) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    return float(-np.sum(p * _log(p)))


def loss_div(batch_probabilities) -> float:
    g = np.asarray(batch_probabilities, dtype=np.float64).mean(axis=0)
    return float(np.sum(g * _log(g)))


def nearest(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``x`` the index of and squared distance to its nearest row of ``y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    approx = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * (x @ y.T)
    idx = np.argmin(approx, axis=1)
    d = x - y[idx]
    return idx, np.einsum("ij,ij->i", d, d)


def loss_cd(original, shifted) -> float:
    """Single-direction Chamfer distance: mean over ``original`` of the squared
    distance to the nearest point of ``shifted``."""
    _, d2 = nearest(original, shifted)
    return float(d2.mean())


def loss_cd_grad(original, shifted) -> tuple[float, np.ndarray]:
    original = np.asarray(original, dtype=np.float64)
    shifted = np.asarray(shifted, dtype=np.float64)
    idx, d2 = nearest(original, shifted)
    grad = np.zeros_like(shifted)
    np.add.at(grad, idx, 2.0 * (shifted[idx] - original) / original.shape[0])
    return float(d2.mean()), grad


# ----------------------------------------------------------------------------
# Batch objectives and their logit gradients


@dataclass(frozen=True)
class LossParts:
    pl: float
    ent: float
    div: float
    cd: float = 0.0


def loss_input_adaptation(parts: LossParts, beta1: float, beta2: float) -> float:
    return parts.pl + beta1 * (parts.ent + parts.div) + beta2 * parts.cd


def loss_model_adaptation(parts: LossParts, beta3: float) -> float:
    return parts.pl + beta3 * (parts.ent + parts.div)


def batch_losses(probabilities: np.ndarray, labels: np.ndarray):
    """Batch-mean cross entropy, batch-mean entropy and diversity, with logit gradients.

    Returns ``(pl, ent, div, d_pl, d_ent, d_div)``; each gradient is B x C.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    b = p.shape[0]
    rows = np.arange(b)
    logp = _log(p)

    pl = float(-np.mean(logp[rows, labels]))
    d_pl = p.copy()
    d_pl[rows, labels] -= 1.0
    d_pl /= b

    h = -np.sum(p * logp, axis=1)
    ent = float(h.mean())
    d_ent = -p * (logp + h[:, None]) / b

    g = p.mean(axis=0)
    logg = _log(g)
    div = float(np.sum(g * logg))
    a = (logg + 1.0) / b
    d_div = p * (a[None, :] - (p @ a)[:, None])
    return pl, ent, div, d_pl, d_ent, d_div
