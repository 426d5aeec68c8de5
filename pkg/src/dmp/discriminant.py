"""Discriminative-structure losses on manifold-layer features.

Two cosine-similarity criteria share a set of global *anchors* (class means
and overall mean of the full source set, held constant between refreshes):

* the source inter-class loss spreads the batch class means apart, and
* the target intra-class loss pulls each target feature towards the anchor
  of the classes its soft prediction supports (Top-k truncated).

Class indices are 0-based throughout. Class weights ``w`` sum to one and
enter every formula as ``c * w`` so the vanilla weights ``1/c`` leave the
unweighted losses unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

VANILLA = "vanilla"
PARTIAL = "partial"

_ZERO_NORM = 1e-300


@dataclass(frozen=True)
class ClassAnchors:
    """Full-source class means (d x c), overall mean (d) and class counts."""

    class_means: np.ndarray
    overall_mean: np.ndarray
    counts: np.ndarray

    @property
    def n_classes(self):
        return self.class_means.shape[1]


class InterClassLoss(NamedTuple):
    loss: float
    grad: np.ndarray
    pairs: int  # 0 means fewer than two usable classes; loss and grad are zero


class IntraClassLoss(NamedTuple):
    loss: float
    grad_H: np.ndarray
    grad_P: np.ndarray


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_labels(labels, c, n=None):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InvalidInputError("labels must be a 1-D integer array")
    if n is not None and labels.shape[0] != n:
        raise InvalidInputError(f"got {labels.shape[0]} labels for {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InvalidInputError(f"labels must lie in [0, {c})")
    return labels


def class_means(H, labels, c):
    """Per-class column means of ``H`` (zero column for absent classes) and counts."""
    H = np.asarray(H, dtype=np.float64)
    labels = _check_labels(labels, c, H.shape[1])
    counts = np.bincount(labels, minlength=c).astype(np.float64)
    onehot = np.zeros((c, H.shape[1]))
    onehot[labels, np.arange(H.shape[1])] = 1.0
    sums = H @ onehot.T
    means = np.divide(sums, counts[None, :], out=np.zeros_like(sums), where=counts[None, :] > 0)
    return means, counts


def compute_anchors(features, labels, c) -> ClassAnchors:
    """Anchors from the full (not batch) source feature set."""
    features = np.asarray(features, dtype=np.float64)
    means, counts = class_means(features, labels, c)
    return ClassAnchors(class_means=_frozen(means),
                        overall_mean=_frozen(features.mean(axis=1)),
                        counts=_frozen(counts))


def centralized_class_means(batch_means, anchor_overall, present=None):
    """Column-normalised ``batch_means - anchor_overall 1^T``.

    Columns that are zero after centring, or marked absent in ``present``,
    stay zero. Returns ``(H_hat, zero_flags)``.
    """
    batch_means = np.asarray(batch_means, dtype=np.float64)
    anchor_overall = np.asarray(anchor_overall, dtype=np.float64).reshape(-1)
    if batch_means.shape[0] != anchor_overall.shape[0]:
        raise InvalidInputError("anchor mean and class means differ in dimension")
    Z = batch_means - anchor_overall[:, None]
    if present is not None:
        Z[:, ~np.asarray(present, dtype=bool)] = 0.0
    norms = np.linalg.norm(Z, axis=0)
    zero = norms <= _ZERO_NORM
    H_hat = np.divide(Z, norms[None, :], out=np.zeros_like(Z), where=~zero[None, :])
    return H_hat, zero


def inter_class_loss(batch_features, batch_labels, anchors: ClassAnchors) -> InterClassLoss:
    """Mean pairwise cosine between centralised batch class means.

    Pairs involving a class that is absent from the batch (or whose
    centralised mean vanishes) are dropped from both the sum and the pair
    count. The anchor overall mean is a constant.
    """
    H = np.asarray(batch_features, dtype=np.float64)
    c = anchors.n_classes
    means, counts = class_means(H, batch_labels, c)
    Z = means - anchors.overall_mean[:, None]
    present = counts > 0
    Z[:, ~present] = 0.0
    norms = np.linalg.norm(Z, axis=0)
    usable = present & (norms > _ZERO_NORM)
    m = int(usable.sum())
    if m < 2:
        logger.warning("inter-class loss needs two classes in the batch; got %d", m)
        return InterClassLoss(0.0, np.zeros_like(H), 0)
    pairs = m * (m - 1) // 2
    H_hat = np.zeros_like(Z)
    H_hat[:, usable] = Z[:, usable] / norms[usable]
    total = H_hat.sum(axis=1)
    loss = (float(total @ total) - m) / (2.0 * pairs)
    d_hat = (total[:, None] - H_hat) / pairs
    d_hat[:, ~usable] = 0.0
    # through the column normalisation
    radial = np.sum(H_hat * d_hat, axis=0)
    safe = np.where(usable, norms, 1.0)
    dZ = (d_hat - H_hat * radial[None, :]) / safe[None, :]
    labels = np.asarray(batch_labels)
    grad = dZ[:, labels] / counts[labels][None, :]
    return InterClassLoss(loss, grad, pairs)


def topk_mask(P, k):
    """Binary c x n mask selecting the ``k`` largest entries of every column.

    Ties go to the lowest class index.
    """
    P = np.asarray(P, dtype=np.float64)
    c, n = P.shape
    if not 1 <= k <= c:
        raise InvalidInputError(f"k must be in [1, {c}], got {k}")
    order = np.argsort(-P, axis=0, kind="stable")[:k]
    chi = np.zeros((c, n))
    chi[order, np.arange(n)[None, :]] = 1.0
    return chi


def _normalize_columns(X):
    norms = np.linalg.norm(X, axis=0)
    ok = norms > _ZERO_NORM
    Xn = np.divide(X, norms[None, :], out=np.zeros_like(X), where=ok[None, :])
    return Xn, norms, ok


def _check_weights(w, c):
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != c:
        raise InvalidInputError(f"class weights have length {w.shape[0]}, expected {c}")
    return w


def target_similarity(Ht, anchors: ClassAnchors):
    """Cosine similarities between anchor class means and target features (c x n)."""
    A, _, _ = _normalize_columns(np.asarray(anchors.class_means))
    Hn, _, _ = _normalize_columns(np.asarray(Ht, dtype=np.float64))
    return A.T @ Hn


def intra_class_loss(Ht, P, anchors: ClassAnchors, w, k) -> IntraClassLoss:
    """Top-k truncated, class-weighted soft intra-class loss and its gradients.

    ``loss = -(1/(n k)) sum_ij c w_i chi_ij p_ij s_ij``. ``grad_P`` treats the
    Top-k mask as fixed (it is piecewise constant in ``P``).
    """
    Ht = np.asarray(Ht, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    c, n = P.shape
    if Ht.shape[1] != n:
        raise InvalidInputError("features and predictions disagree on sample count")
    if anchors.n_classes != c:
        raise InvalidInputError("anchors and predictions disagree on class count")
    cw = c * _check_weights(w, c)
    A, _, anchor_ok = _normalize_columns(np.asarray(anchors.class_means))
    if not anchor_ok.any():
        logger.warning("all anchor class means are zero; intra-class loss disabled")
        return IntraClassLoss(0.0, np.zeros_like(Ht), np.zeros_like(P))
    Hn, norms, ok = _normalize_columns(Ht)
    S = A.T @ Hn
    chi = topk_mask(P, k)
    scale = -1.0 / (n * k)
    coeff = cw[:, None] * chi
    loss = scale * float(np.sum(coeff * P * S))
    grad_P = scale * coeff * S
    d_hn = scale * (A @ (coeff * P))
    radial = np.sum(Hn * d_hn, axis=0)
    safe = np.where(ok, norms, 1.0)
    grad_H = (d_hn - Hn * radial[None, :]) / safe[None, :]
    grad_H[:, ~ok] = 0.0
    return IntraClassLoss(loss, grad_H, grad_P)


def intra_class_loss_untruncated(Ht, P, anchors: ClassAnchors, w):
    """Soft intra-class loss without truncation, normalised by ``1/(n c)``."""
    P = np.asarray(P, dtype=np.float64)
    c, n = P.shape
    cw = c * _check_weights(w, c)
    S = target_similarity(Ht, anchors)
    return -float(np.sum(cw[:, None] * P * S)) / (n * c)


def class_weights(P_accumulated, mode=VANILLA):
    """Class weight vector: mean target prediction (partial) or ``1/c`` (vanilla)."""
    P = np.asarray(P_accumulated, dtype=np.float64)
    c, n = P.shape
    if mode == VANILLA:
        return np.full(c, 1.0 / c)
    if mode != PARTIAL:
        raise InvalidInputError(f"unknown weighting mode {mode!r}")
    if n < 1:
        raise InvalidInputError("partial weights need at least one target prediction")
    return P.mean(axis=1)


def weighted_source_features(Hs, labels, w):
    """Scale column ``i`` of ``Hs`` by ``c * w[labels[i]]``."""
    Hs = np.asarray(Hs, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    labels = _check_labels(labels, w.shape[0], Hs.shape[1])
    return Hs * (w.shape[0] * w[labels])[None, :]
